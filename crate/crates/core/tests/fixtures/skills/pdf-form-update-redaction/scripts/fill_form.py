import json
import sys


def main(src, fields, dst):
    mapping = json.load(open(fields))
    print(f"filling {len(mapping)} fields from {src} into {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:4])
