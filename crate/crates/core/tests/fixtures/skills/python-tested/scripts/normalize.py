import re
import sys


def normalize(s):
    digits = re.sub(r'[^0-9+]', '', s)
    return digits if digits.startswith('+') else '+' + digits


if __name__ == '__main__':
    print(normalize(sys.argv[1]))
