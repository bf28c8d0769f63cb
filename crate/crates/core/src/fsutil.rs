use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

/// 32 lowercase hex characters from the thread RNG.
pub(crate) fn random_hex_id() -> String {
    let bytes: [u8; 16] = rand::rng().random();
    hex::encode(bytes)
}

/// Relative paths (with `/` separators) of every regular file under `dir`, sorted.
pub(crate) fn list_files(dir: &Path) -> io::Result<Vec<String>> {
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let ty = entry.file_type()?;
        if ty.is_dir() {
            walk(base, &path, out)?;
        } else if ty.is_file() {
            let rel = path.strip_prefix(base).expect("walk stays under base");
            out.push(rel_to_string(rel));
        }
    }
    Ok(())
}

pub(crate) fn rel_to_string(rel: &Path) -> String {
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Recursively copies `src` into `dst`, skipping entries for which `skip`
/// returns true (called with the path relative to `src`).
pub(crate) fn copy_dir_filtered(
    src: &Path,
    dst: &Path,
    skip: &dyn Fn(&Path) -> bool,
) -> io::Result<()> {
    copy_inner(src, src, dst, skip)
}

fn copy_inner(base: &Path, src: &Path, dst: &Path, skip: &dyn Fn(&Path) -> bool) -> io::Result<()> {
    fs::create_dir_all(dst)?;
    let mut entries: Vec<_> = fs::read_dir(src)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let rel = path.strip_prefix(base).expect("copy stays under base");
        if skip(rel) {
            continue;
        }
        let target = dst.join(entry.file_name());
        let ty = entry.file_type()?;
        if ty.is_dir() {
            copy_inner(base, &path, &target, skip)?;
        } else if ty.is_file() {
            fs::copy(&path, &target)?;
        }
    }
    Ok(())
}

pub(crate) fn copy_dir(src: &Path, dst: &Path) -> io::Result<()> {
    copy_dir_filtered(src, dst, &|_| false)
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Appends `bytes` with a single `write_all` while holding an exclusive
/// advisory lock on the file.
pub(crate) fn locked_append(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    file.lock()?;
    let res = file.write_all(bytes).and_then(|_| file.flush());
    let _ = file.unlock();
    res
}

/// Exclusive advisory lock held on a lock file until dropped.
pub(crate) struct DirLock {
    file: fs::File,
}

impl DirLock {
    pub(crate) fn acquire(lock_path: PathBuf) -> io::Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)?;
        file.lock()?;
        Ok(Self { file })
    }

    pub(crate) fn shared(lock_path: PathBuf) -> io::Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)?;
        file.lock_shared()?;
        Ok(Self { file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}
