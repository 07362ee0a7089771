//! Filesystem access used by the skill store and the workspace.
//!
//! Everything that touches disk goes through [`FileSystem`] so tests can count
//! reads or inject a crash between the temp-file write and the rename of an
//! atomic save.

use std::fmt::Debug;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub trait FileSystem: Send + Sync + Debug {
    fn read_to_string(&self, path: &Path) -> io::Result<String>;
    fn write(&self, path: &Path, contents: &[u8]) -> io::Result<()>;
    /// Appends to `path`, creating it if missing.
    fn append(&self, path: &Path, contents: &[u8]) -> io::Result<()>;
    fn rename(&self, from: &Path, to: &Path) -> io::Result<()>;
    fn create_dir_all(&self, path: &Path) -> io::Result<()>;
    fn remove_file(&self, path: &Path) -> io::Result<()>;
    fn remove_dir_all(&self, path: &Path) -> io::Result<()>;
    /// Entries of `path`, sorted by file name.
    fn list_dir(&self, path: &Path) -> io::Result<Vec<PathBuf>>;
    fn is_dir(&self, path: &Path) -> bool;
    fn is_file(&self, path: &Path) -> bool;
}

pub type SharedFs = Arc<dyn FileSystem>;

#[derive(Debug, Default, Clone, Copy)]
pub struct OsFs;

impl FileSystem for OsFs {
    fn read_to_string(&self, path: &Path) -> io::Result<String> {
        std::fs::read_to_string(path)
    }

    fn write(&self, path: &Path, contents: &[u8]) -> io::Result<()> {
        std::fs::write(path, contents)
    }

    fn append(&self, path: &Path, contents: &[u8]) -> io::Result<()> {
        use std::io::Write;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        file.write_all(contents)
    }

    fn rename(&self, from: &Path, to: &Path) -> io::Result<()> {
        std::fs::rename(from, to)
    }

    fn create_dir_all(&self, path: &Path) -> io::Result<()> {
        std::fs::create_dir_all(path)
    }

    fn remove_file(&self, path: &Path) -> io::Result<()> {
        std::fs::remove_file(path)
    }

    fn remove_dir_all(&self, path: &Path) -> io::Result<()> {
        std::fs::remove_dir_all(path)
    }

    fn list_dir(&self, path: &Path) -> io::Result<Vec<PathBuf>> {
        let mut entries = std::fs::read_dir(path)?
            .map(|entry| entry.map(|e| e.path()))
            .collect::<io::Result<Vec<_>>>()?;
        entries.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        Ok(entries)
    }

    fn is_dir(&self, path: &Path) -> bool {
        path.is_dir()
    }

    fn is_file(&self, path: &Path) -> bool {
        path.is_file()
    }
}

pub fn os_fs() -> SharedFs {
    Arc::new(OsFs)
}

/// Writes `contents` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(fs: &dyn FileSystem, path: &Path, contents: &[u8]) -> io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs.write(&tmp, contents)?;
    fs.rename(&tmp, path)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use std::sync::Mutex;

    /// Records every path read and can fail renames on demand.
    #[derive(Debug, Default)]
    pub struct InstrumentedFs {
        pub reads: Mutex<Vec<PathBuf>>,
        pub fail_renames: std::sync::atomic::AtomicBool,
    }

    impl InstrumentedFs {
        pub fn reads_of(&self, needle: &str) -> usize {
            self.reads
                .lock()
                .unwrap()
                .iter()
                .filter(|p| p.to_string_lossy().contains(needle))
                .count()
        }
    }

    impl FileSystem for InstrumentedFs {
        fn read_to_string(&self, path: &Path) -> io::Result<String> {
            self.reads.lock().unwrap().push(path.to_path_buf());
            OsFs.read_to_string(path)
        }
        fn write(&self, path: &Path, contents: &[u8]) -> io::Result<()> {
            OsFs.write(path, contents)
        }
        fn append(&self, path: &Path, contents: &[u8]) -> io::Result<()> {
            OsFs.append(path, contents)
        }
        fn rename(&self, from: &Path, to: &Path) -> io::Result<()> {
            if self.fail_renames.load(std::sync::atomic::Ordering::SeqCst) {
                return Err(io::Error::other("simulated crash before rename"));
            }
            OsFs.rename(from, to)
        }
        fn create_dir_all(&self, path: &Path) -> io::Result<()> {
            OsFs.create_dir_all(path)
        }
        fn remove_file(&self, path: &Path) -> io::Result<()> {
            OsFs.remove_file(path)
        }
        fn remove_dir_all(&self, path: &Path) -> io::Result<()> {
            OsFs.remove_dir_all(path)
        }
        fn list_dir(&self, path: &Path) -> io::Result<Vec<PathBuf>> {
            OsFs.list_dir(path)
        }
        fn is_dir(&self, path: &Path) -> bool {
            OsFs.is_dir(path)
        }
        fn is_file(&self, path: &Path) -> bool {
            OsFs.is_file(path)
        }
    }
}
