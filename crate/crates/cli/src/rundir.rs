//! Timestamped run directories that are never overwritten.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub const OUT_ENV: &str = "FLIQS_OUT";

/// `--out`, else `$FLIQS_OUT`, else `./runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<command>-<UTC timestamp>-<seed>`, appending `-1`, `-2`, …
/// when the name is taken.
pub fn create(root: &Path, command: &str, seed: u64) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{command}-{stamp}-{seed}");
    for n in 0u32.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = create(root.path(), "search", 7).unwrap();
        let b = create(root.path(), "search", 7).unwrap();
        assert_ne!(a, b);
        let name = a.file_name().unwrap().to_str().unwrap();
        assert!(name.starts_with("search-") && name.ends_with("-7"), "{name}");
    }
}
