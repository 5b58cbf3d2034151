//! Small filesystem helpers shared by the commands.

use std::io;
use std::path::Path;

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = tmp_sibling(path);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Temporary sibling path in the same directory (rename stays atomic).
pub fn tmp_sibling(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".tmp");
    std::path::PathBuf::from(os)
}

/// Append a line to a CSV, creating it with the header first.
pub fn append_csv_row(path: &Path, header: &str, row: &str) -> io::Result<()> {
    let mut content = match std::fs::read_to_string(path) {
        Ok(c) => c,
        Err(e) if e.kind() == io::ErrorKind::NotFound => format!("{header}\n"),
        Err(e) => return Err(e),
    };
    content.push_str(row);
    content.push('\n');
    write_atomic(path, content.as_bytes())
}
