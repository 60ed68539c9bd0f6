//! File output helpers shared by the pipeline stages.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Formats a float with 17 significant digits (round-trip exact).
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `contents` to `path` through a sibling temp file and a rename, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

/// Row-major `rows × cols` matrix as CSV with a header row.
pub fn matrix_csv(header: &[String], data: &[f64], cols: usize) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in data.chunks_exact(cols) {
        let line: Vec<String> = row.iter().map(|&v| fmt_float(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 12345.678901234567] {
            let s = fmt_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = std::env::temp_dir().join(format!("cliff-io-{}", std::process::id()));
        let path = dir.join("out.csv");
        write_atomic(&path, b"a").unwrap();
        write_atomic(&path, b"b").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"b");
        let leftovers = fs::read_dir(&dir).unwrap().count();
        assert_eq!(leftovers, 1);
        fs::remove_dir_all(dir).unwrap();
    }
}
