use std::io::Write;
use std::path::Path;

use paqm_core::config::{PipelineConfig, TOOL_VERSION};
use paqm_core::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path` and renames it into place,
/// so a failed run never leaves a partial artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// `# key = value` lines carrying the tool version and full configuration.
pub fn comment_header(config: &PipelineConfig, extra: &[(&str, String)]) -> String {
    let mut out = format!("# paqm {TOOL_VERSION}\n");
    for (k, v) in extra {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    for (k, v) in config.to_key_values() {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    out
}

pub fn to_json_line<T: serde::Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable document");
    text.push('\n');
    text
}

/// Binary PGM (P5) with min-max normalization; rows top to bottom as given.
pub fn pgm(rows: &[Vec<f64>], comments: &str) -> Vec<u8> {
    let height = rows.len();
    let width = rows.first().map_or(0, |r| r.len());
    let (lo, hi) = rows
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = hi - lo;
    let mut out = Vec::with_capacity(height * width + 64 + comments.len());
    out.extend_from_slice(b"P5\n");
    out.extend_from_slice(comments.as_bytes());
    out.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    for row in rows {
        for v in row {
            let level = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
            out.push(level as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_normalizes_to_full_range() {
        let img = pgm(&[vec![0.0, 1.0], vec![2.0, 4.0]], "# c\n");
        let text = String::from_utf8_lossy(&img[..12]).to_string();
        assert!(text.starts_with("P5\n# c\n2 2\n"));
        assert_eq!(&img[img.len() - 4..], &[0, 64, 128, 255]);
    }

    #[test]
    fn constant_image_is_black() {
        let img = pgm(&[vec![3.0; 3]], "");
        assert_eq!(&img[img.len() - 3..], &[0, 0, 0]);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
