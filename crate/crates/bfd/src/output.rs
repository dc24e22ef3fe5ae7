//! Report bundle files. Floats are written as `{:.16e}` (17 significant
//! digits); undefined values as the literal `undefined`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{BfdError, Result};

pub const UNDEFINED: &str = "undefined";

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        UNDEFINED.to_string()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), fmt_f64)
}

/// Files written under one output directory during a run.
#[derive(Debug)]
pub struct Bundle {
    root: PathBuf,
    files: BTreeSet<String>,
}

impl Bundle {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| BfdError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeSet::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Relative paths written so far, sorted.
    pub fn files(&self) -> Vec<String> {
        self.files.iter().cloned().collect()
    }

    pub fn take_files(&mut self) -> Vec<String> {
        std::mem::take(&mut self.files).into_iter().collect()
    }

    fn target(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| BfdError::io(parent, e))?;
        }
        self.files.insert(rel.to_string());
        Ok(path)
    }

    /// Record a file written by other means, such as a cache archive.
    pub fn note(&mut self, rel: &str) {
        self.files.insert(rel.to_string());
    }

    pub fn bytes(&mut self, rel: &str, data: &[u8]) -> Result<()> {
        let path = self.target(rel)?;
        fs::write(&path, data).map_err(|e| BfdError::io(&path, e))
    }

    pub fn text(&mut self, rel: &str, data: &str) -> Result<()> {
        self.bytes(rel, data.as_bytes())
    }

    pub fn json(&mut self, rel: &str, value: &serde_json::Value) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| BfdError::Other(e.to_string()))?;
        s.push('\n');
        self.text(rel, &s)
    }

    pub fn csv<I>(&mut self, rel: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.target(rel)?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(|e| csv_err(&path, e))?;
        w.write_record(header).map_err(|e| csv_err(&path, e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| BfdError::io(&path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> BfdError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => BfdError::io(path, io),
        other => BfdError::Other(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_is_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(f64::NAN), UNDEFINED);
        assert_eq!(fmt_opt(None), UNDEFINED);
        let x = 0.123456789012345678f64;
        assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
    }
}
