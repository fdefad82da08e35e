use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::clip::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub clip_path: String,
    pub split: Split,
    pub source_fps: f64,
}

/// Newline-delimited `<relative-path>\t<split>\t<source_fps>` records.
/// Paths resolve against `root`, the directory holding the manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.clip_path.as_str()) {
                return Err(Error::Config(format!("duplicate clip path {:?}", r.clip_path)));
            }
            if !(r.source_fps > 0.0) {
                return Err(Error::Config(format!(
                    "clip {:?} has non-positive fps {}",
                    r.clip_path, r.source_fps
                )));
            }
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, split, fps] = fields[..] else {
                return Err(Error::Config(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            };
            let source_fps = fps.trim().parse::<f64>().map_err(|e| {
                Error::Config(format!("manifest line {}: bad fps {fps:?}: {e}", lineno + 1))
            })?;
            records.push(ManifestRecord {
                clip_path: path.to_string(),
                split: split.parse()?,
                source_fps,
            });
        }
        Self::new(root, records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}", r.clip_path, r.split, r.source_fps);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.clip_path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        let text = "a/clip0\ttrain\t30\nb/clip1\tval\t4.5\n\n";
        let m = DatasetManifest::parse(text, "/data").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].split, Split::Val);
        assert_eq!(m.records[1].source_fps, 4.5);
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/a/clip0"));
        let again = DatasetManifest::parse(&m.to_text(), "/data").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_bad_records() {
        assert!(DatasetManifest::parse("a\ttrain\t30\na\tval\t30\n", ".").is_err());
        assert!(DatasetManifest::parse("a\tdev\t30\n", ".").is_err());
        assert!(DatasetManifest::parse("a\ttrain\n", ".").is_err());
        assert!(DatasetManifest::parse("a\ttrain\tfast\n", ".").is_err());
        assert!(DatasetManifest::parse("a\ttrain\t0\n", ".").is_err());
    }
}
