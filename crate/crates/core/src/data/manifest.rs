use std::fs;
use std::path::{Path, PathBuf};

use super::image::{load_image, ImageBuffer};
use crate::error::{Error, Result};
use crate::exec;

/// A degraded image and its reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub raw: PathBuf,
    pub reference: PathBuf,
}

/// Loaded pixels of a [`Pair`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub raw: ImageBuffer,
    pub reference: ImageBuffer,
}

/// Ordered list of pairs, stored as `raw<TAB>ref` lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub pairs: Vec<Pair>,
    /// Free-form tag such as `train` or `test`; not written to disk.
    pub split: Option<String>,
}

impl DatasetManifest {
    /// Relative paths are resolved against the manifest's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |s: &str| {
            let p = Path::new(s);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(raw), Some(reference), None) if !raw.is_empty() && !reference.is_empty() => pairs.push(Pair {
                    raw: resolve(raw),
                    reference: resolve(reference),
                }),
                _ => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        detail: format!("line {}: expected `raw<TAB>ref`", n + 1),
                    })
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::config(format!("manifest {} lists no pairs", path.display())));
        }
        Ok(DatasetManifest { pairs, split: None })
    }

    pub fn to_text(&self) -> String {
        self.pairs
            .iter()
            .map(|p| format!("{}\t{}\n", p.raw.display(), p.reference.display()))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The first `n` pairs tagged `train`, the rest tagged `test`.
    pub fn split_at(&self, n: usize) -> (DatasetManifest, DatasetManifest) {
        let n = n.min(self.pairs.len());
        (
            DatasetManifest {
                pairs: self.pairs[..n].to_vec(),
                split: Some("train".into()),
            },
            DatasetManifest {
                pairs: self.pairs[n..].to_vec(),
                split: Some("test".into()),
            },
        )
    }

    /// Loads every pair, checking that both sides share extents.
    pub fn load(&self) -> Result<Vec<ImagePair>> {
        exec::try_map_indexed(self.pairs.len(), |i| {
            let p = &self.pairs[i];
            let raw = load_image(&p.raw)?;
            let reference = load_image(&p.reference)?;
            if (raw.height(), raw.width()) != (reference.height(), reference.width()) {
                return Err(Error::config(format!(
                    "{} is {}×{} but its reference {} is {}×{}",
                    p.raw.display(),
                    raw.height(),
                    raw.width(),
                    p.reference.display(),
                    reference.height(),
                    reference.width()
                )));
            }
            Ok(ImagePair { raw, reference })
        })
    }
}
