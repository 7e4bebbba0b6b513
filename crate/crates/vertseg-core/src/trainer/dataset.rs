//! Dataset manifests: tab-separated `split<TAB>image<TAB>mask` lines, plus
//! the deterministic ratio split.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default train/val/test ratios (59.7 / 8.1 / 32.2 percent); 124 items
/// split 74/10/40 under them.
pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.597, 0.081, 0.322);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!(
                "unknown split tag {other:?} (expected train, val, or test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Image/mask pairs with their split assignment. Entries keep the paths as
/// written; [`DatasetManifest::load`] resolves relative paths against the
/// manifest's directory.
#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Seed used for the split assignment, when produced by
    /// [`split_dataset`]; manifests loaded from disk do not carry one.
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Manifest(format!(
                    "{}:{}: expected 3 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let split = Split::parse(fields[0]).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            let resolve = |s: &str| {
                let p = PathBuf::from(s);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            entries.push(ManifestEntry {
                split,
                image: resolve(fields[1]),
                mask: resolve(fields[2]),
            });
        }
        Ok(DatasetManifest {
            entries,
            seed: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.split,
                e.image.display(),
                e.mask.display()
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_for(split).count()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.count(Split::Train),
            self.count(Split::Val),
            self.count(Split::Test),
        )
    }
}

/// Assigns items to train/val/test by a seeded shuffle. Counts are rounded
/// so they total exactly: train and val round to nearest, test takes the
/// remainder. Entries come back in the input order, only their split tags
/// depend on the shuffle.
pub fn split_dataset(
    items: &[(PathBuf, PathBuf)],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    if items.len() < 3 {
        return Err(Error::Parameter(format!(
            "need at least 3 items to split, got {}",
            items.len()
        )));
    }
    let (r_train, r_val, r_test) = ratios;
    if !(r_train > 0.0 && r_val >= 0.0 && r_test >= 0.0) {
        return Err(Error::Parameter(format!(
            "split ratios must be non-negative with a positive train share, got {ratios:?}"
        )));
    }
    let total = r_train + r_val + r_test;
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Parameter(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }

    let n = items.len();
    let n_train = ((n as f64 * r_train).round() as usize).min(n);
    let n_val = ((n as f64 * r_val).round() as usize).min(n - n_train);
    // Test takes the exact remainder so the three counts always total n.

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut assignment = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        assignment[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let entries = items
        .iter()
        .zip(&assignment)
        .map(|((image, mask), &split)| ManifestEntry {
            split,
            image: image.clone(),
            mask: mask.clone(),
        })
        .collect();
    Ok(DatasetManifest {
        entries,
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize) -> Vec<(PathBuf, PathBuf)> {
        (0..n)
            .map(|i| {
                (
                    PathBuf::from(format!("images/{i:04}.png")),
                    PathBuf::from(format!("masks/{i:04}.png")),
                )
            })
            .collect()
    }

    #[test]
    fn default_ratios_split_124_as_74_10_40() {
        let manifest = split_dataset(&items(124), DEFAULT_SPLIT_RATIOS, 7).unwrap();
        assert_eq!(manifest.counts(), (74, 10, 40));
    }

    #[test]
    fn exact_division_case() {
        let manifest = split_dataset(&items(10), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(manifest.counts(), (8, 1, 1));
    }

    #[test]
    fn same_seed_same_assignment() {
        let a = split_dataset(&items(30), DEFAULT_SPLIT_RATIOS, 11).unwrap();
        let b = split_dataset(&items(30), DEFAULT_SPLIT_RATIOS, 11).unwrap();
        assert_eq!(a.entries, b.entries);
        let c = split_dataset(&items(30), DEFAULT_SPLIT_RATIOS, 12).unwrap();
        assert_ne!(a.entries, c.entries);
    }

    #[test]
    fn splits_partition_the_input() {
        let manifest = split_dataset(&items(57), DEFAULT_SPLIT_RATIOS, 5).unwrap();
        assert_eq!(manifest.entries.len(), 57);
        let (tr, va, te) = manifest.counts();
        assert_eq!(tr + va + te, 57);
        // Entries stay in input order, so the identity partition is
        // immediate; also check every input is present exactly once.
        for (i, e) in manifest.entries.iter().enumerate() {
            assert_eq!(e.image, PathBuf::from(format!("images/{i:04}.png")));
        }
    }

    #[test]
    fn too_few_items_rejected() {
        assert!(split_dataset(&items(2), DEFAULT_SPLIT_RATIOS, 0).is_err());
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(split_dataset(&items(10), (0.5, 0.1, 0.1), 0).is_err());
        assert!(split_dataset(&items(10), (-0.5, 1.0, 0.5), 0).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_relative_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = split_dataset(&items(5), (0.6, 0.2, 0.2), 1).unwrap();
        let path = dir.path().join("data").join("manifest.tsv");
        manifest.save(&path).unwrap();

        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.entries.len(), 5);
        for (orig, got) in manifest.entries.iter().zip(&loaded.entries) {
            assert_eq!(orig.split, got.split);
            // Relative paths resolve against the manifest directory.
            assert_eq!(got.image, dir.path().join("data").join(&orig.image));
        }
        assert_eq!(loaded.seed, None);
    }

    #[test]
    fn malformed_lines_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "train\tonly_two_fields\n").unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(Error::Manifest(_))
        ));
        std::fs::write(&path, "validation\ta.png\tb.png\n").unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(Error::Manifest(_))
        ));
    }
}
