use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};

/// Number of folds in every benchmark.
pub const NUM_FOLDS: usize = 4;
/// Default class count of the synthetic dataset.
pub const DEFAULT_SYNTHETIC_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Pascal,
    Coco,
    Synthetic { classes: usize },
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Pascal => 20,
            DatasetKind::Coco => 80,
            DatasetKind::Synthetic { classes } => classes,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            DatasetKind::Coco => 20,
            _ => 50,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetKind::Pascal => f.write_str("pascal"),
            DatasetKind::Coco => f.write_str("coco"),
            DatasetKind::Synthetic { classes } => write!(f, "synthetic-{classes}"),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pascal" | "pascal-5i" | "voc" => Ok(DatasetKind::Pascal),
            "coco" | "coco-20i" => Ok(DatasetKind::Coco),
            "synthetic" => Ok(DatasetKind::Synthetic {
                classes: DEFAULT_SYNTHETIC_CLASSES,
            }),
            other => {
                let n = other
                    .strip_prefix("synthetic-")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| config_err!("unknown dataset '{s}'"))?;
                if n == 0 || n % NUM_FOLDS != 0 {
                    return Err(config_err!(
                        "synthetic class count must be a positive multiple of {NUM_FOLDS}, got {n}"
                    ));
                }
                Ok(DatasetKind::Synthetic { classes: n })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Test => "test",
        })
    }
}

/// Disjoint train/test class sets of one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    dataset: DatasetKind,
    fold: usize,
    train_classes: Vec<usize>,
    test_classes: Vec<usize>,
}

impl FoldSplit {
    pub fn dataset(&self) -> DatasetKind {
        self.dataset
    }

    pub fn fold(&self) -> usize {
        self.fold
    }

    pub fn train_classes(&self) -> &[usize] {
        &self.train_classes
    }

    pub fn test_classes(&self) -> &[usize] {
        &self.test_classes
    }

    pub fn classes(&self, partition: Partition) -> &[usize] {
        match partition {
            Partition::Train => &self.train_classes,
            Partition::Test => &self.test_classes,
        }
    }

    pub fn contains(&self, partition: Partition, class: usize) -> bool {
        self.classes(partition).binary_search(&class).is_ok()
    }
}

/// Fold `i` tests on the contiguous block of `n / 4` classes starting at
/// `i * n / 4` and trains on the rest.
pub fn build_fold_split(dataset: DatasetKind, fold: usize) -> Result<FoldSplit> {
    if fold >= NUM_FOLDS {
        return Err(config_err!("fold must be in 0..{NUM_FOLDS}, got {fold}"));
    }
    let n = dataset.num_classes();
    if n == 0 || !n.is_multiple_of(NUM_FOLDS) {
        return Err(config_err!("{n} classes cannot be split into {NUM_FOLDS} folds"));
    }
    let per = n / NUM_FOLDS;
    let test = fold * per..(fold + 1) * per;
    Ok(FoldSplit {
        dataset,
        fold,
        train_classes: (0..n).filter(|c| !test.contains(c)).collect(),
        test_classes: test.collect(),
    })
}
