//! Datasets, fold splits, episode sampling and test manifests.

mod coco;
pub mod io;
mod pascal;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::Tensor;
use image::RgbImage;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use coco::{decode_rle_string, rasterize_polygons, rasterize_rle, CocoDataset};
pub use pascal::PascalDataset;
pub use split::{
    build_fold_split, DatasetKind, FoldSplit, Partition, DEFAULT_SYNTHETIC_CLASSES, NUM_FOLDS,
};
pub use synthetic::SyntheticDataset;

use crate::error::{config_err, Error, Result};
use crate::mask::BinaryMask;

/// Side length episodes are resized to.
pub const EPISODE_SIZE: usize = 400;
/// Attempts before sampling gives up on finding a usable episode.
pub const MAX_RETRIES: usize = 100;

/// One annotated image and the classes present in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub classes: Vec<usize>,
}

pub trait Dataset: Send + Sync {
    fn kind(&self) -> DatasetKind;
    fn records(&self, partition: Partition) -> &[ImageRecord];
    fn load_image(&self, id: &str) -> Result<RgbImage>;
    /// Binary mask of `class` at the native image resolution.
    fn load_mask(&self, id: &str, class: usize) -> Result<BinaryMask>;
}

/// Open a dataset by kind. The synthetic dataset ignores `root`.
pub fn open_dataset(kind: DatasetKind, root: Option<&Path>, seed: u64) -> Result<Box<dyn Dataset>> {
    let need_root = || root.ok_or_else(|| config_err!("dataset {kind} needs a data root"));
    Ok(match kind {
        DatasetKind::Pascal => Box::new(PascalDataset::open(need_root()?)?),
        DatasetKind::Coco => Box::new(CocoDataset::open(need_root()?)?),
        DatasetKind::Synthetic { classes } => {
            Box::new(SyntheticDataset::new(classes, 12, 64, seed)?)
        }
    })
}

/// Which images make up an episode, without pixel data.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EpisodeDescriptor {
    pub query: String,
    pub supports: Vec<String>,
    pub class: usize,
}

/// A resized, normalised image with its class mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// [3, S, S] f32
    pub image: Tensor,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub class: usize,
    pub query: Sample,
    pub supports: Vec<Sample>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    pub fn descriptor(&self) -> EpisodeDescriptor {
        EpisodeDescriptor {
            query: self.query.id.clone(),
            supports: self.supports.iter().map(|s| s.id.clone()).collect(),
            class: self.class,
        }
    }
}

/// Draws episodes of one partition of a fold.
pub struct EpisodeSampler<'a> {
    dataset: &'a dyn Dataset,
    split: FoldSplit,
    partition: Partition,
    shots: usize,
    size: usize,
    /// class -> indices into the partition records
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(
        dataset: &'a dyn Dataset,
        split: FoldSplit,
        partition: Partition,
        shots: usize,
        size: usize,
    ) -> Result<Self> {
        if shots == 0 {
            return Err(config_err!("shots must be at least 1"));
        }
        if dataset.kind() != split.dataset() {
            return Err(config_err!(
                "split for {} used with dataset {}",
                split.dataset(),
                dataset.kind()
            ));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in dataset.records(partition).iter().enumerate() {
            for &c in &r.classes {
                if split.contains(partition, c) {
                    by_class.entry(c).or_default().push(i);
                }
            }
        }
        by_class.retain(|_, imgs| imgs.len() > shots);
        if by_class.is_empty() {
            return Err(Error::Data(format!(
                "no {partition} class of fold {} has {} images",
                split.fold(),
                shots + 1
            )));
        }
        Ok(Self {
            dataset,
            split,
            partition,
            shots,
            size,
            by_class,
        })
    }

    pub fn split(&self) -> &FoldSplit {
        &self.split
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Images in the sampled partition.
    pub fn record_count(&self) -> usize {
        self.dataset.records(self.partition).len()
    }

    /// Classes that can be sampled.
    pub fn classes(&self) -> Vec<usize> {
        self.by_class.keys().copied().collect()
    }

    /// Uniform class, then K + 1 distinct images containing it.
    pub fn sample_descriptor(&self, rng: &mut impl Rng) -> EpisodeDescriptor {
        let classes: Vec<&usize> = self.by_class.keys().collect();
        let class = **classes.choose(rng).expect("at least one class");
        let records = self.dataset.records(self.partition);
        let picks: Vec<usize> = self.by_class[&class]
            .choose_multiple(rng, self.shots + 1)
            .copied()
            .collect();
        EpisodeDescriptor {
            query: records[picks[0]].id.clone(),
            supports: picks[1..].iter().map(|&i| records[i].id.clone()).collect(),
            class,
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if self.split.contains(self.partition, class) {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "class {class} is not in the {} partition of fold {}",
                self.partition,
                self.split.fold()
            )))
        }
    }

    fn resized_mask(&self, id: &str, class: usize) -> Result<BinaryMask> {
        Ok(self
            .dataset
            .load_mask(id, class)?
            .resize_nearest(self.size, self.size))
    }

    /// True when every mask of the descriptor keeps foreground after resizing.
    pub fn is_usable(&self, d: &EpisodeDescriptor) -> Result<bool> {
        self.check_class(d.class)?;
        for id in std::iter::once(&d.query).chain(&d.supports) {
            if !self.resized_mask(id, d.class)?.has_foreground() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Load and resize the images of a descriptor.
    pub fn load(&self, d: &EpisodeDescriptor) -> Result<Episode> {
        self.check_class(d.class)?;
        if d.supports.is_empty() {
            return Err(Error::Data("episode without supports".into()));
        }
        if d.supports.contains(&d.query) {
            return Err(Error::Data(format!("query {} is also a support", d.query)));
        }
        let sample = |id: &String| -> Result<Sample> {
            let image = io::image_to_tensor(&self.dataset.load_image(id)?, self.size)?;
            Ok(Sample {
                id: id.clone(),
                image,
                mask: self.resized_mask(id, d.class)?,
            })
        };
        Ok(Episode {
            class: d.class,
            query: sample(&d.query)?,
            supports: d.supports.iter().map(sample).collect::<Result<_>>()?,
        })
    }

    /// A usable descriptor, resampling degenerate draws.
    pub fn sample_usable(&self, rng: &mut impl Rng) -> Result<EpisodeDescriptor> {
        for _ in 0..MAX_RETRIES {
            let d = self.sample_descriptor(rng);
            if self.is_usable(&d)? {
                return Ok(d);
            }
        }
        Err(Error::Data(format!(
            "no usable episode after {MAX_RETRIES} draws"
        )))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Episode> {
        let d = self.sample_usable(rng)?;
        self.load(&d)
    }
}

/// Fixed list of `n` usable test episodes, deterministic in `seed`.
pub fn test_pair_list(
    sampler: &EpisodeSampler<'_>,
    seed: u64,
    n: usize,
) -> Result<Vec<EpisodeDescriptor>> {
    if n == 0 {
        return Err(config_err!("test list length must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sampler.sample_usable(&mut rng)).collect()
}

/// Header fields stored in a manifest's comment line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestHeader {
    pub dataset: String,
    pub fold: usize,
    pub shots: usize,
    pub seed: u64,
}

pub fn format_manifest(header: &ManifestHeader, entries: &[EpisodeDescriptor]) -> String {
    let mut out = format!(
        "# dataset={} fold={} shots={} seed={}\n# query\tsupports...\tclass\n",
        header.dataset, header.fold, header.shots, header.seed
    );
    for e in entries {
        out.push_str(&e.query);
        for s in &e.supports {
            out.push('\t');
            out.push_str(s);
        }
        let _ = writeln!(out, "\t{}", e.class);
    }
    out
}

pub fn write_manifest(
    path: &Path,
    header: &ManifestHeader,
    entries: &[EpisodeDescriptor],
) -> Result<()> {
    std::fs::write(path, format_manifest(header, entries)).map_err(|e| Error::io(path, e))
}

/// Entries paired with their 1-based line numbers.
pub fn parse_manifest(text: &str) -> Result<Vec<(usize, EpisodeDescriptor)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Manifest {
                line: line_no,
                reason: "expected query, at least one support and a class".into(),
            });
        }
        let class = fields[fields.len() - 1]
            .trim()
            .parse()
            .map_err(|_| Error::Manifest {
                line: line_no,
                reason: format!("invalid class id '{}'", fields[fields.len() - 1]),
            })?;
        out.push((
            line_no,
            EpisodeDescriptor {
                query: fields[0].to_string(),
                supports: fields[1..fields.len() - 1]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                class,
            },
        ));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<(usize, EpisodeDescriptor)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}
