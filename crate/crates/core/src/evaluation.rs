//! IoU bookkeeping, K-shot aggregation and manifest evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use crate::episodes::{io::write_mask_png, Episode, EpisodeDescriptor, EpisodeSampler};
use crate::error::{config_err, shape_err, Error, Result};
use crate::mask::BinaryMask;
use crate::network::binarize_logits;
use crate::ops;

/// Pooled pixel counts of one binary labelling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PixelCounts {
    pub fn union(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    /// None when neither prediction nor truth ever had a positive pixel.
    pub fn iou(&self) -> Option<f64> {
        let u = self.union();
        (u > 0).then(|| self.tp as f64 / u as f64)
    }

    fn add(&mut self, other: &PixelCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Per-class and foreground/background counts pooled over episodes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IoUAccumulator {
    classes: BTreeMap<usize, PixelCounts>,
    foreground: PixelCounts,
    background: PixelCounts,
    episodes: usize,
}

impl IoUAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, pred: &BinaryMask, truth: &BinaryMask, class: usize) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(shape_err!(
                "prediction {:?} and ground truth {:?} differ in size",
                pred.dims(),
                truth.dims()
            ));
        }
        let mut fg = PixelCounts::default();
        let mut tn = 0u64;
        for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
            match (p != 0, t != 0) {
                (true, true) => fg.tp += 1,
                (true, false) => fg.fp += 1,
                (false, true) => fg.fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let bg = PixelCounts {
            tp: tn,
            fp: fg.fn_,
            fn_: fg.fp,
        };
        self.classes.entry(class).or_default().add(&fg);
        self.foreground.add(&fg);
        self.background.add(&bg);
        self.episodes += 1;
        Ok(())
    }

    /// Count addition; associative and commutative.
    pub fn merge(&mut self, other: &IoUAccumulator) {
        for (c, counts) in &other.classes {
            self.classes.entry(*c).or_default().add(counts);
        }
        self.foreground.add(&other.foreground);
        self.background.add(&other.background);
        self.episodes += other.episodes;
    }

    pub fn class_counts(&self, class: usize) -> Option<PixelCounts> {
        self.classes.get(&class).copied()
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn report(&self) -> MetricsReport {
        let per_class: BTreeMap<usize, f64> = self
            .classes
            .iter()
            .map(|(&c, counts)| (c, counts.iou().unwrap_or(0.0)))
            .collect();
        let mean_iou = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        let foreground_iou = self.foreground.iou().unwrap_or(0.0);
        let background_iou = self.background.iou().unwrap_or(0.0);
        MetricsReport {
            per_class,
            mean_iou,
            fb_iou: (foreground_iou + background_iou) / 2.0,
            foreground_iou,
            background_iou,
            episodes: self.episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: BTreeMap<usize, f64>,
    /// Unweighted mean of `per_class`.
    pub mean_iou: f64,
    pub fb_iou: f64,
    pub foreground_iou: f64,
    pub background_iou: f64,
    pub episodes: usize,
}

impl MetricsReport {
    /// One `key=value` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "episodes={}", self.episodes);
        let _ = writeln!(out, "miou={:.6}", self.mean_iou);
        let _ = writeln!(out, "fb_iou={:.6}", self.fb_iou);
        let _ = writeln!(out, "foreground_iou={:.6}", self.foreground_iou);
        let _ = writeln!(out, "background_iou={:.6}", self.background_iou);
        for (c, iou) in &self.per_class {
            let _ = writeln!(out, "class_{c}_iou={iou:.6}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Average the softmax foreground probabilities of K logit maps [2, H, W];
/// foreground where the mean is at least 0.5.
pub fn kshot_merge(logits: &[Tensor]) -> Result<BinaryMask> {
    let first = logits
        .first()
        .ok_or_else(|| config_err!("K-shot merge needs at least one prediction"))?;
    if logits.iter().any(|l| l.dims() != first.dims()) {
        return Err(shape_err!("K-shot predictions differ in shape"));
    }
    if logits.len() == 1 {
        return binarize_logits(first);
    }
    let (_, h, w) = first.dims3()?;
    let mut sum = vec![0f64; h * w];
    for l in logits {
        let p = ops::foreground_probability(&l.to_dtype(DType::F64)?)?;
        for (s, v) in sum.iter_mut().zip(p.flatten_all()?.to_vec1::<f64>()?) {
            *s += v;
        }
    }
    let k = logits.len() as f64;
    let data = sum.iter().map(|s| u8::from(s / k >= 0.5)).collect();
    BinaryMask::from_vec(h, w, data)
}

/// Anything that turns an episode into one logit map per support.
pub trait Segmenter {
    fn support_logits(&self, episode: &Episode) -> Result<Vec<Tensor>>;
}

/// Upsample each map to the query mask size and merge.
pub fn predict_episode(segmenter: &dyn Segmenter, episode: &Episode) -> Result<BinaryMask> {
    let (h, w) = episode.query.mask.dims();
    let maps = segmenter
        .support_logits(episode)?
        .iter()
        .map(|l| ops::resize_bilinear(l, h, w))
        .collect::<Result<Vec<_>>>()?;
    kshot_merge(&maps)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Use the first `shots` supports of each entry.
    pub shots: usize,
    /// Write `<index>.png` predictions here.
    pub mask_dir: Option<PathBuf>,
    /// Return the predicted masks alongside the report.
    pub keep_predictions: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub accumulator: IoUAccumulator,
    pub predictions: Vec<(EpisodeDescriptor, BinaryMask, BinaryMask)>,
}

/// Evaluate manifest entries (with their line numbers) in order.
pub fn evaluate(
    segmenter: &dyn Segmenter,
    sampler: &EpisodeSampler<'_>,
    entries: &[(usize, EpisodeDescriptor)],
    options: &EvalOptions,
) -> Result<EvalOutcome> {
    if options.shots == 0 {
        return Err(config_err!("shots must be at least 1"));
    }
    if let Some(dir) = &options.mask_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut acc = IoUAccumulator::new();
    let mut predictions = Vec::new();
    for (index, (line, entry)) in entries.iter().enumerate() {
        let at_line = |e: Error| Error::Manifest {
            line: *line,
            reason: e.to_string(),
        };
        if entry.supports.len() < options.shots {
            return Err(Error::Manifest {
                line: *line,
                reason: format!(
                    "{} supports listed, {} needed",
                    entry.supports.len(),
                    options.shots
                ),
            });
        }
        let d = EpisodeDescriptor {
            supports: entry.supports[..options.shots].to_vec(),
            ..entry.clone()
        };
        let episode = sampler.load(&d).map_err(at_line)?;
        let pred = predict_episode(segmenter, &episode)?;
        acc.update(&pred, &episode.query.mask, d.class)?;
        if let Some(dir) = &options.mask_dir {
            write_mask_png(&dir.join(format!("{index:04}.png")), &pred)?;
        }
        if options.keep_predictions {
            predictions.push((d, pred, episode.query.mask.clone()));
        }
        if (index + 1) % 100 == 0 {
            log::info!("evaluated {}/{} episodes", index + 1, entries.len());
        }
    }
    Ok(EvalOutcome {
        report: acc.report(),
        accumulator: acc,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn mask(v: &[u8]) -> BinaryMask {
        BinaryMask::from_vec(2, 2, v.to_vec()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let mut acc = IoUAccumulator::new();
        acc.update(&mask(&[1, 1, 0, 0]), &mask(&[1, 1, 0, 0]), 0).unwrap();
        acc.update(&mask(&[1, 0, 0, 0]), &mask(&[0, 0, 0, 1]), 1).unwrap();
        acc.update(&mask(&[1, 1, 0, 0]), &mask(&[1, 0, 1, 0]), 2).unwrap();
        let r = acc.report();
        assert_eq!(r.per_class[&0], 1.0);
        assert_eq!(r.per_class[&1], 0.0);
        assert!((r.per_class[&2] - 1.0 / 3.0).abs() < 1e-15);
        assert!(acc.update(&mask(&[0; 4]), &BinaryMask::zeros(1, 4), 0).is_err());
    }

    #[test]
    fn constant_background_fb_iou() {
        let mut acc = IoUAccumulator::new();
        let truth = BinaryMask::from_fn(4, 4, |y, _| y == 0);
        acc.update(&BinaryMask::zeros(4, 4), &truth, 5).unwrap();
        let r = acc.report();
        assert_eq!(r.foreground_iou, 0.0);
        assert_eq!(r.background_iou, 12.0 / 16.0);
        assert_eq!(r.fb_iou, 12.0 / 16.0 / 2.0);
    }

    #[test]
    fn merge_is_order_independent() {
        let ms = [mask(&[1, 0, 1, 0]), mask(&[1, 1, 1, 0]), mask(&[0, 0, 1, 1])];
        let mut a = IoUAccumulator::new();
        let mut b = IoUAccumulator::new();
        for i in 0..3 {
            a.update(&ms[i], &ms[(i + 1) % 3], i % 2).unwrap();
            let mut one = IoUAccumulator::new();
            one.update(&ms[2 - i], &ms[(3 - i) % 3], (2 - i) % 2).unwrap();
            b.merge(&one);
        }
        assert_eq!(a, b);
    }

    fn logits_with_fg_prob(p: f64) -> Tensor {
        // softmax foreground probability p <=> l1 - l0 = logit(p)
        let d = (p / (1.0 - p)).ln();
        Tensor::from_vec(vec![0.0, d], (2, 1, 1), &Device::Cpu).unwrap()
    }

    #[test]
    fn kshot_examples() {
        assert!(kshot_merge(&[]).is_err());
        let a = logits_with_fg_prob(0.6);
        let b = logits_with_fg_prob(0.3);
        assert_eq!(kshot_merge(&[a.clone(), b]).unwrap().as_slice(), &[0]);
        assert_eq!(kshot_merge(std::slice::from_ref(&a)).unwrap().as_slice(), &[1]);
        assert_eq!(kshot_merge(&[a.clone(), a.clone(), a]).unwrap().as_slice(), &[1]);
        let tie = Tensor::from_vec(vec![0.5f64, 0.5], (2, 1, 1), &Device::Cpu).unwrap();
        assert_eq!(kshot_merge(&[tie.clone(), tie]).unwrap().as_slice(), &[1]);
    }

    #[test]
    fn report_text_lists_keys() {
        let mut acc = IoUAccumulator::new();
        acc.update(&mask(&[1, 1, 0, 0]), &mask(&[1, 0, 0, 0]), 3).unwrap();
        let text = acc.report().to_text();
        assert!(text.contains("miou=0.500000\n"));
        assert!(text.contains("class_3_iou=0.500000\n"));
        assert!(text.starts_with("episodes=1\n"));
    }
}
