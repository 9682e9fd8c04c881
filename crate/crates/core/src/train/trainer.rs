//! Episodic training loop.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, config_snapshot, CheckpointState, RngState};
use super::config::RunConfig;
use super::optim::Adam;
use crate::backbone::load_backbone;
use crate::episodes::{
    build_fold_split, test_pair_list, write_manifest, Dataset, Episode, EpisodeDescriptor,
    EpisodeSampler, ManifestHeader, Partition,
};
use crate::error::{config_err, Error, Result};
use crate::evaluation::{evaluate, EvalOptions, MetricsReport};
use crate::model::TbtModel;
use crate::network::TbtNet;
use crate::ttl::Mode;

const TRAIN_STREAM: u64 = 1;
const POOL_STREAM: u64 = 2;
const VAL_SEED_SALT: u64 = 0x7661_6c69_6461_7465;

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Mean total loss over the batch.
    pub loss: f64,
    /// Mean per-level losses L_1..L_4 over the batch.
    pub levels: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: Option<MetricsReport>,
    pub seconds: f64,
}

pub fn build_model(cfg: &RunConfig) -> Result<TbtModel> {
    let backbone = load_backbone(&cfg.backbone_spec())?;
    let net = TbtNet::new(cfg.network_config(), cfg.seed, cfg.dtype())?;
    TbtModel::new(backbone, net)
}

/// Load a model for inference, refusing checkpoints built for another model.
pub fn load_model(dir: &Path, requested: Option<&RunConfig>) -> Result<(RunConfig, TbtModel)> {
    let ck = checkpoint::load(dir)?;
    let mut cfg = ck.state.run_config()?;
    if let Some(req) = requested {
        checkpoint::check_compatible(&cfg, req)?;
        if req.weights.is_some() {
            cfg.weights = req.weights.clone();
        }
    }
    let model = build_model(&cfg)?;
    model.net().store().assign(&ck.params)?;
    Ok((cfg, model))
}

struct Logs {
    text: File,
    metrics: File,
}

impl Logs {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(p, e))
        };
        Ok(Self {
            text: open("train.log")?,
            metrics: open("metrics.jsonl")?,
        })
    }

    fn line(&mut self, text: &str, json: serde_json::Value) {
        log::info!("{text}");
        let _ = writeln!(self.text, "{text}");
        let _ = writeln!(self.metrics, "{json}");
    }
}

pub struct Trainer<'a> {
    cfg: RunConfig,
    model: TbtModel,
    adam: Adam,
    rng: ChaCha8Rng,
    train: EpisodeSampler<'a>,
    validation: Option<(EpisodeSampler<'a>, Vec<EpisodeDescriptor>)>,
    pool: Vec<Episode>,
    epoch: usize,
    step: u64,
    best_miou: Option<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: RunConfig, dataset: &'a dyn Dataset) -> Result<Self> {
        cfg.validate()?;
        let model = build_model(&cfg)?;
        let adam = Adam::new(model.net().store(), cfg.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Self::assemble(cfg, dataset, model, adam, rng)
    }

    /// Continue from a checkpoint directory. `cfg`, when given, must
    /// describe the same model; its run settings (epochs, output, limits)
    /// replace the saved ones.
    pub fn resume(dir: &Path, dataset: &'a dyn Dataset, cfg: Option<RunConfig>) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let saved = ck.state.run_config()?;
        let cfg = match cfg {
            Some(c) => {
                checkpoint::check_compatible(&saved, &c)?;
                c
            }
            None => saved,
        };
        cfg.validate()?;
        let model = build_model(&cfg)?;
        model.net().store().assign(&ck.params)?;
        let mut adam = Adam::new(model.net().store(), cfg.lr)?;
        adam.restore(ck.state.adam_step, &ck.optimizer)?;
        let rng = ck.state.rng.restore()?;
        let mut t = Self::assemble(cfg, dataset, model, adam, rng)?;
        t.epoch = ck.state.epoch;
        t.step = ck.state.step;
        t.best_miou = ck.state.best_miou;
        Ok(t)
    }

    fn assemble(
        cfg: RunConfig,
        dataset: &'a dyn Dataset,
        model: TbtModel,
        adam: Adam,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if dataset.kind() != cfg.dataset {
            return Err(config_err!(
                "config names dataset {} but {} was opened",
                cfg.dataset,
                dataset.kind()
            ));
        }
        let split = build_fold_split(cfg.dataset, cfg.fold)?;
        let train = EpisodeSampler::new(dataset, split.clone(), Partition::Train, 1, cfg.image_size)?;
        let mut pool = Vec::with_capacity(cfg.episode_pool);
        if cfg.episode_pool > 0 {
            let mut pool_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            pool_rng.set_stream(POOL_STREAM);
            for _ in 0..cfg.episode_pool {
                pool.push(train.sample(&mut pool_rng)?);
            }
        }
        let validation = if cfg.val_episodes > 0 {
            let sampler = EpisodeSampler::new(dataset, split, Partition::Test, 1, cfg.image_size)?;
            let list = test_pair_list(&sampler, cfg.seed ^ VAL_SEED_SALT, cfg.val_episodes)?;
            Some((sampler, list))
        } else {
            None
        };
        Ok(Self {
            cfg,
            model,
            adam,
            rng,
            train,
            validation,
            pool,
            epoch: 0,
            step: 0,
            best_miou: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TbtModel {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// The fixed training episodes when `episode_pool` is set.
    pub fn pool(&self) -> &[Episode] {
        &self.pool
    }

    pub fn train_sampler(&self) -> &EpisodeSampler<'a> {
        &self.train
    }

    pub fn steps_per_epoch(&self) -> usize {
        let episodes = match (self.cfg.episodes_per_epoch, self.pool.len()) {
            (0, 0) => self.train.record_count(),
            (0, n) => n,
            (e, _) => e,
        };
        episodes.div_ceil(self.cfg.batch_size).max(1)
    }

    fn next_batch(&mut self) -> Result<Vec<Episode>> {
        let b = self.cfg.batch_size;
        if !self.pool.is_empty() {
            let n = self.pool.len();
            let start = self.step as usize * b;
            return Ok((0..b).map(|i| self.pool[(start + i) % n].clone()).collect());
        }
        (0..b).map(|_| self.train.sample(&mut self.rng)).collect()
    }

    /// One optimiser update on a batch of episodes. Gradients are
    /// accumulated episode by episode so only one graph is alive at a time.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let batch = self.next_batch()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        let mut levels = [0.0; 4];
        for episode in &batch {
            let mut mode = Mode::Train {
                drop_rate: self.cfg.beta,
                rng: &mut self.rng,
            };
            let lb = self.model.episode_loss(episode, self.cfg.alpha, &mut mode)?;
            if !lb.value.is_finite() || lb.levels.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    detail: format!(
                        "levels L1..L4 = {:?} on query {} (class {})",
                        lb.levels, episode.query.id, episode.class
                    ),
                });
            }
            loss += lb.value * scale;
            for (acc, l) in levels.iter_mut().zip(lb.levels) {
                *acc += l * scale;
            }
            let g = self.adam.gradients(&(lb.total * scale)?)?;
            grads = Some(match grads {
                None => g,
                Some(prev) => prev
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| a + b)
                    .collect::<candle_core::Result<Vec<_>>>()?,
            });
        }
        self.adam.apply(&grads.expect("batch is never empty"))?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            levels,
        })
    }

    /// Evaluate on the fixed validation manifest.
    pub fn validate(&self) -> Result<Option<MetricsReport>> {
        let Some((sampler, list)) = &self.validation else {
            return Ok(None);
        };
        let entries: Vec<(usize, EpisodeDescriptor)> =
            list.iter().cloned().enumerate().map(|(i, d)| (i + 1, d)).collect();
        let opts = EvalOptions {
            shots: 1,
            ..EvalOptions::default()
        };
        Ok(Some(evaluate(&self.model, sampler, &entries, &opts)?.report))
    }

    pub fn checkpoint_state(&self) -> CheckpointState {
        CheckpointState {
            config: config_snapshot(&self.cfg),
            network: self.model.net().config().clone(),
            epoch: self.epoch,
            step: self.step,
            adam_step: self.adam.step_count(),
            rng: RngState::capture(&self.rng),
            best_miou: self.best_miou,
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::save(
            dir,
            &self.checkpoint_state(),
            &self.model.net().store().tensors(),
            &self.adam.state_tensors(),
        )
    }

    fn limit_reached(&self) -> bool {
        self.cfg.max_steps > 0 && self.step >= self.cfg.max_steps as u64
    }

    /// Train the remaining epochs, logging to and checkpointing in the
    /// output directory.
    pub fn run(&mut self) -> Result<Vec<EpochReport>> {
        let out = self.cfg.output_dir.clone();
        let mut logs = Logs::open(&out)?;
        std::fs::write(out.join("config.txt"), self.cfg.to_text())
            .map_err(|e| Error::io(out.join("config.txt"), e))?;
        if let Some((sampler, list)) = &self.validation {
            let header = ManifestHeader {
                dataset: self.cfg.dataset.to_string(),
                fold: self.cfg.fold,
                shots: sampler.shots(),
                seed: self.cfg.seed ^ VAL_SEED_SALT,
            };
            write_manifest(&out.join("val_manifest.tsv"), &header, list)?;
        }
        let started = Instant::now();
        let per_epoch = self.steps_per_epoch();
        let total_epochs = self.cfg.effective_epochs();
        let mut reports = Vec::new();
        while self.epoch < total_epochs && !self.limit_reached() {
            let epoch_start = Instant::now();
            let mut sum = 0.0;
            let mut count = 0usize;
            let first = self.step as usize % per_epoch;
            for _ in first..per_epoch {
                if self.limit_reached() {
                    break;
                }
                let r = self.train_step()?;
                sum += r.loss;
                count += 1;
                logs.line(
                    &format!(
                        "epoch {} step {} loss {:.6} levels {:.4?} elapsed {:.1}s",
                        self.epoch,
                        r.step,
                        r.loss,
                        r.levels,
                        started.elapsed().as_secs_f64()
                    ),
                    serde_json::json!({
                        "kind": "step", "epoch": self.epoch, "step": r.step,
                        "loss": r.loss, "levels": r.levels,
                        "elapsed_s": started.elapsed().as_secs_f64(),
                    }),
                );
            }
            let finished_epoch = (self.step as usize).is_multiple_of(per_epoch);
            if finished_epoch {
                self.epoch += 1;
            }
            let validation = if finished_epoch { self.validate()? } else { None };
            let mean_loss = if count > 0 { sum / count as f64 } else { f64::NAN };
            let seconds = epoch_start.elapsed().as_secs_f64();
            let miou = validation.as_ref().map(|v| v.mean_iou);
            logs.line(
                &format!(
                    "epoch {} done: mean loss {mean_loss:.6}, val miou {}, {seconds:.1}s",
                    self.epoch,
                    miou.map_or("n/a".to_string(), |m| format!("{m:.4}"))
                ),
                serde_json::json!({
                    "kind": "epoch", "epoch": self.epoch, "mean_loss": mean_loss,
                    "val_miou": miou, "val_fb_iou": validation.as_ref().map(|v| v.fb_iou),
                    "seconds": seconds,
                }),
            );
            let improved = miou.is_some_and(|m| self.best_miou.is_none_or(|b| m > b));
            if improved {
                self.best_miou = miou;
            }
            self.save_checkpoint(&out.join("checkpoint"))?;
            if improved {
                self.save_checkpoint(&out.join("best"))?;
            }
            reports.push(EpochReport {
                epoch: self.epoch,
                mean_loss,
                validation,
                seconds,
            });
        }
        Ok(reports)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.cfg.output_dir.clone()
    }
}
