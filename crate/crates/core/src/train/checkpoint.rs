//! Checkpoint directories: `params.safetensors` (parameters and Adam
//! moments) plus `state.json` (config snapshot, counters, RNG position).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::network::NetworkConfig;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const STATE_FILE: &str = "state.json";
const PARAM_PREFIX: &str = "param/";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || config_err!("corrupt rng state in checkpoint");
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub config: BTreeMap<String, String>,
    pub network: NetworkConfig,
    pub epoch: usize,
    pub step: u64,
    pub adam_step: u64,
    pub rng: RngState,
    pub best_miou: Option<f64>,
}

impl CheckpointState {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

pub fn config_snapshot(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

pub fn save(
    dir: &Path,
    state: &CheckpointState,
    params: &HashMap<String, Tensor>,
    optimizer: &HashMap<String, Tensor>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut all: HashMap<String, Tensor> = params
        .iter()
        .map(|(k, v)| (format!("{PARAM_PREFIX}{k}"), v.clone()))
        .collect();
    all.extend(optimizer.iter().map(|(k, v)| (k.clone(), v.clone())));
    let params_path = dir.join(PARAMS_FILE);
    candle_core::safetensors::save(&all, &params_path).map_err(|e| Error::load(&params_path, e))?;
    let state_path = dir.join(STATE_FILE);
    let json = serde_json::to_string_pretty(state).map_err(|e| Error::load(&state_path, e))?;
    std::fs::write(&state_path, json).map_err(|e| Error::io(&state_path, e))
}

pub struct LoadedCheckpoint {
    pub state: CheckpointState,
    pub params: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
}

pub fn load(dir: &Path) -> Result<LoadedCheckpoint> {
    let state_path = dir.join(STATE_FILE);
    if !state_path.is_file() {
        return Err(Error::load(dir, "no checkpoint found (state.json missing)"));
    }
    let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let state: CheckpointState =
        serde_json::from_str(&text).map_err(|e| Error::load(&state_path, e))?;
    let params_path = dir.join(PARAMS_FILE);
    let all = candle_core::safetensors::load(&params_path, &Device::Cpu)
        .map_err(|e| Error::load(&params_path, e))?;
    let mut params = HashMap::new();
    let mut optimizer = HashMap::new();
    for (k, v) in all {
        match k.strip_prefix(PARAM_PREFIX) {
            Some(name) => {
                params.insert(name.to_string(), v);
            }
            None => {
                optimizer.insert(k, v);
            }
        }
    }
    Ok(LoadedCheckpoint {
        state,
        params,
        optimizer,
    })
}

/// Refuse to use a checkpoint with a config describing a different model.
pub fn check_compatible(checkpoint: &RunConfig, requested: &RunConfig) -> Result<()> {
    let mut problems = Vec::new();
    if checkpoint.backbone != requested.backbone {
        problems.push(format!(
            "backbone {} (checkpoint) vs {} (requested)",
            checkpoint.backbone, requested.backbone
        ));
    }
    if checkpoint.dim != requested.dim {
        problems.push(format!(
            "dim {} (checkpoint) vs {} (requested)",
            checkpoint.dim, requested.dim
        ));
    }
    if checkpoint.bi_transformer != requested.bi_transformer {
        problems.push(format!(
            "bi_transformer {} (checkpoint) vs {} (requested)",
            checkpoint.bi_transformer, requested.bi_transformer
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(config_err!(
            "checkpoint does not match the requested model: {}",
            problems.join("; ")
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(3);
        let _: u64 = rng.random();
        let saved = RngState::capture(&rng);
        let mut restored = saved.restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
    }

    #[test]
    fn mismatch_is_explained() {
        let a = RunConfig::default();
        let b = RunConfig {
            dim: 32,
            ..RunConfig::default()
        };
        let err = check_compatible(&a, &b).unwrap_err().to_string();
        assert!(err.contains("dim 20"), "{err}");
        check_compatible(&a, &a.clone()).unwrap();
    }

    #[test]
    fn missing_dir_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("nope")), Err(Error::Load { .. })));
    }
}
