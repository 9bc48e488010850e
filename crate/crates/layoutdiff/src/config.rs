//! Experiment configuration. One JSON file drives datagen, training, sampling
//! and evaluation; missing keys take the defaults below.

use std::path::Path;

use layoutdiff_core::generator::RoomType;
use layoutdiff_core::iou::LossConfig;
use layoutdiff_core::{Caps, DiffusionSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub slg: ConditionSwitches,
    pub clg: ConditionSwitches,
    pub single: ConditionSwitches,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            slg: ConditionSwitches::all(),
            clg: ConditionSwitches {
                graph: false,
                mask: true,
                text: true,
            },
            single: ConditionSwitches::all(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub count: usize,
    pub room_types: Vec<String>,
    /// `[N_L, N_S]`.
    pub caps: [usize; 2],
    pub split_ratio: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 2200,
            room_types: RoomType::ALL.iter().map(|r| r.word().to_string()).collect(),
            caps: [12, 32],
            split_ratio: 2000.0 / 2200.0,
        }
    }
}

impl CorpusConfig {
    pub fn caps(&self) -> Caps {
        Caps::new(self.caps[0], self.caps[1])
    }

    pub fn room_types(&self) -> Result<Vec<RoomType>> {
        parse_room_types(&self.room_types)
    }
}

pub fn parse_room_types<S: AsRef<str>>(names: &[S]) -> Result<Vec<RoomType>> {
    let rooms: Vec<RoomType> = names
        .iter()
        .map(|n| {
            RoomType::parse(n.as_ref())
                .ok_or_else(|| Error::Config(format!("unknown room type {:?}", n.as_ref())))
        })
        .collect::<Result<_>>()?;
    if rooms.is_empty() {
        return Err(Error::Config("no room types".into()));
    }
    Ok(rooms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Edge-transformer depth of the graph encoder.
    pub lsg_blocks: usize,
    pub text_blocks: usize,
    pub text_max_len: usize,
    /// Rows of the instance-index tables.
    pub instance_slots: usize,
    /// Frequencies per coordinate of the spatial encoding.
    pub pos_frequencies: usize,
    pub gamma_init: f64,
    pub gamma_learnable: bool,
    /// Channels of the four stride-2 stages of the room encoder.
    pub room_channels: [usize; 4],
    pub mask_resolution: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 256,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            lsg_blocks: 2,
            text_blocks: 2,
            text_max_len: 32,
            instance_slots: 8,
            pos_frequencies: 6,
            gamma_init: 0.01,
            gamma_learnable: true,
            room_channels: [8, 16, 32, 32],
            mask_resolution: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        Ok(DiffusionSchedule::linear(
            self.steps,
            self.beta_start,
            self.beta_end,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate halves every this many epochs (passes over the train split).
    pub lr_halve_epochs: u64,
    pub grad_clip: f64,
    pub lambda_iou: f64,
    pub iou_warmup_step: u64,
    pub iou_sharpness: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 1e-4,
            lr_halve_epochs: 10_000,
            grad_clip: 10.0,
            lambda_iou: 0.1,
            iou_warmup_step: 1000,
            iou_sharpness: 50.0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_iou: self.lambda_iou,
            iou_warmup_step: self.iou_warmup_step,
            sharpness: self.iou_sharpness,
        }
    }
}

/// Which conditions a stage sees. Disabled conditions are replaced by learned
/// null tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionSwitches {
    pub graph: bool,
    pub mask: bool,
    pub text: bool,
}

impl ConditionSwitches {
    pub fn all() -> Self {
        Self {
            graph: true,
            mask: true,
            text: true,
        }
    }

    pub fn none() -> Self {
        Self {
            graph: false,
            mask: false,
            text: false,
        }
    }
}

impl Default for ConditionSwitches {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Visit every `stride`-th timestep; 1 is the full chain.
    pub stride: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub resolution: usize,
    pub oriented: bool,
    pub planes: Vec<String>,
    /// Validation scenes used as conditions and reference set.
    pub scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            oriented: true,
            planes: vec!["XZ".into(), "XY".into(), "YZ".into()],
            scenes: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_h == 0 || m.heads == 0 || m.d_h % m.heads != 0 {
            return Err(Error::Config(
                "d_h must be a positive multiple of heads".into(),
            ));
        }
        if m.layers == 0 || m.ffn_mult == 0 || m.text_max_len == 0 || m.instance_slots == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if m.mask_resolution < 16 {
            return Err(Error::Config("mask_resolution must be at least 16".into()));
        }
        if self.train.batch == 0 || self.train.lr <= 0.0 || self.train.grad_clip <= 0.0 {
            return Err(Error::Config(
                "batch, lr and grad_clip must be positive".into(),
            ));
        }
        if self.train.lambda_iou < 0.0 {
            return Err(Error::Config("lambda_iou must be non-negative".into()));
        }
        if self.sample.stride == 0 {
            return Err(Error::Config("sample.stride must be positive".into()));
        }
        let caps = self.corpus.caps();
        if caps.primary == 0 || caps.secondary == 0 {
            return Err(Error::Config(
                "the two-stage pipeline needs N_L and N_S > 0".into(),
            ));
        }
        self.corpus.room_types()?;
        self.diffusion.schedule()?;
        Ok(())
    }

    /// SHA-256 of the canonical serialization, first 16 hex digits.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Small model and short runs for smoke tests and acceptance checks.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.model.d_h = 64;
        c.model.layers = 2;
        c.model.heads = 4;
        c.model.ffn_mult = 2;
        c.model.text_blocks = 1;
        c.model.lsg_blocks = 1;
        c.model.mask_resolution = 32;
        c.train.steps = 2000;
        c.train.batch = 32;
        c.train.lr = 1e-3;
        c.train.lr_halve_epochs = 40;
        c.train.iou_warmup_step = 200;
        c.sample.stride = 20;
        c.corpus.count = 400;
        c.corpus.split_ratio = 0.5;
        c.eval.scenes = 100;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
        assert!(c.validate().is_ok());
        assert!(ExperimentConfig::smoke().validate().is_ok());
    }

    #[test]
    fn partial_files_take_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 9, "train": {"steps": 3}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.steps, 3);
        assert_eq!(c.train.batch, 64);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
    }
}
