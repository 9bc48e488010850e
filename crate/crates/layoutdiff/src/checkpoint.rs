//! Checkpoint files: magic, schema version, JSON header, safetensors payload.
//!
//! ```text
//! b"LDIFCKPT" | u32 LE schema | u64 LE header length | header JSON | safetensors
//! ```
//!
//! Tensor names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use layoutdiff_core::CategoryTaxonomy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::RELATION_NAMES;
use crate::config::{ConditionSwitches, ExperimentConfig};
use crate::error::{io_err, Error, Result};
use crate::format::write_file;
use crate::model::{Stage, StageModel};
use crate::train::{Adam, Cursor, MetricRow, Trainer};

pub const MAGIC: &[u8; 8] = b"LDIFCKPT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: u32,
    pub stage: Stage,
    pub taxonomy_hash: String,
    pub classes: Vec<String>,
    pub relations: Vec<String>,
    pub switches: ConditionSwitches,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub step: u64,
    pub cursor: Cursor,
    /// ChaCha seed (hex) and word position of the step stream.
    pub rng_seed: String,
    pub rng_word_pos: String,
    pub adam_steps: u64,
    pub last_metrics: Option<MetricRow>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint(format!("bad rng seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Serializes a trainer (model, optimizer, data cursor, RNG) to bytes.
pub fn to_bytes(trainer: &Trainer, taxonomy: &CategoryTaxonomy) -> Result<Vec<u8>> {
    let model = &trainer.model;
    let header = Header {
        schema: SCHEMA_VERSION,
        stage: model.stage,
        taxonomy_hash: format!("{:016x}", taxonomy.hash()),
        classes: taxonomy.classes().to_vec(),
        relations: RELATION_NAMES.iter().map(|s| s.to_string()).collect(),
        switches: model.switches,
        config: trainer.config.clone(),
        config_hash: trainer.config.hash(),
        step: trainer.step,
        cursor: trainer.cursor,
        rng_seed: hex(&trainer.rng.get_seed()),
        rng_word_pos: trainer.rng.get_word_pos().to_string(),
        adam_steps: trainer.adam.steps,
        last_metrics: trainer.metrics.last().cloned(),
    };
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, p) in model.store.iter() {
        tensors.push((format!("param/{name}"), p.var.as_tensor().clone()));
    }
    for (name, t) in &trainer.adam.m {
        tensors.push((format!("adam.m/{name}"), t.clone()));
    }
    for (name, t) in &trainer.adam.v {
        tensors.push((format!("adam.v/{name}"), t.clone()));
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let payload =
        safetensors::tensor::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), None)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save(path: &Path, trainer: &Trainer, taxonomy: &CategoryTaxonomy) -> Result<()> {
    write_file(path, &to_bytes(trainer, taxonomy)?)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(
            "not a layout diffusion checkpoint".into(),
        ));
    }
    let schema = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if schema != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema {schema}, expected {SCHEMA_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((header, &bytes[end..]))
}

/// Restores a trainer. Fails if the taxonomy differs from the one the
/// checkpoint was trained with.
pub fn from_bytes(bytes: &[u8], taxonomy: &CategoryTaxonomy) -> Result<Trainer> {
    let (header, payload) = read_header(bytes)?;
    let want = format!("{:016x}", taxonomy.hash());
    if header.taxonomy_hash != want {
        return Err(Error::Checkpoint(format!(
            "taxonomy hash {} does not match {want}",
            header.taxonomy_hash
        )));
    }
    let device = Device::Cpu;
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load_buffer(payload, &device)?;
    let cfg = &header.config;
    let model = StageModel::new(
        header.stage,
        cfg.corpus.caps(),
        header.switches,
        &cfg.model,
        taxonomy,
        0,
        DType::F32,
        &device,
    )?;
    let mut seen = 0;
    for (name, _) in model.store.iter() {
        let t = tensors
            .get(&format!("param/{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        model.store.assign(name, t)?;
        seen += 1;
    }
    let params_in_file = tensors.keys().filter(|k| k.starts_with("param/")).count();
    if params_in_file != seen {
        return Err(Error::Checkpoint(format!(
            "{params_in_file} parameters in file, model has {seen}"
        )));
    }
    let mut trainer = Trainer::with_model(model, cfg);
    let mut adam = Adam {
        steps: header.adam_steps,
        ..Adam::default()
    };
    for (key, t) in &tensors {
        if let Some(name) = key.strip_prefix("adam.m/") {
            adam.m.insert(name.to_string(), t.clone());
        } else if let Some(name) = key.strip_prefix("adam.v/") {
            adam.v.insert(name.to_string(), t.clone());
        }
    }
    trainer.adam = adam;
    let mut rng = ChaCha8Rng::from_seed(unhex(&header.rng_seed)?);
    let pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("bad rng position".into()))?;
    rng.set_word_pos(pos);
    trainer.restore_stream(header.cursor, header.step, rng);
    if let Some(m) = header.last_metrics {
        trainer.metrics.push(m);
    }
    Ok(trainer)
}

pub fn load(path: &Path, taxonomy: &CategoryTaxonomy) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, taxonomy)
}
