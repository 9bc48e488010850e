#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use layoutdiff::config::{ConditionSwitches, ExperimentConfig, ModelConfig};
use layoutdiff::model::{ConditionBundle, Stage, StageModel};
use layoutdiff::pipeline::generate_corpus;
use layoutdiff::train::{condition_inputs, prepare_scenes, PreparedScene};
use layoutdiff_core::generator::RoomType;
use layoutdiff_core::{Caps, CategoryTaxonomy, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model_config() -> ModelConfig {
    let mut m = ExperimentConfig::smoke().model;
    m.d_h = 32;
    m.layers = 2;
    m.heads = 4;
    m
}

pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::smoke();
    c.model = tiny_model_config();
    c.train.batch = 4;
    c.train.steps = 6;
    c.train.iou_warmup_step = 2;
    c
}

pub fn scenes(n: usize, seed: u64) -> Vec<Scene> {
    generate_corpus(
        n,
        seed,
        &RoomType::ALL,
        Caps::new(12, 32),
        &CategoryTaxonomy::desk(),
    )
    .unwrap()
}

pub fn prepared(n: usize, seed: u64) -> Vec<PreparedScene> {
    let tax = CategoryTaxonomy::desk();
    prepare_scenes(&scenes(n, seed), Caps::new(12, 32), &tax, 32).unwrap()
}

pub fn model(stage: Stage, switches: ConditionSwitches, dtype: DType, seed: u64) -> StageModel {
    StageModel::new(
        stage,
        Caps::new(12, 32),
        switches,
        &tiny_model_config(),
        &CategoryTaxonomy::desk(),
        seed,
        dtype,
        &Device::Cpu,
    )
    .unwrap()
}

pub fn bundle(model: &StageModel, data: &[PreparedScene]) -> ConditionBundle {
    let refs: Vec<&PreparedScene> = data.iter().collect();
    let inputs = condition_inputs(model, &refs).unwrap();
    model.encode_conditions(data.len(), &inputs).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), dtype: DType) -> Tensor {
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a)
        .iter()
        .zip(values(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
