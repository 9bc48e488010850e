//! Batches, the composite loss, Adam with global-norm clipping, and the
//! resumable training loop shared by all three stages.

use std::collections::BTreeMap;
use std::io::Write;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use layoutdiff_core::diffusion::halving_lr;
use layoutdiff_core::iou::{training_loss, LossComponents, LossConfig, LossInputs};
use layoutdiff_core::{
    normalize_scene, Caps, CategoryTaxonomy, DiffusionSchedule, RoomMask, Scene, SceneGraph, Tier,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditions::{mask_batch, GraphBatch, TextBatch};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{ConditionInputs, Stage, StageModel};
use crate::substream;

/// A scene in the normalized frame with both tiers slot-encoded.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub primary: Vec<f64>,
    pub secondary: Vec<f64>,
    pub primary_occupancy: Vec<f64>,
    pub secondary_occupancy: Vec<f64>,
    pub graph: SceneGraph,
    pub mask: RoomMask,
    pub text: String,
    /// The world-frame scene this was built from.
    pub scene: Scene,
}

pub fn prepare_scene(
    scene: &Scene,
    caps: Caps,
    taxonomy: &CategoryTaxonomy,
    mask_resolution: usize,
) -> Result<PreparedScene> {
    let normalized = normalize_scene(scene, scene.frame)?;
    let (p, s) = normalized.encode(caps, taxonomy)?;
    debug_assert_eq!(p.tier, Tier::Primary);
    let mask =
        if scene.room_mask.height == mask_resolution && scene.room_mask.width == mask_resolution {
            scene.room_mask.clone()
        } else {
            scene.room_mask.resized(mask_resolution)
        };
    Ok(PreparedScene {
        primary_occupancy: p.occupancy_mask(),
        secondary_occupancy: s.occupancy_mask(),
        primary: p.into_values(),
        secondary: s.into_values(),
        graph: normalized.graph.clone(),
        mask,
        text: scene.text.clone(),
        scene: scene.clone(),
    })
}

pub fn prepare_scenes(
    scenes: &[Scene],
    caps: Caps,
    taxonomy: &CategoryTaxonomy,
    mask_resolution: usize,
) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| prepare_scene(s, caps, taxonomy, mask_resolution))
        .collect()
}

/// Clean targets, anchors and conditions for one batch.
#[derive(Debug, Clone)]
pub struct StageBatch {
    pub size: usize,
    /// `[B * N * D]` clean values of the noisy slots.
    pub x0: Vec<f64>,
    /// `[B * N]`.
    pub occupancy: Vec<f64>,
    /// `[B * N_L * D]` clean primary anchors (CLG only).
    pub anchors: Option<Vec<f64>>,
    /// Targets standing in the anchor positions of the loss; they are masked
    /// out and exist so tests can perturb them.
    pub anchor_targets: Option<Vec<f64>>,
    pub conditions: ConditionInputs,
}

/// Condition tensors for a set of prepared scenes.
pub fn condition_inputs(model: &StageModel, scenes: &[&PreparedScene]) -> Result<ConditionInputs> {
    let dtype = model.dtype();
    let dev = model.device();
    let graphs: Vec<&SceneGraph> = scenes.iter().map(|s| &s.graph).collect();
    let masks: Vec<&RoomMask> = scenes.iter().map(|s| &s.mask).collect();
    let prompts: Vec<&str> = scenes.iter().map(|s| s.text.as_str()).collect();
    Ok(ConditionInputs {
        graph: if model.switches.graph {
            Some(GraphBatch::new(
                &graphs,
                model.config.instance_slots,
                0,
                dtype,
                dev,
            )?)
        } else {
            None
        },
        mask: if model.switches.mask {
            Some(mask_batch(
                &masks,
                model.config.mask_resolution,
                dtype,
                dev,
            )?)
        } else {
            None
        },
        text: if model.switches.text {
            Some(TextBatch::new(
                &prompts,
                &model.vocab,
                model.config.text_max_len,
                dtype,
                dev,
            )?)
        } else {
            None
        },
    })
}

pub fn assemble_batch(model: &StageModel, scenes: &[&PreparedScene]) -> Result<StageBatch> {
    let mut x0 = Vec::new();
    let mut occupancy = Vec::new();
    let mut anchors = Vec::new();
    for s in scenes {
        match model.stage {
            Stage::Slg => {
                x0.extend_from_slice(&s.primary);
                occupancy.extend_from_slice(&s.primary_occupancy);
            }
            Stage::Clg => {
                x0.extend_from_slice(&s.secondary);
                occupancy.extend_from_slice(&s.secondary_occupancy);
                anchors.extend_from_slice(&s.primary);
            }
            Stage::Single => {
                x0.extend_from_slice(&s.primary);
                x0.extend_from_slice(&s.secondary);
                occupancy.extend_from_slice(&s.primary_occupancy);
                occupancy.extend_from_slice(&s.secondary_occupancy);
            }
        }
    }
    let n_anchor = anchors.len();
    let (anchors, anchor_targets) = if model.stage == Stage::Clg {
        (Some(anchors), Some(vec![0.0; n_anchor]))
    } else {
        (None, None)
    };
    Ok(StageBatch {
        size: scenes.len(),
        x0,
        occupancy,
        anchors,
        anchor_targets,
        conditions: condition_inputs(model, scenes)?,
    })
}

/// Loss of one batch at fixed timesteps and noise, plus a surrogate whose
/// parameter gradients equal those of the loss.
pub struct LossOutput {
    pub components: LossComponents,
    pub surrogate: Tensor,
    /// Largest loss-mask value over anchor positions; zero by construction.
    pub anchor_mask_max: f64,
    pub v_hat: Vec<f64>,
}

pub fn batch_loss(
    model: &StageModel,
    schedule: &DiffusionSchedule,
    batch: &StageBatch,
    ts: &[usize],
    eps: &[f64],
    lambda: f64,
    sharpness: f64,
) -> Result<LossOutput> {
    let b = batch.size;
    let dim = model.dim();
    let (n_anchor, n) = model.stage.slots(model.caps);
    if ts.len() != b || batch.x0.len() != b * n * dim || eps.len() != batch.x0.len() {
        return Err(Error::Shape(format!(
            "batch of {b} with {} values and {} noise values for {n} slots",
            batch.x0.len(),
            eps.len()
        )));
    }
    let per = n * dim;
    let mut x_t = Vec::with_capacity(b * per);
    let mut v_true = Vec::with_capacity(b * per);
    for i in 0..b {
        let x0 = &batch.x0[i * per..(i + 1) * per];
        let e = &eps[i * per..(i + 1) * per];
        x_t.extend(schedule.forward_noise(x0, ts[i], e)?);
        v_true.extend(schedule.v_target(x0, e, ts[i])?);
    }
    let dev = model.device();
    let dtype = model.dtype();
    let to_tensor = |v: &[f64], slots: usize| -> Result<Tensor> {
        Ok(Tensor::from_slice(v, (b, slots, dim), dev)?.to_dtype(dtype)?)
    };
    let xt_tensor = to_tensor(&x_t, n)?;
    let anchors = match &batch.anchors {
        Some(a) => Some(to_tensor(a, n_anchor)?),
        None => None,
    };
    let conditions = model.encode_conditions(b, &batch.conditions)?;
    let v_hat = model.denoise(&xt_tensor, ts, &conditions, anchors.as_ref())?;
    let v_vals: Vec<f64> = v_hat.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;

    // Per-sample loss over the full sequence; anchors carry no prediction and a
    // zero loss mask.
    let full = (n_anchor + n) * dim;
    let mut grad = Vec::with_capacity(b * per);
    let mut sum = LossComponents {
        mse: 0.0,
        iou: 0.0,
        total: 0.0,
    };
    let mut anchor_mask_max: f64 = 0.0;
    for i in 0..b {
        let mut vh = vec![0.0; full];
        let mut vt = vec![0.0; full];
        let mut xt = vec![0.0; full];
        let mut mask = vec![0.0f64; n_anchor + n];
        let mut occ = vec![0.0; n_anchor + n];
        let a_len = n_anchor * dim;
        if let (Some(a), Some(at)) = (&batch.anchors, &batch.anchor_targets) {
            xt[..a_len].copy_from_slice(&a[i * a_len..(i + 1) * a_len]);
            vt[..a_len].copy_from_slice(&at[i * a_len..(i + 1) * a_len]);
        }
        vh[a_len..].copy_from_slice(&v_vals[i * per..(i + 1) * per]);
        vt[a_len..].copy_from_slice(&v_true[i * per..(i + 1) * per]);
        xt[a_len..].copy_from_slice(&x_t[i * per..(i + 1) * per]);
        mask[n_anchor..].iter_mut().for_each(|m| *m = 1.0);
        occ[n_anchor..].copy_from_slice(&batch.occupancy[i * n..(i + 1) * n]);
        anchor_mask_max = mask[..n_anchor]
            .iter()
            .fold(anchor_mask_max, |m, &x| m.max(x.abs()));
        let inputs = LossInputs {
            v_hat: &vh,
            v_true: &vt,
            x_t: &xt,
            coefficients: schedule.coefficients(ts[i]),
            num_classes: model.num_classes,
            loss_mask: &mask,
            occupancy: &occ,
        };
        let (c, g) = training_loss(&inputs, lambda, sharpness);
        sum.mse += c.mse / b as f64;
        sum.iou += c.iou / b as f64;
        sum.total += c.total / b as f64;
        grad.extend(g[a_len..].iter().map(|x| x / b as f64));
    }
    let g = Tensor::from_vec(grad, (b, n, dim), dev)?.to_dtype(dtype)?;
    let surrogate = (v_hat * g)?.sum_all()?;
    Ok(LossOutput {
        components: sum,
        surrogate,
        anchor_mask_max,
        v_hat: v_vals,
    })
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter() {
        sq += g
            .to_dtype(DType::F64)?
            .sqr()?
            .sum_all()?
            .to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            *g = (&*g * factor)?;
        }
    }
    Ok(norm)
}

/// Adam with bias correction; moments are keyed by parameter name so they
/// can be checkpointed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update of every trainable parameter that has a gradient. Returns the
    /// pre-clip gradient norm.
    pub fn step(
        &mut self,
        model: &StageModel,
        grads: &GradStore,
        lr: f64,
        clip: f64,
    ) -> Result<f64> {
        let mut names = Vec::new();
        let mut gs = Vec::new();
        for (name, var) in model.store.trainable() {
            if let Some(g) = grads.get(var.as_tensor()) {
                names.push(name.clone());
                // leaf gradients can still carry an op graph through the weights
                gs.push(g.detach());
            }
        }
        let norm = clip_global_norm(&mut gs, clip)?;
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, g) in names.iter().zip(gs) {
            let var = &model.store.get(name).expect("trainable parameter").var;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub mse: f64,
    pub iou: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl MetricRow {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Position in the data stream; together with the step RNG it makes a resumed
/// run continue exactly where it stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub offset: usize,
}

pub struct Trainer {
    pub model: StageModel,
    pub config: ExperimentConfig,
    pub schedule: DiffusionSchedule,
    pub adam: Adam,
    pub step: u64,
    pub cursor: Cursor,
    pub rng: ChaCha8Rng,
    pub metrics: Vec<MetricRow>,
    /// Largest anchor loss-mask value seen over all steps.
    pub anchor_mask_max: f64,
    data_seed: u64,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(
        stage: Stage,
        config: &ExperimentConfig,
        taxonomy: &CategoryTaxonomy,
    ) -> Result<Self> {
        config.validate()?;
        let switches = match stage {
            Stage::Slg => config.slg,
            Stage::Clg => config.clg,
            Stage::Single => config.single,
        };
        let model = StageModel::new(
            stage,
            config.corpus.caps(),
            switches,
            &config.model,
            taxonomy,
            substream(config.seed, &format!("{}.init", stage.name())),
            DType::F32,
            &candle_core::Device::Cpu,
        )?;
        Ok(Self::with_model(model, config))
    }

    pub fn with_model(model: StageModel, config: &ExperimentConfig) -> Self {
        let stage = model.stage.name();
        Self {
            model,
            config: config.clone(),
            schedule: config.diffusion.schedule().expect("validated schedule"),
            adam: Adam::default(),
            step: 0,
            cursor: Cursor {
                epoch: 0,
                offset: 0,
            },
            rng: ChaCha8Rng::seed_from_u64(substream(config.seed, &format!("{stage}.steps"))),
            metrics: Vec::new(),
            anchor_mask_max: 0.0,
            data_seed: substream(config.seed, &format!("{stage}.data")),
            order: Vec::new(),
        }
    }

    fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(
            self.data_seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ));
        idx
    }

    fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let b = self.config.train.batch;
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.order.len() != n {
                self.order = self.epoch_order(self.cursor.epoch, n);
            }
            if self.cursor.offset >= n {
                self.cursor.epoch += 1;
                self.cursor.offset = 0;
                self.order = self.epoch_order(self.cursor.epoch, n);
            }
            out.push(self.order[self.cursor.offset]);
            self.cursor.offset += 1;
        }
        out
    }

    pub fn lr(&self) -> f64 {
        halving_lr(
            self.config.train.lr,
            self.cursor.epoch,
            self.config.train.lr_halve_epochs,
        )
    }

    pub fn loss_config(&self) -> LossConfig {
        self.config.train.loss()
    }

    /// Draws timesteps and noise for a batch from the step stream.
    pub fn draw_noise(&mut self, batch: usize) -> (Vec<usize>, Vec<f64>) {
        let (_, n) = self.model.stage.slots(self.model.caps);
        let steps = self.schedule.steps();
        let ts: Vec<usize> = (0..batch)
            .map(|_| self.rng.random_range(1..=steps))
            .collect();
        let eps: Vec<f64> = (0..batch * n * self.model.dim())
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        (ts, eps)
    }

    pub fn train_step(&mut self, data: &[PreparedScene]) -> Result<MetricRow> {
        if data.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let idx = self.next_indices(data.len());
        let scenes: Vec<&PreparedScene> = idx.iter().map(|&i| &data[i]).collect();
        let batch = assemble_batch(&self.model, &scenes)?;
        let (ts, eps) = self.draw_noise(batch.size);
        let lc = self.loss_config();
        let lambda = lc.lambda_at(self.step);
        let out = batch_loss(
            &self.model,
            &self.schedule,
            &batch,
            &ts,
            &eps,
            lambda,
            lc.sharpness,
        )?;
        let c = out.components;
        if !c.total.is_finite() {
            log::error!("non-finite loss at step {}: timesteps {:?}", self.step, ts);
            return Err(Error::NonFinite {
                step: self.step,
                mse: c.mse,
                iou: c.iou,
            });
        }
        self.anchor_mask_max = self.anchor_mask_max.max(out.anchor_mask_max);
        let grads = out.surrogate.backward()?;
        let lr = self.lr();
        let grad_norm = self
            .adam
            .step(&self.model, &grads, lr, self.config.train.grad_clip)?;
        self.step += 1;
        let row = MetricRow {
            step: self.step,
            mse: c.mse,
            iou: c.iou,
            total: c.total,
            lr,
            grad_norm,
        };
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Runs until `self.step == until`, writing every `log_every`-th row.
    pub fn run(
        &mut self,
        data: &[PreparedScene],
        until: u64,
        mut log: Option<&mut dyn Write>,
    ) -> Result<()> {
        let every = self.config.train.log_every.max(1);
        while self.step < until {
            let row = self.train_step(data)?;
            if row.step % every == 0 || row.step == until {
                log::info!(
                    "{} step {} mse {:.5} iou {:.5} total {:.5}",
                    self.model.stage.name(),
                    row.step,
                    row.mse,
                    row.iou,
                    row.total
                );
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", row.to_line()).map_err(|e| Error::Io {
                        path: "metrics".into(),
                        source: e,
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Mean total loss over the last `window` steps.
    pub fn smoothed_loss(&self, window: usize) -> f64 {
        let tail = &self.metrics[self.metrics.len().saturating_sub(window)..];
        tail.iter().map(|m| m.total).sum::<f64>() / tail.len().max(1) as f64
    }

    pub(crate) fn restore_stream(&mut self, cursor: Cursor, step: u64, rng: ChaCha8Rng) {
        self.cursor = cursor;
        self.step = step;
        self.rng = rng;
        self.order.clear();
    }
}

/// Mean loss of a model on fixed scenes, timesteps and noise (no update).
pub fn evaluate_loss(
    model: &StageModel,
    schedule: &DiffusionSchedule,
    data: &[PreparedScene],
    lambda: f64,
    sharpness: f64,
    seed: u64,
    batch: usize,
) -> Result<LossComponents> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, n) = model.stage.slots(model.caps);
    let mut total = LossComponents {
        mse: 0.0,
        iou: 0.0,
        total: 0.0,
    };
    for chunk in data.chunks(batch.max(1)) {
        let scenes: Vec<&PreparedScene> = chunk.iter().collect();
        let b = assemble_batch(model, &scenes)?;
        let ts: Vec<usize> = (0..b.size)
            .map(|_| rng.random_range(1..=schedule.steps()))
            .collect();
        let eps: Vec<f64> = (0..b.size * n * model.dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let out = batch_loss(model, schedule, &b, &ts, &eps, lambda, sharpness)?;
        let w = chunk.len() as f64 / data.len() as f64;
        total.mse += out.components.mse * w;
        total.iou += out.components.iou * w;
        total.total += out.components.total * w;
    }
    Ok(total)
}
