//! End-to-end procedures: corpus generation, per-stage training and the
//! four-configuration ablation.

use std::io::Write;

use layoutdiff_core::generator::{generate_indexed, RoomType};
use layoutdiff_core::raster::{Plane, RasterOptions};
use layoutdiff_core::{Caps, CategoryTaxonomy, Scene};

use crate::config::{ConditionSwitches, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_config, AblationReport};
use crate::model::Stage;
use crate::sample::{assemble_scene, sample_single, sample_two_stage};
use crate::train::{PreparedScene, Trainer};

/// `count` generated scenes, world frame. Scene `i` depends only on `(seed, i)`.
pub fn generate_corpus(
    count: usize,
    seed: u64,
    room_types: &[RoomType],
    caps: Caps,
    taxonomy: &CategoryTaxonomy,
) -> Result<Vec<Scene>> {
    let mut out = Vec::with_capacity(count);
    let mut reduced = 0;
    for i in 0..count as u64 {
        let g = generate_indexed(i, seed, room_types, caps, taxonomy)?;
        reduced += g.reduced as usize;
        out.push(g.scene);
    }
    if reduced > 0 {
        log::info!("{reduced} of {count} scenes were generated with fewer objects than targeted");
    }
    Ok(out)
}

/// Trains one stage for `config.train.steps` steps.
pub fn train_stage(
    stage: Stage,
    config: &ExperimentConfig,
    train: &[PreparedScene],
    taxonomy: &CategoryTaxonomy,
    log: Option<&mut dyn Write>,
) -> Result<Trainer> {
    if stage == Stage::Clg
        && train
            .iter()
            .all(|s| s.secondary_occupancy.iter().all(|&o| o == 0.0))
    {
        return Err(Error::Config(
            "CLG training needs scenes with secondary objects".into(),
        ));
    }
    let mut trainer = Trainer::new(stage, config, taxonomy)?;
    trainer.run(train, config.train.steps, log)?;
    Ok(trainer)
}

pub fn train_slg(
    config: &ExperimentConfig,
    train: &[PreparedScene],
    taxonomy: &CategoryTaxonomy,
) -> Result<Trainer> {
    train_stage(Stage::Slg, config, train, taxonomy, None)
}

pub fn train_clg(
    config: &ExperimentConfig,
    train: &[PreparedScene],
    taxonomy: &CategoryTaxonomy,
) -> Result<Trainer> {
    train_stage(Stage::Clg, config, train, taxonomy, None)
}

pub fn train_single_stage(
    config: &ExperimentConfig,
    train: &[PreparedScene],
    taxonomy: &CategoryTaxonomy,
) -> Result<Trainer> {
    train_stage(Stage::Single, config, train, taxonomy, None)
}

/// The four ablation configurations, from the plain baseline to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationArm {
    /// Single-stage denoiser with the spatial gate frozen at 1.
    SingleFixedGamma,
    /// Single-stage denoiser with the learnable spatial gate.
    Single,
    /// Two-stage pipeline without the scene graph condition.
    TwoStage,
    /// Two-stage pipeline with the scene graph condition.
    TwoStageLsg,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::SingleFixedGamma,
        AblationArm::Single,
        AblationArm::TwoStage,
        AblationArm::TwoStageLsg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::SingleFixedGamma => "single_gamma1",
            AblationArm::Single => "single",
            AblationArm::TwoStage => "two_stage",
            AblationArm::TwoStageLsg => "two_stage_lsg",
        }
    }

    /// The experiment config with this arm's switches applied.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            AblationArm::SingleFixedGamma => {
                c.model.gamma_init = 1.0;
                c.model.gamma_learnable = false;
                c.single.graph = false;
            }
            AblationArm::Single => c.single.graph = false,
            AblationArm::TwoStage => c.slg.graph = false,
            AblationArm::TwoStageLsg => c.slg.graph = true,
        }
        c
    }
}

/// Generated scenes for one arm: trains its stages and samples one scene per
/// condition.
pub fn run_arm(
    arm: AblationArm,
    base: &ExperimentConfig,
    train: &[PreparedScene],
    conditions: &[&PreparedScene],
    taxonomy: &CategoryTaxonomy,
) -> Result<Vec<Scene>> {
    let cfg = arm.apply(base);
    let schedule = cfg.diffusion.schedule()?;
    let seed = crate::substream(cfg.seed, "sample");
    let stride = cfg.sample.stride;
    match arm {
        AblationArm::SingleFixedGamma | AblationArm::Single => {
            let t = train_single_stage(&cfg, train, taxonomy)?;
            let out = sample_single(&t.model, &schedule, conditions, seed, stride, taxonomy)?;
            conditions
                .iter()
                .zip(out)
                .map(|(c, (p, s))| assemble_scene(c, p, s, "generated/single"))
                .collect()
        }
        AblationArm::TwoStage | AblationArm::TwoStageLsg => {
            let slg = train_slg(&cfg, train, taxonomy)?;
            let clg = train_clg(&cfg, train, taxonomy)?;
            sample_two_stage(
                &slg.model, &clg.model, &schedule, conditions, seed, stride, taxonomy,
            )
        }
    }
}

pub fn planes(config: &ExperimentConfig) -> Result<Vec<Plane>> {
    config
        .eval
        .planes
        .iter()
        .map(|p| Plane::parse(p).ok_or_else(|| Error::Config(format!("unknown plane {p:?}"))))
        .collect()
}

pub fn raster_options(config: &ExperimentConfig) -> RasterOptions {
    RasterOptions {
        resolution: config.eval.resolution,
        counts: false,
        oriented: config.eval.oriented,
    }
}

/// Trains and evaluates every arm against the validation scenes. An arm that
/// fails is recorded as skipped instead of aborting the report.
pub fn ablation(
    arms: &[AblationArm],
    config: &ExperimentConfig,
    train: &[PreparedScene],
    val: &[PreparedScene],
    taxonomy: &CategoryTaxonomy,
) -> Result<AblationReport> {
    let n = config.eval.scenes.min(val.len());
    if n == 0 {
        return Err(Error::Config("ablation needs validation scenes".into()));
    }
    let conditions: Vec<&PreparedScene> = val[..n].iter().collect();
    let reference: Vec<Scene> = val[..n].iter().map(|s| s.scene.clone()).collect();
    let planes = planes(config)?;
    let opts = raster_options(config);
    let mut report = AblationReport::default();
    for &arm in arms {
        log::info!("ablation arm {}", arm.name());
        match run_arm(arm, config, train, &conditions, taxonomy)
            .and_then(|g| evaluate_config(arm.name(), &g, &reference, &planes, opts))
        {
            Ok(row) => report.rows.push(row),
            Err(e) => report.skipped.push((arm.name().to_string(), e.to_string())),
        }
    }
    Ok(report)
}

/// Convenience for tests and the CLI: switches for a two-stage arm.
pub fn slg_switches(graph: bool) -> ConditionSwitches {
    ConditionSwitches {
        graph,
        mask: true,
        text: true,
    }
}
