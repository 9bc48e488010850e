use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use layoutdiff::checkpoint;
use layoutdiff::config::{parse_room_types, ExperimentConfig};
use layoutdiff::eval::{evaluate_config, rasterize_scenes, AblationReport};
use layoutdiff::format::{load_corpus, read_scenes, write_file, write_scenes, write_vocab};
use layoutdiff::model::Stage;
use layoutdiff::pipeline::{self, AblationArm};
use layoutdiff::sample::{assemble_scene, sample_single, sample_two_stage};
use layoutdiff::train::{prepare_scenes, PreparedScene};
use layoutdiff_core::{CategoryTaxonomy, Scene};
use serde_json::json;
use sha2::{Digest, Sha256};

/// Two-stage layout diffusion: corpus generation, training, sampling and evaluation.
#[derive(Parser)]
#[command(name = "layoutdiff", version)]
struct Cli {
    /// Experiment config (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log file; defaults to `<out>.log`, or `layoutdiff.log` for commands without an output.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Datagen(DatagenArgs),
    /// Train one stage on a corpus.
    Train(TrainArgs),
    /// Sample layouts for the scenes of a conditions file.
    Sample(SampleArgs),
    /// Compare generated scenes against a reference set.
    Eval(EvalArgs),
    /// Train and evaluate the four ablation configurations.
    Ablate(AblateArgs),
    /// Run the built-in property checks.
    Selftest,
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated room types.
    #[arg(long, value_delimiter = ',')]
    room_types: Option<Vec<String>>,
    /// Object caps `N_L,N_S`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    caps: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_stage)]
    stage: Stage,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    /// SLG checkpoint, or a single-stage checkpoint when `--clg` is absent.
    #[arg(long)]
    slg: PathBuf,
    #[arg(long)]
    clg: Option<PathBuf>,
    /// Scenes whose graph, room mask and prompt condition the samples.
    #[arg(long)]
    conditions: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use only the first N condition scenes.
    #[arg(long)]
    limit: Option<usize>,
    /// Overrides `sample.stride`.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Row label in the report.
    #[arg(long, default_value = "generated")]
    name: String,
    /// Also dump the rasters of the first scenes as PGM images here.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Corpus to train and evaluate on; generated from the config when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated subset of single_gamma1, single, two_stage, two_stage_lsg.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage {s:?} (slg, clg, single)"))
}

/// Log sink writing to stdout and a file.
struct Tee {
    file: Arc<Mutex<fs::File>>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        self.file.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        self.file.lock().expect("log file lock").flush()
    }
}

fn init_logging(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file =
        fs::File::create(path).with_context(|| format!("creating log file {}", path.display()))?;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| writeln!(buf, "[{}] {}", rec.level(), rec.args()))
        .target(env_logger::Target::Pipe(Box::new(Tee {
            file: Arc::new(Mutex::new(file)),
        })))
        .init();
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn file_hash(path: &Path) -> anyhow::Result<String> {
    Ok(sha256_hex(
        &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
    ))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Sidecar describing how an artifact was produced. Deliberately free of
/// wall-clock fields so reruns reproduce it byte for byte.
fn write_manifest(
    artifact: &Path,
    command: &str,
    config: &ExperimentConfig,
    extra: serde_json::Value,
) -> anyhow::Result<()> {
    let mut m = json!({
        "command": command,
        "config_hash": config.hash(),
        "seed": config.seed,
        "artifact": artifact.file_name().map(|n| n.to_string_lossy().into_owned()),
        "sha256": file_hash(artifact)?,
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (m.as_object_mut(), extra) {
        obj.extend(more);
    }
    let path = with_suffix(artifact, ".manifest.json");
    write_file(
        &path,
        format!("{}\n", serde_json::to_string_pretty(&m)?).as_bytes(),
    )?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn datagen(
    args: &DatagenArgs,
    mut cfg: ExperimentConfig,
    tax: &CategoryTaxonomy,
) -> anyhow::Result<()> {
    if let Some(c) = args.count {
        cfg.corpus.count = c;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = &args.room_types {
        cfg.corpus.room_types = r.clone();
    }
    if let Some(c) = &args.caps {
        let [p, s] = c[..] else {
            bail!("--caps takes N_L,N_S")
        };
        cfg.corpus.caps = [p, s];
    }
    cfg.validate()?;
    let rooms = parse_room_types(&cfg.corpus.room_types)?;
    let seed = layoutdiff::substream(cfg.seed, "corpus");
    let scenes = pipeline::generate_corpus(cfg.corpus.count, seed, &rooms, cfg.corpus.caps(), tax)?;
    write_scenes(&args.out, &scenes, tax)?;
    let vocab = with_suffix(&args.out, ".vocab.txt");
    write_vocab(&vocab, tax)?;
    write_manifest(
        &args.out,
        "datagen",
        &cfg,
        json!({ "count": scenes.len(), "caps": cfg.corpus.caps }),
    )?;
    log::info!(
        "wrote {} scenes to {} (config {})",
        scenes.len(),
        args.out.display(),
        cfg.hash()
    );
    Ok(())
}

fn prepared_split(
    path: &Path,
    cfg: &ExperimentConfig,
    tax: &CategoryTaxonomy,
) -> anyhow::Result<(Vec<PreparedScene>, Vec<PreparedScene>)> {
    let split = load_corpus(
        path,
        cfg.corpus.split_ratio,
        cfg.seed,
        cfg.corpus.caps(),
        tax,
    )?;
    log::info!(
        "corpus {}: {} train, {} val, {} filtered",
        path.display(),
        split.train.len(),
        split.val.len(),
        split.filtered
    );
    let train = prepare_scenes(
        &split.train,
        cfg.corpus.caps(),
        tax,
        cfg.model.mask_resolution,
    )?;
    let val = prepare_scenes(
        &split.val,
        cfg.corpus.caps(),
        tax,
        cfg.model.mask_resolution,
    )?;
    Ok((train, val))
}

fn train(
    args: &TrainArgs,
    mut cfg: ExperimentConfig,
    tax: &CategoryTaxonomy,
) -> anyhow::Result<()> {
    let mut trainer = match &args.resume {
        Some(p) => {
            let t = checkpoint::load(p, tax)?;
            if t.model.stage != args.stage {
                bail!(
                    "{} holds a {} model, not {}",
                    p.display(),
                    t.model.stage.name(),
                    args.stage.name()
                );
            }
            cfg = t.config.clone();
            t
        }
        None => layoutdiff::train::Trainer::new(args.stage, &cfg, tax)?,
    };
    let until = args.steps.unwrap_or(cfg.train.steps);
    let (data, _) = prepared_split(&args.corpus, &cfg, tax)?;
    if data.is_empty() {
        bail!("no training scenes in {}", args.corpus.display());
    }
    let metrics_path = with_suffix(&args.out, ".metrics.jsonl");
    let mut metrics = if args.resume.is_some() && metrics_path.exists() {
        fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        fs::File::create(&metrics_path)
            .with_context(|| format!("creating {}", metrics_path.display()))?
    };
    log::info!(
        "training {} from step {} to {} (config {})",
        args.stage.name(),
        trainer.step,
        until,
        cfg.hash()
    );
    trainer.run(&data, until, Some(&mut metrics))?;
    checkpoint::save(&args.out, &trainer, tax)?;
    write_manifest(
        &args.out,
        "train",
        &cfg,
        json!({
            "stage": args.stage.name(),
            "step": trainer.step,
            "corpus_sha256": file_hash(&args.corpus)?,
            "final_loss": trainer.smoothed_loss(50),
        }),
    )?;
    log::info!(
        "saved {} (smoothed loss {:.5})",
        args.out.display(),
        trainer.smoothed_loss(50)
    );
    Ok(())
}

fn sample(args: &SampleArgs, tax: &CategoryTaxonomy) -> anyhow::Result<()> {
    let first = checkpoint::load(&args.slg, tax)?;
    let cfg = first.config.clone();
    let stride = args.stride.unwrap_or(cfg.sample.stride);
    let schedule = cfg.diffusion.schedule()?;
    let mut scenes = read_scenes(&args.conditions, tax)?;
    if let Some(n) = args.limit {
        scenes.truncate(n);
    }
    let caps = cfg.corpus.caps();
    scenes.retain(|s| caps.admits(s.primary.len(), s.secondary.len()));
    let prepared = prepare_scenes(&scenes, caps, tax, cfg.model.mask_resolution)?;
    let conds: Vec<&PreparedScene> = prepared.iter().collect();
    let seed = layoutdiff::substream(args.seed, "sample");
    let out: Vec<Scene> = match (&args.clg, first.model.stage) {
        (Some(clg_path), Stage::Slg) => {
            let clg = checkpoint::load(clg_path, tax)?;
            if clg.model.stage != Stage::Clg {
                bail!("{} is not a clg checkpoint", clg_path.display());
            }
            sample_two_stage(
                &first.model,
                &clg.model,
                &schedule,
                &conds,
                seed,
                stride,
                tax,
            )?
        }
        (None, Stage::Single) => sample_single(&first.model, &schedule, &conds, seed, stride, tax)?
            .into_iter()
            .zip(&conds)
            .map(|((p, s), c)| assemble_scene(c, p, s, "generated/single"))
            .collect::<layoutdiff::Result<_>>()?,
        (None, Stage::Slg) => {
            layoutdiff::sample::sample_slg(&first.model, &schedule, &conds, seed, stride, tax)?
                .into_iter()
                .zip(&conds)
                .map(|(p, c)| assemble_scene(c, p, vec![], "generated/slg"))
                .collect::<layoutdiff::Result<_>>()?
        }
        (_, stage) => bail!(
            "cannot sample from a {} checkpoint passed as --slg",
            stage.name()
        ),
    };
    write_scenes(&args.out, &out, tax)?;
    let mut hashes = json!({ "slg_sha256": file_hash(&args.slg)?, "conditions_sha256": file_hash(&args.conditions)? });
    if let Some(c) = &args.clg {
        hashes["clg_sha256"] = json!(file_hash(c)?);
    }
    hashes["sample_seed"] = json!(args.seed);
    hashes["stride"] = json!(stride);
    write_manifest(&args.out, "sample", &cfg, hashes)?;
    log::info!("wrote {} scenes to {}", out.len(), args.out.display());
    Ok(())
}

fn eval(args: &EvalArgs, cfg: &ExperimentConfig, tax: &CategoryTaxonomy) -> anyhow::Result<()> {
    let generated = read_scenes(&args.generated, tax)?;
    let reference = read_scenes(&args.reference, tax)?;
    let planes = pipeline::planes(cfg)?;
    let opts = pipeline::raster_options(cfg);
    let row = evaluate_config(&args.name, &generated, &reference, &planes, opts)?;
    let report = AblationReport {
        rows: vec![row],
        skipped: vec![],
    };
    write_report(&args.out, &report)?;
    if let Some(dir) = &args.pgm_dir {
        for &plane in &planes {
            let imgs = rasterize_scenes(&generated[..generated.len().min(8)], plane, opts)?;
            for (i, img) in imgs.iter().enumerate() {
                write_file(
                    &dir.join(format!("{}_{i:03}_{}.pgm", args.name, plane.name())),
                    &img.to_pgm(),
                )?;
            }
        }
    }
    write_manifest(
        &args.out,
        "eval",
        cfg,
        json!({ "generated_sha256": file_hash(&args.generated)?, "reference_sha256": file_hash(&args.reference)? }),
    )?;
    print!("{}", report.to_table());
    Ok(())
}

/// Writes the line report at `path` plus `.table.txt` and `.json` companions.
fn write_report(path: &Path, report: &AblationReport) -> anyhow::Result<()> {
    write_file(path, report.to_lines().as_bytes())?;
    write_file(
        &with_suffix(path, ".table.txt"),
        report.to_table().as_bytes(),
    )?;
    write_file(
        &with_suffix(path, ".json"),
        format!("{}\n", serde_json::to_string_pretty(report)?).as_bytes(),
    )?;
    Ok(())
}

fn ablate(args: &AblateArgs, cfg: &ExperimentConfig, tax: &CategoryTaxonomy) -> anyhow::Result<()> {
    let arms: Vec<AblationArm> = match &args.arms {
        None => AblationArm::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| {
                AblationArm::ALL
                    .into_iter()
                    .find(|a| a.name() == n)
                    .with_context(|| format!("unknown arm {n:?}"))
            })
            .collect::<anyhow::Result<_>>()?,
    };
    fs::create_dir_all(&args.out)?;
    let corpus = match &args.corpus {
        Some(p) => p.clone(),
        None => {
            let p = args.out.join("corpus.jsonl");
            let rooms = cfg.corpus.room_types()?;
            let seed = layoutdiff::substream(cfg.seed, "corpus");
            let scenes =
                pipeline::generate_corpus(cfg.corpus.count, seed, &rooms, cfg.corpus.caps(), tax)?;
            write_scenes(&p, &scenes, tax)?;
            write_manifest(&p, "datagen", cfg, json!({ "count": scenes.len() }))?;
            p
        }
    };
    let (train, val) = prepared_split(&corpus, cfg, tax)?;
    let report = pipeline::ablation(&arms, cfg, &train, &val, tax)?;
    let path = args.out.join("report.txt");
    write_report(&path, &report)?;
    write_manifest(
        &path,
        "ablate",
        cfg,
        json!({ "corpus_sha256": file_hash(&corpus)?, "rows": report.rows.len() }),
    )?;
    print!("{}", report.to_table());
    Ok(())
}

fn default_log(cmd: &Command) -> PathBuf {
    let out = match cmd {
        Command::Datagen(a) => Some(a.out.clone()),
        Command::Train(a) => Some(a.out.clone()),
        Command::Sample(a) => Some(a.out.clone()),
        Command::Eval(a) => Some(a.out.clone()),
        Command::Ablate(a) => Some(a.out.join("ablate")),
        Command::Selftest => None,
    };
    out.map_or_else(
        || PathBuf::from("layoutdiff.log"),
        |o| with_suffix(&o, ".log"),
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log_path = cli.log.clone().unwrap_or_else(|| default_log(&cli.command));
    if let Err(e) = init_logging(&log_path) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let tax = CategoryTaxonomy::desk();
    let result = load_config(cli.config.as_deref()).and_then(|cfg| match &cli.command {
        Command::Datagen(a) => datagen(a, cfg, &tax),
        Command::Train(a) => train(a, cfg, &tax),
        Command::Sample(a) => sample(a, &tax),
        Command::Eval(a) => eval(a, &cfg, &tax),
        Command::Ablate(a) => ablate(a, &cfg, &tax),
        Command::Selftest => {
            let failed = layoutdiff::selftest::run();
            if failed.is_empty() {
                log::info!(
                    "selftest: all {} checks passed",
                    layoutdiff::selftest::checks().len()
                );
                Ok(())
            } else {
                for name in &failed {
                    eprintln!("selftest failed: {name}");
                }
                bail!(
                    "{} of {} checks failed",
                    failed.len(),
                    layoutdiff::selftest::checks().len()
                )
            }
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
