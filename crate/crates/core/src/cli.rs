//! The `trend` command line: simulate, pretrain, eval-forecast, gradcheck,
//! render-dump. Each command is a library function of (config, seed, input
//! files) so it can be driven from tests and bindings as well.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::diffcore::OP_NAMES;
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, CaseResult};
use crate::lidarsim::transform_to_frame;
use crate::renderer::select_render_rays;
use crate::trainer::{
    curriculum_stage, evaluate_forecast, load_dataset, metrics_row, sequence_for_step, simulate_dataset, train_step,
    write_dataset, AdamState, Checkpoint, ForecastReport, Model, ModelPredictor, OraclePredictor, StepReport,
    METRICS_HEADER,
};

/// Simulates the configured dataset into `out`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let episodes = simulate_dataset(&cfg.sim)?;
    write_dataset(out, &episodes)?;
    Ok(episodes.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub skipped: u64,
    pub last_loss: Option<f64>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Keeps the header and the rows of steps before `start`, so a resumed run
/// appends exactly where the checkpoint left off.
fn truncate_metrics(path: &Path, start: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = format!("{METRICS_HEADER}\n");
    for line in text.lines().skip(1) {
        let step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad metrics row `{line}`")))?;
        if step < start {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    io(path, std::fs::write(path, kept))
}

fn save_checkpoint(cfg: &RunConfig, model: &Model, adam: &AdamState, step: u64) -> Result<()> {
    Checkpoint { step, config_hash: cfg.hash(), params: model.store.clone(), adam: adam.clone() }.save(&cfg.paths.checkpoint())
}

/// Curriculum pre-training on the dataset at `cfg.paths.data` up to
/// `train.total_steps`. Checkpoints go to `cfg.paths.checkpoint()` every
/// `run.checkpoint_every` steps and at the end; a failing step leaves the
/// last good checkpoint in place. `max_steps` caps the steps taken by this
/// call, leaving the rest for a later resume. `on_step` sees every report.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    resume: bool,
    max_steps: Option<u64>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<PretrainSummary> {
    cfg.validate()?;
    let episodes = load_dataset(&cfg.paths.data)?;
    let sequences: Vec<_> = episodes.into_iter().map(|e| e.sequence).collect();
    let mut model = Model::new(cfg.train.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.store);
    let mut start = 0;
    if resume {
        let ck = Checkpoint::load(&cfg.paths.checkpoint())?;
        if ck.config_hash != cfg.hash() {
            return Err(Error::config("checkpoint was written under a different configuration"));
        }
        ck.restore_into(&mut model.store)?;
        adam = ck.adam;
        start = ck.step;
    }
    io(&cfg.paths.out, std::fs::create_dir_all(&cfg.paths.out))?;
    let metrics_path = cfg.paths.metrics();
    truncate_metrics(&metrics_path, start)?;
    let mut metrics = io(&metrics_path, OpenOptions::new().append(true).open(&metrics_path))?;

    let mut summary = PretrainSummary { start_step: start, end_step: start, skipped: 0, last_loss: None };
    let end = max_steps.map_or(cfg.train.total_steps, |n| cfg.train.total_steps.min(start.saturating_add(n)));
    for step in start..end {
        let t0 = Instant::now();
        let seq = &sequences[sequence_for_step(cfg.seed, step, sequences.len())];
        let report = train_step(&mut model, &mut adam, seq, &cfg.train, step)?;
        let wall = if cfg.run.zero_wall_ms { 0 } else { t0.elapsed().as_millis() as u64 };
        io(&metrics_path, writeln!(metrics, "{}", metrics_row(&report, wall)))?;
        if report.skipped() {
            summary.skipped += 1;
        } else {
            summary.last_loss = Some(report.loss());
        }
        summary.end_step = step + 1;
        on_step(&report);
        let every = cfg.run.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 {
            save_checkpoint(cfg, &model, &adam, step + 1)?;
        }
    }
    save_checkpoint(cfg, &model, &adam, summary.end_step)?;
    Ok(summary)
}

/// Rebuilds the configured model and loads `checkpoint` into it.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = Model::new(cfg.train.model.clone(), cfg.seed)?;
    ck.restore_into(&mut model.store)?;
    Ok((model, ck))
}

/// Forecast evaluation at horizon `m` on every sequence of `data`. The
/// second value lists warnings, such as a horizon past the trained stage.
pub fn cmd_eval_forecast(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    data: &Path,
    m: usize,
) -> Result<(ForecastReport, Vec<String>)> {
    cfg.validate()?;
    let episodes = load_dataset(data)?;
    let seqs: Vec<_> = episodes.iter().map(|e| &e.sequence).collect();
    let z_thd = cfg.train.ground_threshold();
    let (max_rays, seed) = (cfg.run.eval_max_rays, cfg.seed);
    let mut warnings = Vec::new();
    let Some(path) = checkpoint else {
        return Ok((evaluate_forecast(&OraclePredictor, &seqs, m, z_thd, max_rays, seed)?, warnings));
    };
    let (model, ck) = load_model(cfg, path)?;
    if ck.config_hash != cfg.hash() {
        warnings.push("checkpoint config hash differs from the given configuration".into());
    }
    let epoch = (ck.step.saturating_sub(1) / cfg.train.steps_per_epoch) as usize;
    let trained = if cfg.train.reconstruction_only || !model.can_forecast() {
        0
    } else {
        curriculum_stage(epoch, cfg.train.curriculum_epochs, cfg.train.k_max)
    };
    if m > trained {
        warnings.push(format!("horizon {m} exceeds the trained forecasting length {trained}"));
    }
    let predictor = ModelPredictor::new(&model, &cfg.train);
    Ok((evaluate_forecast(&predictor, &seqs, m, z_thd, max_rays, seed)?, warnings))
}

/// Writes `ray,r,r_pred,weight_sum` for frame `frame` of sequence
/// `sequence`, rendered from frame 0 and the actions in between.
pub fn cmd_render_dump(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    sequence: usize,
    frame: usize,
    out: &Path,
) -> Result<usize> {
    cfg.validate()?;
    let episodes = load_dataset(data)?;
    let seq = &episodes
        .get(sequence)
        .ok_or_else(|| Error::config(format!("sequence {sequence} not in the dataset ({} sequences)", episodes.len())))?
        .sequence;
    if frame >= seq.clouds.len() {
        return Err(Error::config(format!("frame {frame} not in a {}-frame sequence", seq.clouds.len())));
    }
    let (model, _) = load_model(cfg, checkpoint)?;
    let cloud = transform_to_frame(&seq.clouds[frame], seq.clouds[0].frame_pose);
    let Some(rays) = select_render_rays(&cloud, cfg.train.ground_threshold(), cfg.run.eval_max_rays, cfg.seed)? else {
        return Err(Error::contract("no rays survive the ground filter"));
    };
    let (pred, wsum) = ModelPredictor::new(&model, &cfg.train).render(seq, frame, &rays)?;
    let mut csv = String::from("ray,r,r_pred,weight_sum\n");
    for (i, ((r, p), w)) in rays.ranges.iter().zip(&pred).zip(&wsum).enumerate() {
        csv.push_str(&format!("{i},{r},{p},{w}\n"));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        io(dir, std::fs::create_dir_all(dir))?;
    }
    io(out, std::fs::write(out, csv))?;
    Ok(rays.len())
}

/// Runs the gradient suite; `fault` must name a recorded op.
pub fn cmd_gradcheck(seeds: u64, step: f64, fault: Option<&str>) -> Result<Vec<CaseResult>> {
    if let Some(op) = fault {
        if !OP_NAMES.contains(&op) {
            return Err(Error::config(format!("unknown op `{op}`; known: {}", OP_NAMES.join(", "))));
        }
    }
    if !(step > 0.0) || seeds == 0 {
        return Err(Error::config("gradcheck needs a positive step and at least one seed"));
    }
    run_suite(&(0..seeds).collect::<Vec<_>>(), step, fault)
}

#[derive(Parser, Debug)]
#[command(name = "trend", version, about = "LiDAR forecasting pre-training with a temporal neural SDF")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic sequence dataset.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to `path.data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curriculum pre-training with periodic checkpoints and a metrics CSV.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the checkpoint in `path.out`.
        #[arg(long)]
        resume: bool,
        /// Print a line every this many steps (0 for none).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
        /// Stop after this many steps; `--resume` continues the run.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Depth MAE and Chamfer distance of forecasts at one horizon.
    EvalForecast {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to the checkpoint in `path.out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to score; defaults to `path.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Frames ahead of the input frame; defaults to `eval.horizon`.
        #[arg(long)]
        horizon: Option<usize>,
        /// Score the observed ranges instead of a model (sanity baseline).
        #[arg(long)]
        oracle: bool,
        /// Also print one line per evaluated frame.
        #[arg(long)]
        per_frame: bool,
    },
    /// Finite-difference check of every differentiable stage.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Corrupt the backward rule of this op to confirm the check catches it.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Per-ray CSV of observed range, rendered range and weight sum.
    RenderDump {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Caps the rayon pool at `TREND_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TREND_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::config(format!("TREND_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn hex_hash(cfg: &RunConfig) -> String {
    hex::encode(cfg.hash())
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    init_threads()?;
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = config.resolve()?;
            let out = out.unwrap_or_else(|| cfg.paths.data.clone());
            let n = cmd_simulate(&cfg, &out)?;
            println!("wrote {n} sequences of {} frames to {}", cfg.sim.frames, out.display());
        }
        Command::Pretrain { config, resume, log_every, max_steps } => {
            let cfg = config.resolve()?;
            println!("config hash {}", hex_hash(&cfg));
            let s = cmd_pretrain(&cfg, resume, max_steps, |r| {
                if log_every > 0 && (r.step + 1) % log_every == 0 {
                    println!("step {} epoch {} l {} m {} loss {:.6} lr {:.3e}", r.step + 1, r.epoch, r.l, r.m, r.loss(), r.lr);
                }
            })?;
            println!(
                "trained steps {}..{} ({} skipped); checkpoint {}",
                s.start_step,
                s.end_step,
                s.skipped,
                cfg.paths.checkpoint().display()
            );
        }
        Command::EvalForecast { config, checkpoint, data, horizon, oracle, per_frame } => {
            let cfg = config.resolve()?;
            let m = horizon.unwrap_or(cfg.run.eval_horizon);
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let ck = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint());
            let (report, warnings) = cmd_eval_forecast(&cfg, (!oracle).then_some(ck.as_path()), &data, m)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            if per_frame {
                println!("sequence,rays,mae,chamfer");
                for f in &report.frames {
                    println!("{},{},{},{}", f.sequence, f.rays, f.mae, f.chamfer);
                }
            }
            println!("horizon {m}: frames {} mae {:.6} chamfer {:.6}", report.frames.len(), report.mae(), report.chamfer());
        }
        Command::Gradcheck { seeds, step, inject_fault } => {
            let t = Instant::now();
            let results = cmd_gradcheck(seeds, step, inject_fault.as_deref())?;
            let mut failed = Vec::new();
            for r in &results {
                let worst = r.report.worst();
                println!(
                    "{} {}::{} seed {} max_rel {:.3e} worst {}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.module,
                    r.case,
                    r.seed,
                    r.report.max_rel_error,
                    worst.map_or("-".into(), |w| format!("{}[{}]", w.name, w.index)),
                );
                if !r.passed() && !failed.contains(&(r.module, r.case)) {
                    failed.push((r.module, r.case));
                }
            }
            println!("{} checks in {:.2}s", results.len(), t.elapsed().as_secs_f64());
            if !failed.is_empty() {
                if let Some(op) = &inject_fault {
                    println!("injected fault in `{op}` detected");
                }
                let names: Vec<String> = failed.iter().map(|(m, c)| format!("{m}::{c}")).collect();
                println!("failing: {}", names.join(", "));
                return Ok(3);
            }
        }
        Command::RenderDump { config, checkpoint, data, sequence, frame, out } => {
            let cfg = config.resolve()?;
            let ck = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint());
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let n = cmd_render_dump(&cfg, &ck, &data, sequence, frame, &out)?;
            println!("wrote {n} rays to {}", out.display());
        }
    }
    Ok(0)
}
