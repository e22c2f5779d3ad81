//! Curriculum pre-training: forecast-horizon schedule, per-step rendering
//! losses at the current and a sampled future frame, Adam, checkpoints.

mod checkpoint;
mod curriculum;
mod data;
mod eval;
mod model;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use curriculum::{curriculum_stage, future_step_probabilities, sample_future_timestep};
pub use data::{
    load_dataset, load_sequence, simulate_dataset, simulate_episode, verify_manifest, write_dataset, Episode,
    SimConfig, MANIFEST,
};
pub use eval::{
    chamfer_distance, evaluate_forecast, ForecastReport, FrameMetrics, ModelPredictor, OraclePredictor, RangePredictor,
};
pub use model::{Model, ModelConfig};
pub use optim::{cosine_lr, optimizer_step, AdamState};

use crate::encoder::mask_augment;
use crate::error::{Error, Result};
use crate::lidarsim::{default_ground_threshold, transform_to_frame, Sequence};
use crate::renderer::{depth_loss, render_rays, select_render_rays, RenderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Length of the learning-rate schedule in steps.
    pub total_steps: u64,
    pub steps_per_epoch: u64,
    pub mask_rate: f64,
    pub n_render: usize,
    pub n_ray: usize,
    pub near: f64,
    /// `None` uses the grid diagonal.
    pub far: Option<f64>,
    /// Rays with a rendered weight sum at or below this stay out of the loss.
    pub min_weight_sum: f64,
    pub jitter: bool,
    pub curriculum_epochs: [usize; 2],
    pub k_max: usize,
    pub decay_base: f64,
    /// Render only the current frame.
    pub reconstruction_only: bool,
    /// `None` uses the default for the sensor height.
    pub z_thd: Option<f64>,
    pub sensor_height: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 2e-4,
            schedule: LrSchedule::Cosine,
            total_steps: 20_000,
            steps_per_epoch: 200,
            mask_rate: 0.9,
            n_render: 512,
            n_ray: 32,
            near: 0.3,
            far: None,
            min_weight_sum: 0.0,
            jitter: true,
            curriculum_epochs: [12, 36],
            k_max: 2,
            decay_base: 2.0,
            reconstruction_only: false,
            z_thd: None,
            sensor_height: 1.8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::config(format!("mask_rate {} must lie in [0, 1)", self.mask_rate)));
        }
        if self.curriculum_epochs.contains(&0) || self.steps_per_epoch == 0 {
            return Err(Error::config("curriculum epochs and steps per epoch must be positive"));
        }
        if self.k_max == 0 {
            return Err(Error::config("k_max must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(self.decay_base > 1.0) {
            return Err(Error::config("decay base must exceed 1 so p(m) strictly decreases"));
        }
        if self.n_ray < 2 || self.n_render == 0 {
            return Err(Error::config("need at least 2 samples per ray and 1 ray per frame"));
        }
        self.model.grid.validate()?;
        self.render_config().validate()
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_ray: self.n_ray,
            near: self.near,
            far: self.far.unwrap_or_else(|| self.model.grid.diagonal()),
            min_weight_sum: self.min_weight_sum,
            jitter: self.jitter,
        }
    }

    pub fn ground_threshold(&self) -> f64 {
        self.z_thd.unwrap_or_else(|| default_ground_threshold(self.sensor_height))
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Cosine => cosine_lr(step, self.total_steps, self.lr),
            LrSchedule::Constant => self.lr,
        }
    }
}

/// Independent stream for one step, so any step can be replayed from the seed.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// What one training step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub l: usize,
    /// Sampled future horizon, 0 when only the current frame was rendered.
    pub m: usize,
    /// `None` when the frame was skipped.
    pub loss_t0: Option<f64>,
    pub loss_tm: Option<f64>,
    pub lr: f64,
}

impl StepReport {
    pub fn loss(&self) -> f64 {
        self.loss_t0.unwrap_or(0.0) + self.loss_tm.unwrap_or(0.0)
    }

    pub fn skipped(&self) -> bool {
        self.loss_t0.is_none() && self.loss_tm.is_none()
    }
}

/// Forward pass and gradients for one sequence at step `step`, without
/// touching the parameters.
pub fn compute_step(model: &Model, seq: &Sequence, cfg: &TrainConfig, step: u64) -> Result<(StepReport, Vec<Vec<f64>>)> {
    let epoch = step / cfg.steps_per_epoch;
    let frames = seq.clouds.len();
    if frames == 0 || seq.actions.len() + 1 != frames {
        return Err(Error::contract("sequence needs k frames and k-1 actions"));
    }
    let mut rng = step_rng(cfg.seed, step);
    let l = curriculum_stage(epoch as usize, cfg.curriculum_epochs, cfg.k_max);
    let forecast = !cfg.reconstruction_only && model.can_forecast() && frames > 1;
    let m = if forecast { sample_future_timestep(l.min(frames - 1), cfg.decay_base, &mut rng) } else { 0 };
    let (mask_seed, rays0, raysm, render0, renderm): (u64, u64, u64, u64, u64) =
        (rng.random(), rng.random(), rng.random(), rng.random(), rng.random());

    let current = &seq.clouds[0];
    let input = mask_augment(current, cfg.mask_rate, mask_seed, &model.cfg.grid)?;
    let mut tape = model.tape();
    let grids = model.grids(&mut tape, &input, &seq.actions[..m])?;
    let log_z = tape.param(&model.store, model.log_z);
    let rcfg = cfg.render_config();
    let z_thd = cfg.ground_threshold();

    let mut terms = Vec::new();
    let mut losses = [None, None];
    let targets = if m > 0 { vec![0, m] } else { vec![0] };
    for (slot, &n) in targets.iter().enumerate() {
        let cloud = transform_to_frame(&seq.clouds[n], current.frame_pose);
        let (ray_seed, render_seed) = if slot == 0 { (rays0, render0) } else { (raysm, renderm) };
        let Some(batch) = select_render_rays(&cloud, z_thd, cfg.n_render, ray_seed)? else {
            continue;
        };
        let t = cloud.timestamp - current.timestamp;
        let out = render_rays(&mut tape, &model.store, &model.field, grids[n], log_z, &batch, t, &rcfg, render_seed)?;
        if let Some(loss) = depth_loss(&mut tape, &out, &batch.ranges, cfg.min_weight_sum)? {
            losses[slot] = Some(tape.scalar(loss));
            terms.push(loss);
        }
    }
    let report = StepReport {
        step,
        epoch,
        l,
        m,
        loss_t0: losses[0],
        loss_tm: losses[1],
        lr: cfg.lr_at(step),
    };
    if terms.is_empty() {
        return Ok((report, vec![Vec::new(); model.store.len()]));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    if !tape.scalar(total).is_finite() {
        return Err(Error::numeric("loss", format!("step {step} produced {}", tape.scalar(total))));
    }
    let grads = tape.backward(total)?.for_store(&model.store);
    Ok((report, grads))
}

/// Loss, backward and one Adam update. Skipped frames leave the parameters
/// and the optimizer untouched.
pub fn train_step(model: &mut Model, adam: &mut AdamState, seq: &Sequence, cfg: &TrainConfig, step: u64) -> Result<StepReport> {
    let (report, grads) = compute_step(model, seq, cfg, step)?;
    if !report.skipped() {
        optimizer_step(&mut model.store, &grads, adam, report.lr)?;
    }
    Ok(report)
}

/// Index of the sequence trained on at `step`.
pub fn sequence_for_step(seed: u64, step: u64, count: usize) -> usize {
    let mut rng = step_rng(seed ^ 0x5EED_5EED_5EED_5EED, step);
    rng.random_range(0..count)
}

/// Header of the metrics stream.
pub const METRICS_HEADER: &str = "step,epoch,l,m,L_t0,L_tm,lr,wall_ms";

/// One metrics row; skipped terms are written as empty fields.
pub fn metrics_row(r: &StepReport, wall_ms: u64) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!("{},{},{},{},{},{},{},{}", r.step, r.epoch, r.l, r.m, f(r.loss_t0), f(r.loss_tm), r.lr, wall_ms)
}
