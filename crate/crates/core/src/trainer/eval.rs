use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, TrainConfig};
use crate::error::{Error, Result};
use crate::lidarsim::{transform_to_frame, Sequence};
use crate::renderer::{render_rays, select_render_rays, RayBatch, RenderConfig};

/// Anything that predicts ranges along rays of frame `m` of a sequence,
/// seeing only frame 0 and the actions up to `m`.
pub trait RangePredictor {
    fn predict(&self, seq: &Sequence, m: usize, rays: &RayBatch) -> Result<Vec<f64>>;
}

/// Stub that returns the observed ranges; any metric computed with it is zero.
pub struct OraclePredictor;

impl RangePredictor for OraclePredictor {
    fn predict(&self, _seq: &Sequence, _m: usize, rays: &RayBatch) -> Result<Vec<f64>> {
        Ok(rays.ranges.clone())
    }
}

/// Renders a trained model with unjittered samples and no input masking.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub render: RenderConfig,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model, cfg: &TrainConfig) -> Self {
        ModelPredictor { model, render: RenderConfig { jitter: false, ..cfg.render_config() } }
    }

    /// Predicted ranges and per-ray weight sums.
    pub fn render(&self, seq: &Sequence, m: usize, rays: &RayBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        if m >= seq.clouds.len() || m > seq.actions.len() {
            return Err(Error::contract(format!("horizon {m} exceeds the sequence length")));
        }
        let model = self.model;
        let current = &seq.clouds[0];
        let mut tape = model.tape();
        let grids = model.grids(&mut tape, current, &seq.actions[..m])?;
        let log_z = tape.param(&model.store, model.log_z);
        let t = seq.clouds[m].timestamp - current.timestamp;
        let out = render_rays(&mut tape, &model.store, &model.field, grids[m], log_z, rays, t, &self.render, 0)?;
        Ok((tape.value(out.depth).data().to_vec(), out.weight_sums))
    }
}

impl RangePredictor for ModelPredictor<'_> {
    fn predict(&self, seq: &Sequence, m: usize, rays: &RayBatch) -> Result<Vec<f64>> {
        self.render(seq, m, rays).map(|(d, _)| d)
    }
}

/// Symmetric Chamfer distance: the average of the two directed mean
/// nearest-neighbour distances. Zero for identical sets.
pub fn chamfer_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { f64::INFINITY };
    }
    let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / x.len() as f64
    };
    (directed(a, b) + directed(b, a)) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub sequence: usize,
    pub rays: usize,
    pub mae: f64,
    pub chamfer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastReport {
    pub horizon: usize,
    pub frames: Vec<FrameMetrics>,
}

impl ForecastReport {
    /// Ray-weighted mean absolute range error.
    pub fn mae(&self) -> f64 {
        let n: usize = self.frames.iter().map(|f| f.rays).sum();
        self.frames.iter().map(|f| f.mae * f.rays as f64).sum::<f64>() / n.max(1) as f64
    }

    pub fn chamfer(&self) -> f64 {
        self.frames.iter().map(|f| f.chamfer).sum::<f64>() / self.frames.len().max(1) as f64
    }
}

/// Scores `predictor` on frame `m` of every sequence, along the observed
/// (ground-filtered, reference-frame) rays of that frame. `m = 0` scores
/// reconstruction. Sequences shorter than `m + 1` frames are skipped.
pub fn evaluate_forecast<P: RangePredictor + ?Sized>(
    predictor: &P,
    sequences: &[&Sequence],
    m: usize,
    z_thd: f64,
    max_rays: usize,
    seed: u64,
) -> Result<ForecastReport> {
    let mut frames = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, seq) in sequences.iter().enumerate() {
        if seq.clouds.len() <= m {
            continue;
        }
        let cloud = transform_to_frame(&seq.clouds[m], seq.clouds[0].frame_pose);
        let Some(rays) = select_render_rays(&cloud, z_thd, max_rays, rand::Rng::random(&mut rng))? else {
            continue;
        };
        let pred = predictor.predict(seq, m, &rays)?;
        if pred.len() != rays.len() {
            return Err(Error::contract("predictor returned the wrong number of ranges"));
        }
        let mae = pred.iter().zip(&rays.ranges).map(|(p, r)| (p - r).abs()).sum::<f64>() / rays.len() as f64;
        let chamfer = chamfer_distance(&rays.endpoints(&pred), &rays.endpoints(&rays.ranges));
        frames.push(FrameMetrics { sequence: i, rays: rays.len(), mae, chamfer });
    }
    Ok(ForecastReport { horizon: m, frames })
}
