//! Differentiable LiDAR depth rendering from a signed distance field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{alpha_value, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::TemporalField;
use crate::lidarsim::{ground_filter, PointCloud};

/// Rays cast from sensor origins towards observed returns.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    pub ranges: Vec<f64>,
    pub timestamp: f64,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// `o + r d` for every ray.
    pub fn endpoints(&self, ranges: &[f64]) -> Vec<[f64; 3]> {
        self.origins
            .iter()
            .zip(&self.directions)
            .zip(ranges)
            .map(|((o, d), r)| [o[0] + r * d[0], o[1] + r * d[1], o[2] + r * d[2]])
            .collect()
    }

    /// Rays from the cloud's sensor origin through every point, in order.
    pub fn from_cloud(cloud: &PointCloud) -> Result<RayBatch> {
        let o = cloud.sensor_origin();
        let mut batch = RayBatch { origins: Vec::new(), directions: Vec::new(), ranges: Vec::new(), timestamp: cloud.timestamp };
        for p in &cloud.points {
            let v = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if !(r > 0.0) {
                return Err(Error::contract("point coincides with the sensor origin"));
            }
            batch.origins.push(o);
            batch.directions.push([v[0] / r, v[1] / r, v[2] / r]);
            batch.ranges.push(r);
        }
        Ok(batch)
    }

    pub fn select(&self, idx: &[usize]) -> RayBatch {
        RayBatch {
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            directions: idx.iter().map(|&i| self.directions[i]).collect(),
            ranges: idx.iter().map(|&i| self.ranges[i]).collect(),
            timestamp: self.timestamp,
        }
    }
}

/// Ground-filters the cloud and draws `min(n_render, available)` distinct
/// points uniformly. `None` means nothing survived the filter.
pub fn select_render_rays(cloud: &PointCloud, z_thd: f64, n_render: usize, seed: u64) -> Result<Option<RayBatch>> {
    let kept = ground_filter(cloud, z_thd);
    if kept.is_empty() || n_render == 0 {
        return Ok(None);
    }
    let all = RayBatch::from_cloud(&kept)?;
    if n_render >= all.len() {
        return Ok(Some(all));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, all.len(), n_render).into_vec();
    idx.sort_unstable();
    Ok(Some(all.select(&idx)))
}

/// Stratified distances in `[near, far]`: one draw per equal sub-interval,
/// or the sub-interval midpoints when `rng` is `None`.
pub fn sample_along_ray<R: Rng + ?Sized>(n_ray: usize, near: f64, far: f64, rng: Option<&mut R>) -> Result<Vec<f64>> {
    if n_ray == 0 {
        return Err(Error::config("at least one sample per ray is required"));
    }
    if !(near > 0.0 && far > near && far.is_finite()) {
        return Err(Error::config(format!("need 0 < near < far, got near={near}, far={far}")));
    }
    let step = (far - near) / n_ray as f64;
    Ok(match rng {
        Some(rng) => (0..n_ray).map(|i| near + (i as f64 + rng.random::<f64>()) * step).collect(),
        None => (0..n_ray).map(|i| near + (i as f64 + 0.5) * step).collect(),
    })
}

/// Opacity of each interval between consecutive SDF samples.
pub fn alpha_from_sdf(s: &[f64], z: f64) -> Vec<f64> {
    s.windows(2).map(|p| alpha_value(p[0], p[1], z)).collect()
}

/// `T_n = prod_{i<n} (1 - alpha_i)`.
pub fn transmittance(alpha: &[f64]) -> Vec<f64> {
    let mut t = 1.0;
    alpha
        .iter()
        .map(|a| {
            let out = t;
            t *= 1.0 - a;
            out
        })
        .collect()
}

/// Depth of one ray from SDF samples `s` at distances `r`: returns the
/// predicted range and the interval weights `T_n alpha_n`.
pub fn render_depth_values(s: &[f64], r: &[f64], z: f64) -> Result<(f64, Vec<f64>)> {
    if s.len() != r.len() || s.len() < 2 {
        return Err(Error::contract("render_depth needs matching sample lists of length >= 2"));
    }
    let alpha = alpha_from_sdf(s, z);
    let t = transmittance(&alpha);
    let w: Vec<f64> = t.iter().zip(&alpha).map(|(t, a)| t * a).collect();
    let depth = w.iter().zip(r).map(|(w, r)| w * r).sum();
    Ok((depth, w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub n_ray: usize,
    pub near: f64,
    pub far: f64,
    /// Rays whose total weight falls below this are left out of the loss.
    pub min_weight_sum: f64,
    /// Stratified jitter; off places samples at sub-interval midpoints.
    pub jitter: bool,
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ray < 2 {
            return Err(Error::config("rendering needs at least 2 samples per ray"));
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::config(format!("need 0 < near < far, got near={}, far={}", self.near, self.far)));
        }
        if !(0.0..=1.0).contains(&self.min_weight_sum) {
            return Err(Error::config("min_weight_sum must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { n_ray: 48, near: 0.3, far: 40.0, min_weight_sum: 0.05, jitter: true }
    }
}

/// Tape nodes and host-side summaries of one rendered batch.
#[derive(Clone, Debug)]
pub struct Rendered {
    /// `[M]` predicted ranges.
    pub depth: Var,
    /// `[M, N-1]` interval weights.
    pub weights: Var,
    pub weight_sums: Vec<f64>,
}

impl Rendered {
    /// Rays that carry enough weight to count in the loss.
    pub fn surface_mask(&self, min_weight_sum: f64) -> Vec<bool> {
        self.weight_sums.iter().map(|w| *w >= min_weight_sum).collect()
    }
}

/// Renders rays from SDF samples `s [M, N]` at `distances` (row-major `M x N`).
/// Interval `n` contributes its near distance.
pub fn render_depth(tape: &mut Tape, s: Var, log_z: Var, distances: &[f64]) -> Result<Rendered> {
    let (m, n) = match tape.value(s).shape() {
        [m, n] => (*m, *n),
        sh => return Err(Error::contract(format!("render_depth expects [M, N] samples, got {sh:?}"))),
    };
    if distances.len() != m * n {
        return Err(Error::contract("render_depth: distance count mismatch"));
    }
    let alpha = tape.alpha(s, log_z)?;
    let trans = tape.transmittance(alpha)?;
    let weights = tape.mul(trans, alpha)?;
    let near: Vec<f64> = distances.chunks(n).flat_map(|row| row[..n - 1].iter().copied()).collect();
    let depth = tape.row_dot(weights, near)?;
    let weight_sums = tape.value(weights).data().chunks(n - 1).map(|r| r.iter().sum()).collect();
    Ok(Rendered { depth, weights, weight_sums })
}

/// Samples every ray, queries the field at time `t`, and renders.
#[allow(clippy::too_many_arguments)]
pub fn render_rays(
    tape: &mut Tape,
    store: &ParamStore,
    field: &TemporalField,
    grid: Var,
    log_z: Var,
    batch: &RayBatch,
    t: f64,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<Rendered> {
    if batch.is_empty() {
        return Err(Error::contract("cannot render an empty ray batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_ray;
    let mut distances = Vec::with_capacity(batch.len() * n);
    let mut points = Vec::with_capacity(batch.len() * n * 3);
    for (o, d) in batch.origins.iter().zip(&batch.directions) {
        let rs = if cfg.jitter {
            sample_along_ray(n, cfg.near, cfg.far, Some(&mut rng))?
        } else {
            sample_along_ray::<ChaCha8Rng>(n, cfg.near, cfg.far, None)?
        };
        for r in rs {
            distances.push(r);
            points.extend_from_slice(&[o[0] + r * d[0], o[1] + r * d[1], o[2] + r * d[2]]);
        }
    }
    let pts = tape.constant(Tensor::new(vec![batch.len() * n, 3], points)?);
    let s = field.sdf(tape, store, grid, pts, t)?;
    let s = tape.reshape(s, vec![batch.len(), n])?;
    render_depth(tape, s, log_z, &distances)
}

/// Mean `|r - r~|` over rays that found a surface; `None` when none did.
pub fn depth_loss(tape: &mut Tape, rendered: &Rendered, observed: &[f64], min_weight_sum: f64) -> Result<Option<Var>> {
    let mask = rendered.surface_mask(min_weight_sum);
    if !mask.iter().any(|m| *m) {
        return Ok(None);
    }
    tape.masked_l1(rendered.depth, observed.to_vec(), mask).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidarsim::Pose2;

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_from_sdf(&[0.4, 0.4], 3.0), vec![0.0]);
        assert_eq!(alpha_from_sdf(&[0.1, 0.5], 3.0), vec![0.0]);
        let a = alpha_from_sdf(&[1.0, -1.0], 1.0)[0];
        let phi = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((a - (phi(1.0) - phi(-1.0)) / phi(1.0)).abs() < 1e-12);
        assert!((a - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn transmittance_examples() {
        assert_eq!(transmittance(&[0.0, 0.0, 0.0]), vec![1.0; 3]);
        assert_eq!(transmittance(&[0.5, 0.5]), vec![1.0, 0.5]);
    }

    #[test]
    fn empty_space_renders_zero() {
        let (d, w) = render_depth_values(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 10.0).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(w.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn stratified_samples_stay_in_their_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_along_ray(10, 1.0, 11.0, Some(&mut rng)).unwrap();
        for (i, r) in s.iter().enumerate() {
            assert!(*r >= 1.0 + i as f64 && *r < 2.0 + i as f64);
        }
        let one = sample_along_ray(1, 0.3, 2.0, Some(&mut rng)).unwrap();
        assert!(one[0] >= 0.3 && one[0] <= 2.0);
        assert!(sample_along_ray::<ChaCha8Rng>(4, 2.0, 1.0, None).is_err());
    }

    #[test]
    fn select_all_when_budget_exceeds_points() {
        let c = PointCloud::new(
            vec![[3.0, 0.0, 0.0], [4.0, 1.0, -2.0], [5.0, -1.0, 0.5]],
            vec![0.0; 3],
            1,
            0.0,
            Pose2::default(),
        )
        .unwrap();
        let b = select_render_rays(&c, -1.5, 10, 0).unwrap().unwrap();
        assert_eq!(b.len(), 2);
        for (p, q) in b.endpoints(&b.ranges).iter().zip([[3.0, 0.0, 0.0], [5.0, -1.0, 0.5]]) {
            for i in 0..3 {
                assert!((p[i] - q[i]).abs() < 1e-9);
            }
        }
        assert!(select_render_rays(&c, 10.0, 10, 0).unwrap().is_none());
    }

    #[test]
    fn depth_loss_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![2, 3], vec![2.0, -2.0, -3.0, 1.0, -1.0, -3.0]).unwrap());
        let lz = tape.constant(Tensor::scalar(60f64.ln()));
        let out = render_depth(&mut tape, s, lz, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let pred = tape.value(out.depth).data().to_vec();
        let loss = depth_loss(&mut tape, &out, &pred, 0.05).unwrap().unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        let shifted: Vec<f64> = pred.iter().map(|p| p + 0.25).collect();
        let loss = depth_loss(&mut tape, &out, &shifted, 0.05).unwrap().unwrap();
        assert!((tape.scalar(loss) - 0.25).abs() < 1e-12);
        let mixed = [pred[0] - 1.0, pred[1] + 3.0];
        let loss = depth_loss(&mut tape, &out, &mixed, 0.05).unwrap().unwrap();
        assert!((tape.scalar(loss) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_surface_batch_is_skipped() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let lz = tape.constant(Tensor::scalar(0.0));
        let out = render_depth(&mut tape, s, lz, &[1.0, 2.0, 3.0]).unwrap();
        assert!(depth_loss(&mut tape, &out, &[2.0], 0.05).unwrap().is_none());
    }
}
