//! Point cloud to feature grid, ego-action embedding, and the shared
//! recurrent 3-D convolution that rolls the grid forward one frame.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    mlp_forward, sinusoidal_encode, Activation, GridMap, Mlp, MlpSpec, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::lidarsim::{EgoAction, PointCloud};

/// Axis-aligned voxel volume in the reference sensor frame.
///
/// `dims` is `[D, H, W]`: `D` cells along z, `H` along y, `W` along x.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    /// Minimum corner `(x, y, z)` in meters.
    pub min: [f64; 3],
    /// Edge lengths `(x, y, z)` in meters.
    pub extent: [f64; 3],
}

impl Default for GridGeometry {
    fn default() -> Self {
        GridGeometry { dims: [8, 32, 32], min: [0.0, -20.0, -2.0], extent: [40.0, 40.0, 4.0] }
    }
}

impl GridGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config(format!("grid dims {:?} must be positive", self.dims)));
        }
        if !self.extent.iter().all(|e| e.is_finite() && *e > 0.0) || !self.min.iter().all(|m| m.is_finite()) {
            return Err(Error::config("grid extent must be positive and finite"));
        }
        Ok(())
    }

    /// Cells along `(x, y, z)`.
    pub fn cells_xyz(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        let c = self.cells_xyz();
        [self.extent[0] / c[0] as f64, self.extent[1] / c[1] as f64, self.extent[2] / c[2] as f64]
    }

    pub fn diagonal(&self) -> f64 {
        self.extent.iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    pub fn largest_extent(&self) -> f64 {
        self.extent.iter().copied().fold(0.0, f64::max)
    }

    pub fn center(&self) -> [f64; 3] {
        [
            self.min[0] + self.extent[0] / 2.0,
            self.min[1] + self.extent[1] / 2.0,
            self.min[2] + self.extent[2] / 2.0,
        ]
    }

    /// Maps meters into interpolation coordinates; vertex `i` sits at the
    /// centre of voxel `i`.
    pub fn grid_map(&self) -> GridMap {
        let vs = self.voxel_size();
        GridMap {
            scale: [1.0 / vs[0], 1.0 / vs[1], 1.0 / vs[2]],
            offset: [-self.min[0] / vs[0] - 0.5, -self.min[1] / vs[1] - 0.5, -self.min[2] / vs[2] - 0.5],
        }
    }

    /// Unbounded integer voxel coordinates `(x, y, z)` of a point.
    pub fn voxel_key(&self, p: [f64; 3]) -> [i64; 3] {
        let vs = self.voxel_size();
        [
            ((p[0] - self.min[0]) / vs[0]).floor() as i64,
            ((p[1] - self.min[1]) / vs[1]).floor() as i64,
            ((p[2] - self.min[2]) / vs[2]).floor() as i64,
        ]
    }

    /// Flat `D*H*W` index for a point inside the volume.
    pub fn voxel_index(&self, p: [f64; 3]) -> Option<usize> {
        let k = self.voxel_key(p);
        let c = self.cells_xyz();
        if (0..3).any(|i| k[i] < 0 || k[i] >= c[i] as i64) {
            return None;
        }
        Some((k[2] as usize * c[1] + k[1] as usize) * c[0] + k[0] as usize)
    }
}

/// Raw voxel grid `[D, H, W, 1 + d]` plus the number of points that fell outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Voxelized {
    pub grid: Tensor,
    pub dropped: usize,
}

/// Per voxel: occupancy count divided by the largest count, then the mean
/// feature vector of the contained points. Empty voxels stay zero.
pub fn voxelize(cloud: &PointCloud, geom: &GridGeometry) -> Result<Voxelized> {
    geom.validate()?;
    let d = cloud.feature_dim;
    let ch = 1 + d;
    let nvox: usize = geom.dims.iter().product();
    let mut counts = vec![0usize; nvox];
    let mut sums = vec![0.0; nvox * d];
    let mut dropped = 0;
    for (i, &p) in cloud.points.iter().enumerate() {
        match geom.voxel_index(p) {
            Some(v) => {
                counts[v] += 1;
                for (s, f) in sums[v * d..(v + 1) * d].iter_mut().zip(cloud.feature(i)) {
                    *s += f;
                }
            }
            None => dropped += 1,
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut data = vec![0.0; nvox * ch];
    for v in 0..nvox {
        if counts[v] == 0 {
            continue;
        }
        data[v * ch] = counts[v] as f64 / max;
        for j in 0..d {
            data[v * ch + 1 + j] = sums[v * d + j] / counts[v] as f64;
        }
    }
    let [dd, h, w] = geom.dims;
    Ok(Voxelized { grid: Tensor::new(vec![dd, h, w, ch], data)?, dropped })
}

/// Drops a `rate` fraction of the occupied voxels (all points inside them).
/// `floor(rate * occupied)` voxels go, so at least one survives when `rate < 1`.
pub fn mask_augment(cloud: &PointCloud, rate: f64, seed: u64, geom: &GridGeometry) -> Result<PointCloud> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("mask rate {rate} must lie in [0, 1)")));
    }
    let mut groups: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, &p) in cloud.points.iter().enumerate() {
        groups.entry(geom.voxel_key(p)).or_default().push(i);
    }
    let mut keys: Vec<[i64; 3]> = groups.keys().copied().collect();
    let drop = ((rate * keys.len() as f64) + 1e-9).floor() as usize;
    if drop == 0 {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);
    let mut keep = vec![true; cloud.len()];
    for k in &keys[..drop] {
        for &i in &groups[k] {
            keep[i] = false;
        }
    }
    Ok(cloud.select(|i| keep[i]))
}

/// Parameter-free action features: encoded translation then `[sin, cos]` of the rotation.
pub fn action_features(a: &EgoAction, d_sin: usize, base: f64) -> Result<Vec<f64>> {
    let mut f = sinusoidal_encode(&[a.dx, a.dy], d_sin, base)?;
    f.push(a.dtheta.sin());
    f.push(a.dtheta.cos());
    Ok(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Raw grid channels, `1 + d`.
    pub in_channels: usize,
    pub feat_dim: usize,
    pub hidden: [usize; 2],
    pub d_sin: usize,
    pub d_act: usize,
    pub sin_base: f64,
    /// Build the action path and the recurrent convolution.
    pub recurrent: bool,
    /// Concatenate the raw 3-vector action instead of its learned embedding.
    pub raw_action_concat: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 2,
            feat_dim: 128,
            hidden: [16, 64],
            d_sin: 32,
            d_act: 16,
            sin_base: crate::diffcore::DEFAULT_SIN_BASE,
            recurrent: true,
            raw_action_concat: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

impl ConvLayer {
    fn register<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.weight"), vec![cout, 3, 3, 3, cin], 27 * cin, rng)?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]))?;
        Ok(ConvLayer { w, b })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv3d(x, w, Some(b))
    }
}

/// `enc.*`: three dense convolutions; `act.*`: action MLP; `rec.*`: the
/// shared two-layer recurrent convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    enc: [ConvLayer; 3],
    act: Option<Mlp>,
    rec: Option<[ConvLayer; 2]>,
}

impl Encoder {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.feat_dim == 0 || cfg.d_act == 0 || cfg.in_channels == 0 {
            return Err(Error::config("encoder widths must be positive"));
        }
        let [h1, h2] = cfg.hidden;
        let enc = [
            ConvLayer::register(store, "enc.0", cfg.in_channels, h1, rng)?,
            ConvLayer::register(store, "enc.1", h1, h2, rng)?,
            ConvLayer::register(store, "enc.2", h2, cfg.feat_dim, rng)?,
        ];
        let (act, rec) = if cfg.recurrent {
            let (act, act_width) = if cfg.raw_action_concat {
                (None, 3)
            } else {
                let spec = MlpSpec::new(
                    vec![cfg.d_sin + 2, 2 * cfg.d_act, cfg.d_act],
                    vec![Activation::Relu, Activation::None],
                )?;
                (Some(Mlp::register(store, "act", spec, rng)?), cfg.d_act)
            };
            let rec = [
                ConvLayer::register(store, "rec.0", cfg.feat_dim + act_width, cfg.feat_dim, rng)?,
                ConvLayer::register(store, "rec.1", cfg.feat_dim, cfg.feat_dim, rng)?,
            ];
            (act, Some(rec))
        } else {
            (None, None)
        };
        Ok(Encoder { cfg, enc, act, rec })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn has_action_path(&self) -> bool {
        self.rec.is_some()
    }

    /// Raw voxel grid to `[D, H, W, feat_dim]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, raw: &Tensor) -> Result<Var> {
        if raw.shape().len() != 4 || raw.last_dim() != self.cfg.in_channels {
            return Err(Error::contract(format!(
                "encoder expects [D, H, W, {}], got {:?}",
                self.cfg.in_channels,
                raw.shape()
            )));
        }
        let x = tape.constant(raw.clone());
        let h = self.enc[0].apply(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.enc[1].apply(tape, store, h)?;
        let h = tape.relu(h);
        self.enc[2].apply(tape, store, h)
    }

    /// Action to the vector concatenated onto the grid: the learned embedding,
    /// or the raw `(dx, dy, dtheta)` under `raw_action_concat`.
    pub fn embed_action(&self, tape: &mut Tape, store: &ParamStore, a: &EgoAction) -> Result<Var> {
        if !self.cfg.recurrent {
            return Err(Error::config("action embedding requested with the recurrent path disabled"));
        }
        match &self.act {
            None => Ok(tape.constant(Tensor::vector(vec![a.dx, a.dy, a.dtheta]))),
            Some(mlp) => {
                let feats = action_features(a, self.cfg.d_sin, self.cfg.sin_base)?;
                let x = tape.constant(Tensor::vector(feats));
                mlp_forward(tape, store, mlp, x)
            }
        }
    }

    /// One recurrence: broadcast the action over every voxel, concatenate it
    /// in front of the grid channels, and apply the shared convolution.
    pub fn recurrent_step(&self, tape: &mut Tape, store: &ParamStore, grid: Var, action: Var) -> Result<Var> {
        let rec = self
            .rec
            .as_ref()
            .ok_or_else(|| Error::config("recurrent step requested with the recurrent path disabled"))?;
        let shape = tape.value(grid).shape().to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.feat_dim {
            return Err(Error::contract(format!("recurrent step expects a [D, H, W, {}] grid", self.cfg.feat_dim)));
        }
        let tiled = tape.broadcast_rows(action, &shape[..3])?;
        let x = tape.concat(&[tiled, grid])?;
        let h = rec[0].apply(tape, store, x)?;
        let h = tape.relu(h);
        rec[1].apply(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidarsim::Pose2;

    fn geom() -> GridGeometry {
        GridGeometry { dims: [2, 4, 4], min: [0.0, -2.0, -1.0], extent: [4.0, 4.0, 2.0] }
    }

    fn cloud(points: Vec<[f64; 3]>, feats: Vec<f64>) -> PointCloud {
        PointCloud::new(points, feats, 1, 0.0, Pose2::default()).unwrap()
    }

    #[test]
    fn empty_cloud_voxelizes_to_zero() {
        let v = voxelize(&PointCloud::empty(1, 0.0, Pose2::default()), &geom()).unwrap();
        assert!(v.grid.data().iter().all(|x| *x == 0.0));
        assert_eq!(v.grid.shape(), &[2, 4, 4, 2]);
    }

    #[test]
    fn single_point_single_voxel() {
        let v = voxelize(&cloud(vec![[1.5, 0.5, 0.2]], vec![0.7]), &geom()).unwrap();
        let nonzero: Vec<usize> = (0..32).filter(|i| v.grid.data()[i * 2] != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!(v.grid.data()[nonzero[0] * 2] > 0.0);
    }

    #[test]
    fn shared_voxel_averages_features() {
        let v = voxelize(&cloud(vec![[1.1, 0.1, 0.1], [1.2, 0.2, 0.2]], vec![0.2, 0.4]), &geom()).unwrap();
        let idx = geom().voxel_index([1.1, 0.1, 0.1]).unwrap();
        assert_eq!(v.grid.data()[idx * 2], 1.0);
        assert!((v.grid.data()[idx * 2 + 1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn outside_points_are_counted() {
        let v = voxelize(&cloud(vec![[100.0, 0.0, 0.0], [1.0, 0.0, 0.0]], vec![0.0, 0.0]), &geom()).unwrap();
        assert_eq!(v.dropped, 1);
    }

    #[test]
    fn mask_rate_zero_is_identity() {
        let c = cloud(vec![[0.5, 0.5, 0.5], [3.5, 1.5, 0.5]], vec![0.1, 0.2]);
        assert_eq!(mask_augment(&c, 0.0, 3, &geom()).unwrap(), c);
        assert!(mask_augment(&c, 1.0, 3, &geom()).is_err());
    }

    #[test]
    fn mask_keeps_at_least_one_voxel() {
        let c = cloud(vec![[0.5, 0.5, 0.5], [3.5, 1.5, 0.5], [2.5, -1.5, -0.5]], vec![0.1, 0.2, 0.3]);
        let m = mask_augment(&c, 0.999_999, 9, &geom()).unwrap();
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn action_features_layout() {
        let f = action_features(&EgoAction::default(), 8, 10_000.0).unwrap();
        assert_eq!(f, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        for th in [-3.0, -0.4, 0.0, 1.2, 3.1] {
            let f = action_features(&EgoAction { dx: 0.3, dy: -1.0, dtheta: th }, 8, 10_000.0).unwrap();
            assert!((f[8] * f[8] + f[9] * f[9] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_map_puts_vertices_at_voxel_centres() {
        let g = geom();
        let m = g.grid_map();
        let c = m.apply([0.5, -1.5, -0.5]);
        for v in c {
            assert!(v.abs() < 1e-12);
        }
        let c = m.apply([3.5, 1.5, 0.5]);
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] - 3.0).abs() < 1e-12 && (c[2] - 1.0).abs() < 1e-12);
    }
}
