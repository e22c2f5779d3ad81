use rayon::prelude::*;

use super::cloud::PointCloud;
use super::pose::{EgoAction, Pose2};
use super::scene::{Hit, SceneSpec};
use crate::error::{Error, Result};

/// Azimuth x elevation grid of beams in the sensor frame (x forward, z up).
#[derive(Clone, Debug, PartialEq)]
pub struct BeamPattern {
    pub azimuth_count: usize,
    pub elevation_count: usize,
    /// Full horizontal field of view, radians, centred on +x.
    pub horizontal_fov: f64,
    pub elevation_min: f64,
    pub elevation_max: f64,
    /// Returns farther than this are dropped.
    pub range_cap: f64,
}

impl Default for BeamPattern {
    fn default() -> Self {
        BeamPattern {
            azimuth_count: 32,
            elevation_count: 16,
            horizontal_fov: 120f64.to_radians(),
            elevation_min: (-15f64).to_radians(),
            elevation_max: 5f64.to_radians(),
            range_cap: 40.0,
        }
    }
}

fn spread(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    if count == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

impl BeamPattern {
    pub fn validate(&self) -> Result<()> {
        if self.azimuth_count == 0 || self.elevation_count == 0 {
            return Err(Error::config("beam pattern has no beams"));
        }
        if !(self.range_cap > 0.0) || self.elevation_min > self.elevation_max {
            return Err(Error::config("beam pattern range cap or elevation span is invalid"));
        }
        Ok(())
    }

    /// Unit directions, elevation-major.
    pub fn directions(&self) -> Vec<[f64; 3]> {
        let az = spread(self.azimuth_count, -self.horizontal_fov / 2.0, self.horizontal_fov / 2.0);
        let el = spread(self.elevation_count, self.elevation_min, self.elevation_max);
        let mut out = Vec::with_capacity(az.len() * el.len());
        for &e in &el {
            let (se, ce) = e.sin_cos();
            for &a in &az {
                let (sa, ca) = a.sin_cos();
                out.push([ce * ca, ce * sa, se]);
            }
        }
        out
    }
}

/// One beam's return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamReturn {
    /// Unit direction in the sensor frame.
    pub direction: [f64; 3],
    pub range: f64,
    pub hit: Hit,
}

/// Intensity surrogate: the hit id hashed into `[0, 1]`.
pub fn intensity_of(hit: Hit) -> f64 {
    let mut z = hit.id().wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Casts every beam from `pose` at time `t`; misses and returns beyond the
/// range cap are dropped.
pub fn scan(scene: &SceneSpec, t: f64, pose: Pose2, pattern: &BeamPattern) -> Result<Vec<BeamReturn>> {
    pattern.validate()?;
    let origin = [pose.x, pose.y, scene.sensor_height];
    Ok(pattern
        .directions()
        .into_par_iter()
        .filter_map(|d| {
            let (r, hit) = scene.cast_ray(t, origin, pose.rotate_to_world(d))?;
            (r <= pattern.range_cap).then_some(BeamReturn { direction: d, range: r, hit })
        })
        .collect())
}

/// Builds the sensor-frame point cloud of one scan.
pub fn scan_cloud(scene: &SceneSpec, t: f64, pose: Pose2, pattern: &BeamPattern) -> Result<PointCloud> {
    let returns = scan(scene, t, pose, pattern)?;
    let points = returns
        .iter()
        .map(|b| [b.direction[0] * b.range, b.direction[1] * b.range, b.direction[2] * b.range])
        .collect();
    let features = returns.iter().map(|b| intensity_of(b.hit)).collect();
    PointCloud::new(points, features, 1, t, pose)
}

/// A simulated sequence: `k` clouds, each in its own sensor frame, and the
/// `k - 1` ego actions between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub clouds: Vec<PointCloud>,
    pub actions: Vec<EgoAction>,
}

impl Sequence {
    pub fn poses(&self) -> Vec<Pose2> {
        self.clouds.iter().map(|c| c.sensor_pose).collect()
    }
}

/// Integrates the ego pose from `actions` and scans the moving scene at
/// `t_start + n * dt` for `n = 0..k`.
pub fn generate_sequence(
    scene: &SceneSpec,
    k: usize,
    pattern: &BeamPattern,
    actions: &[EgoAction],
    t_start: f64,
    dt: f64,
) -> Result<Sequence> {
    if k == 0 {
        return Err(Error::config("a sequence needs at least one frame"));
    }
    if actions.len() + 1 != k {
        return Err(Error::contract(format!("{k} frames need {} actions, got {}", k - 1, actions.len())));
    }
    pattern.validate()?;
    let mut pose = scene.ego_start;
    let mut clouds = Vec::with_capacity(k);
    for n in 0..k {
        if n > 0 {
            actions[n - 1].validate()?;
            pose = pose.then(&actions[n - 1]);
        }
        clouds.push(scan_cloud(scene, t_start + n as f64 * dt, pose, pattern)?);
    }
    Ok(Sequence { clouds, actions: actions.to_vec() })
}
