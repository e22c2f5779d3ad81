//! Rigid moving primitives over a ground plane at `z = 0`, with exact ray
//! intersection and exact signed distance.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::pose::Pose2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Full edge lengths along the primitive's local x, y, z.
    Box { size: [f64; 3] },
    /// Vertical cylinder.
    Cylinder { radius: f64, height: f64 },
}

/// A rigid primitive; `center` and `yaw` are its pose at `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 3],
    pub yaw_rate: f64,
}

/// What a ray hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hit {
    Ground,
    Primitive(usize),
}

impl Hit {
    /// Stable integer id: 0 for the ground, `i + 1` for primitive `i`.
    pub fn id(self) -> u64 {
        match self {
            Hit::Ground => 0,
            Hit::Primitive(i) => i as u64 + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub sensor_height: f64,
    pub seed: u64,
    pub ego_start: Pose2,
}

/// Ranges for randomly generated scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomSceneParams {
    pub num_primitives: usize,
    pub max_speed: f64,
    pub sensor_height: f64,
    /// Objects are placed with `x` in this range, ahead of the ego.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Default for RandomSceneParams {
    fn default() -> Self {
        RandomSceneParams {
            num_primitives: 6,
            max_speed: 3.0,
            sensor_height: 1.8,
            x_range: (6.0, 30.0),
            y_range: (-14.0, 14.0),
        }
    }
}

impl Primitive {
    pub fn pose_at(&self, t: f64) -> ([f64; 3], f64) {
        (
            [
                self.center[0] + self.velocity[0] * t,
                self.center[1] + self.velocity[1] * t,
                self.center[2] + self.velocity[2] * t,
            ],
            self.yaw + self.yaw_rate * t,
        )
    }

    fn local(&self, t: f64, p: [f64; 3], d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        let (c, yaw) = self.pose_at(t);
        let (s, co) = yaw.sin_cos();
        let q = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        (
            [co * q[0] + s * q[1], -s * q[0] + co * q[1], q[2]],
            [co * d[0] + s * d[1], -s * d[0] + co * d[1], d[2]],
        )
    }

    /// Exact signed distance at time `t`.
    pub fn sdf(&self, t: f64, p: [f64; 3]) -> f64 {
        let (q, _) = self.local(t, p, [0.0; 3]);
        match self.shape {
            Shape::Box { size } => {
                let d = [
                    q[0].abs() - size[0] / 2.0,
                    q[1].abs() - size[1] / 2.0,
                    q[2].abs() - size[2] / 2.0,
                ];
                let outside = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                outside + d[0].max(d[1]).max(d[2]).min(0.0)
            }
            Shape::Cylinder { radius, height } => {
                let dr = q[0].hypot(q[1]) - radius;
                let dz = q[2].abs() - height / 2.0;
                dr.max(dz).min(0.0) + dr.max(0.0).hypot(dz.max(0.0))
            }
        }
    }

    /// Nearest positive ray parameter hitting the surface at time `t`.
    pub fn intersect(&self, t: f64, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (lo, ld) = self.local(t, o, d);
        match self.shape {
            Shape::Box { size } => slab(lo, ld, [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0]),
            Shape::Cylinder { radius, height } => cylinder(lo, ld, radius, height / 2.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.shape {
            Shape::Box { size } => size.iter().all(|s| s.is_finite() && *s > 0.0),
            Shape::Cylinder { radius, height } => {
                radius.is_finite() && height.is_finite() && radius > 0.0 && height > 0.0
            }
        };
        if !ok {
            return Err(Error::config(format!("degenerate primitive {:?}", self.shape)));
        }
        let finite = self.center.iter().chain(&self.velocity).all(|v| v.is_finite())
            && self.yaw.is_finite()
            && self.yaw_rate.is_finite();
        if !finite {
            return Err(Error::config("primitive pose or motion is not finite"));
        }
        Ok(())
    }
}

fn slab(o: [f64; 3], d: [f64; 3], half: [f64; 3]) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let (mut t0, mut t1) = ((-half[i] - o[i]) * inv, (half[i] - o[i]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    if tmin > 0.0 {
        Some(tmin)
    } else if tmax > 0.0 {
        Some(tmax)
    } else {
        None
    }
}

fn cylinder(o: [f64; 3], d: [f64; 3], r: f64, hz: f64) -> Option<f64> {
    let mut best = f64::INFINITY;
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 0.0 {
        let b = o[0] * d[0] + o[1] * d[1];
        let c = o[0] * o[0] + o[1] * o[1] - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            // numerically stable pair of roots
            let q = -(b + sq.copysign(b));
            let roots = if q != 0.0 { [q / a, c / q] } else { [0.0, 0.0] };
            for t in roots {
                if t > 0.0 && t < best && (o[2] + t * d[2]).abs() <= hz {
                    best = t;
                }
            }
        }
    }
    if d[2] != 0.0 {
        for cap in [-hz, hz] {
            let t = (cap - o[2]) / d[2];
            if t > 0.0 && t < best {
                let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
                if x * x + y * y <= r * r {
                    best = t;
                }
            }
        }
    }
    best.is_finite().then_some(best)
}

fn check_unit(d: [f64; 3]) -> Result<()> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("ray direction {d:?} has norm {n}, expected 1")));
    }
    Ok(())
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>, sensor_height: f64, seed: u64) -> Result<Self> {
        let s = SceneSpec { primitives, sensor_height, seed, ego_start: Pose2::default() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sensor_height.is_finite() && self.sensor_height > 0.0) {
            return Err(Error::config(format!("sensor height {} must be > 0", self.sensor_height)));
        }
        for p in &self.primitives {
            p.validate()?;
        }
        Ok(())
    }

    /// Random scene of boxes and cylinders resting on the ground ahead of the ego.
    pub fn random(seed: u64, params: &RandomSceneParams) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut primitives = Vec::with_capacity(params.num_primitives);
        for _ in 0..params.num_primitives {
            let shape = if rng.random_bool(0.6) {
                Shape::Box {
                    size: [
                        rng.random_range(1.0..5.0),
                        rng.random_range(1.0..3.0),
                        rng.random_range(1.0..2.5),
                    ],
                }
            } else {
                Shape::Cylinder { radius: rng.random_range(0.3..1.0), height: rng.random_range(1.0..3.0) }
            };
            let height = match shape {
                Shape::Box { size } => size[2],
                Shape::Cylinder { height, .. } => height,
            };
            let center = [
                rng.random_range(params.x_range.0..params.x_range.1),
                rng.random_range(params.y_range.0..params.y_range.1),
                height / 2.0,
            ];
            let speed = if params.max_speed > 0.0 { rng.random_range(0.0..params.max_speed) } else { 0.0 };
            let heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            primitives.push(Primitive {
                shape,
                center,
                yaw: rng.random_range(-0.5..0.5),
                velocity: [speed * heading.cos(), speed * heading.sin(), 0.0],
                yaw_rate: if params.max_speed > 0.0 { rng.random_range(-0.1..0.1) } else { 0.0 },
            });
        }
        let mut s = SceneSpec::new(primitives, params.sensor_height, seed)?;
        s.ego_start = Pose2::default();
        Ok(s)
    }

    /// Exact signed distance of the whole scene (ground included) at time `t`.
    pub fn sdf(&self, t: f64, p: [f64; 3]) -> f64 {
        self.primitives.iter().map(|q| q.sdf(t, p)).fold(p[2], f64::min)
    }

    /// Nearest hit of one ray, `None` on a miss.
    pub fn cast_ray(&self, t: f64, o: [f64; 3], d: [f64; 3]) -> Option<(f64, Hit)> {
        let mut best: Option<(f64, Hit)> = None;
        if d[2] < 0.0 && o[2] > 0.0 {
            best = Some((-o[2] / d[2], Hit::Ground));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(r) = p.intersect(t, o, d) {
                if best.is_none_or(|(b, _)| r < b) {
                    best = Some((r, Hit::Primitive(i)));
                }
            }
        }
        best
    }

    /// Ranges for every direction; misses are `+inf`.
    pub fn cast_rays(&self, t: f64, origin: [f64; 3], directions: &[[f64; 3]]) -> Result<Vec<f64>> {
        directions
            .par_iter()
            .map(|&d| {
                check_unit(d)?;
                Ok(self.cast_ray(t, origin, d).map_or(f64::INFINITY, |(r, _)| r))
            })
            .collect()
    }

    /// Serializes to the `key = value` scene file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sensor_height = {}", self.sensor_height);
        let _ = writeln!(s, "seed = {}", self.seed);
        let e = self.ego_start;
        let _ = writeln!(s, "ego_start = {},{},{}", e.x, e.y, e.theta);
        for p in &self.primitives {
            let (kind, size) = match p.shape {
                Shape::Box { size } => ("box", format!("{},{},{}", size[0], size[1], size[2])),
                Shape::Cylinder { radius, height } => ("cylinder", format!("{radius},{height}")),
            };
            let c = p.center;
            let v = p.velocity;
            let _ = writeln!(
                s,
                "primitive = {kind} size={size} center={},{},{} yaw={} velocity={},{},{} yaw_rate={}",
                c[0], c[1], c[2], p.yaw, v[0], v[1], v[2], p.yaw_rate
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut sensor_height = None;
        let mut seed = 0;
        let mut ego_start = Pose2::default();
        let mut primitives = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("scene line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = |e: Error| Error::config(format!("scene line {}: {e}", lineno + 1));
            match key {
                "sensor_height" => sensor_height = Some(parse_f64(value).map_err(ctx)?),
                "seed" => seed = value.parse().map_err(|_| ctx(Error::config("bad seed")))?,
                "ego_start" => {
                    let v = parse_list::<3>(value).map_err(ctx)?;
                    ego_start = Pose2::new(v[0], v[1], v[2]);
                }
                "primitive" => primitives.push(parse_primitive(value).map_err(ctx)?),
                other => return Err(Error::config(format!("scene line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        let sensor_height = sensor_height.ok_or_else(|| Error::config("scene is missing sensor_height"))?;
        let s = SceneSpec { primitives, sensor_height, seed, ego_start };
        s.validate()?;
        Ok(s)
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::config(format!("`{s}` is not a number")))
}

fn parse_list<const N: usize>(s: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return Err(Error::config(format!("expected {N} comma-separated numbers, got `{s}`")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_f64(p)?;
    }
    Ok(out)
}

fn parse_primitive(value: &str) -> Result<Primitive> {
    let mut tokens = value.split_whitespace();
    let kind = tokens.next().ok_or_else(|| Error::config("empty primitive"))?;
    let mut size = None;
    let mut center = None;
    let mut yaw = 0.0;
    let mut velocity = [0.0; 3];
    let mut yaw_rate = 0.0;
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::config(format!("primitive field `{tok}` is not key=value")))?;
        match k {
            "size" => size = Some(v.to_string()),
            "center" => center = Some(parse_list::<3>(v)?),
            "yaw" => yaw = parse_f64(v)?,
            "velocity" => velocity = parse_list::<3>(v)?,
            "yaw_rate" => yaw_rate = parse_f64(v)?,
            other => return Err(Error::config(format!("unknown primitive field `{other}`"))),
        }
    }
    let size = size.ok_or_else(|| Error::config("primitive needs size="))?;
    let shape = match kind {
        "box" => Shape::Box { size: parse_list::<3>(&size)? },
        "cylinder" => {
            let [radius, height] = parse_list::<2>(&size)?;
            Shape::Cylinder { radius, height }
        }
        other => return Err(Error::config(format!("unknown primitive kind `{other}`"))),
    };
    let center = center.ok_or_else(|| Error::config("primitive needs center="))?;
    let p = Primitive { shape, center, yaw, velocity, yaw_rate };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box_ahead() -> SceneSpec {
        SceneSpec::new(
            vec![Primitive {
                shape: Shape::Box { size: [1.0, 1.0, 1.0] },
                center: [5.0, 0.0, 2.0],
                yaw: 0.0,
                velocity: [0.0; 3],
                yaw_rate: 0.0,
            }],
            2.0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn straight_down_hits_ground_at_sensor_height() {
        let s = unit_box_ahead();
        let r = s.cast_rays(0.0, [0.0, 0.0, 2.0], &[[0.0, 0.0, -1.0]]).unwrap();
        assert_eq!(r[0], 2.0);
    }

    #[test]
    fn box_face_range() {
        let s = unit_box_ahead();
        let r = s.cast_rays(0.0, [0.0, 0.0, 2.0], &[[1.0, 0.0, 0.0]]).unwrap();
        assert!((r[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn upward_ray_misses() {
        let s = unit_box_ahead();
        let r = s.cast_rays(0.0, [0.0, 0.0, 2.0], &[[0.0, 0.0, 1.0]]).unwrap();
        assert!(r[0].is_infinite());
    }

    #[test]
    fn non_unit_direction_rejected() {
        let s = unit_box_ahead();
        assert!(matches!(
            s.cast_rays(0.0, [0.0; 3], &[[2.0, 0.0, 0.0]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn moving_box_is_hit_where_it_moved() {
        let mut s = unit_box_ahead();
        s.primitives[0].velocity = [2.0, 0.0, 0.0];
        let r = s.cast_rays(1.5, [0.0, 0.0, 2.0], &[[1.0, 0.0, 0.0]]).unwrap();
        assert!((r[0] - 7.5).abs() < 1e-12);
    }

    #[test]
    fn cylinder_side_and_cap() {
        let s = SceneSpec::new(
            vec![Primitive {
                shape: Shape::Cylinder { radius: 1.0, height: 2.0 },
                center: [10.0, 0.0, 1.0],
                yaw: 0.3,
                velocity: [0.0; 3],
                yaw_rate: 0.0,
            }],
            1.0,
            0,
        )
        .unwrap();
        let side = s.cast_ray(0.0, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]).unwrap();
        assert!((side.0 - 9.0).abs() < 1e-12);
        assert_eq!(side.1, Hit::Primitive(0));
        let cap = s.cast_ray(0.0, [10.0, 0.0, 5.0], [0.0, 0.0, -1.0]).unwrap();
        assert!((cap.0 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_primitive_rejected() {
        let bad = Primitive {
            shape: Shape::Box { size: [1.0, 0.0, 1.0] },
            center: [0.0; 3],
            yaw: 0.0,
            velocity: [0.0; 3],
            yaw_rate: 0.0,
        };
        assert!(SceneSpec::new(vec![bad], 1.0, 0).is_err());
        assert!(SceneSpec::new(vec![], 0.0, 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let s = SceneSpec::random(11, &RandomSceneParams::default()).unwrap();
        let back = SceneSpec::from_text(&s.to_text()).unwrap();
        assert_eq!(s, back);
        assert!(SceneSpec::from_text("sensor_height = 1\nbogus = 3\n").is_err());
    }
}
