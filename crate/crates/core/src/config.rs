//! Flat `key = value` run configuration with `#` comments.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown and repeated keys are rejected. [`RunConfig::to_text`] writes
//! every key, and parsing that text gives back the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diffcore::{BoundsPolicy, Precision};
use crate::error::{Error, Result};
use crate::trainer::{LrSchedule, SimConfig, TrainConfig};

/// Options that steer a run without changing what is learned.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Record `wall_ms` as 0 so metrics files are reproducible byte for byte.
    pub zero_wall_ms: bool,
    pub eval_horizon: usize,
    pub eval_max_rays: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { checkpoint_every: 500, zero_wall_ms: false, eval_horizon: 1, eval_max_rays: 512 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    /// Dataset directory written by `simulate` and read by training and evaluation.
    pub data: PathBuf,
    /// Checkpoints and metrics go here.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data: PathBuf::from("data"), out: PathBuf::from("runs/default") }
    }
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("checkpoint.trck")
    }

    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }
}

/// Everything a command needs: simulator, model, training, run options, paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Drives both the simulator and the trainer.
    pub seed: u64,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub run: RunOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            run: RunOptions::default(),
            paths: Paths::default(),
        }
    }
}

trait Value: Sized {
    fn show(&self) -> String;
    fn read(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn read(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
        }
    )*};
}

scalar_value!(f64, u64, usize);

impl Value for bool {
    fn show(&self) -> String {
        if *self { "on" } else { "off" }.into()
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            _ => Err(format!("expected on/off, got `{s}`")),
        }
    }
}

impl Value for PathBuf {
    fn show(&self) -> String {
        self.display().to_string()
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
}

/// `auto` stands for `None`.
impl Value for Option<f64> {
    fn show(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            f64::read(s).map(Some)
        }
    }
}

fn read_list<T: Value>(s: &str, n: usize) -> std::result::Result<Vec<T>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(format!("expected {n} comma-separated values, got {}", parts.len()));
    }
    parts.into_iter().map(T::read).collect()
}

fn show_list<T: Value>(items: &[T]) -> String {
    items.iter().map(Value::show).collect::<Vec<_>>().join(",")
}

impl<T: Value + Copy, const N: usize> Value for [T; N] {
    fn show(&self) -> String {
        show_list(self)
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        let v = read_list::<T>(s, N)?;
        Ok(std::array::from_fn(|i| v[i]))
    }
}

impl Value for (f64, f64) {
    fn show(&self) -> String {
        show_list(&[self.0, self.1])
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        let v = read_list::<f64>(s, 2)?;
        Ok((v[0], v[1]))
    }
}

macro_rules! enum_value {
    ($t:ident { $($v:ident => $s:literal),* }) => {
        impl Value for $t {
            fn show(&self) -> String {
                match self { $($t::$v => $s.into()),* }
            }
            fn read(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($t::$v),)*
                    _ => Err(format!("expected one of: {}", [$($s),*].join(", "))),
                }
            }
        }
    };
}

enum_value!(LrSchedule { Cosine => "cosine", Constant => "constant" });
enum_value!(BoundsPolicy { Clamp => "clamp", Error => "error" });
enum_value!(Precision { F64 => "f64", F32 => "f32" });

struct Key {
    name: &'static str,
    /// Part of the configuration hash.
    hashed: bool,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

macro_rules! key {
    ($name:literal, $hashed:expr, $($field:ident).+) => {
        Key {
            name: $name,
            hashed: $hashed,
            get: |c| c.$($field).+.show(),
            set: |c, v| {
                c.$($field).+ = Value::read(v)?;
                Ok(())
            },
        }
    };
}

fn keys() -> Vec<Key> {
    vec![
        Key {
            name: "seed",
            hashed: true,
            get: |c| c.seed.show(),
            set: |c, v| {
                c.seed = Value::read(v)?;
                c.sim.seed = c.seed;
                c.train.seed = c.seed;
                Ok(())
            },
        },
        Key {
            name: "sensor_height",
            hashed: true,
            get: |c| c.train.sensor_height.show(),
            set: |c, v| {
                c.train.sensor_height = Value::read(v)?;
                c.sim.scene.sensor_height = c.train.sensor_height;
                Ok(())
            },
        },
        key!("sim.sequences", true, sim.sequences),
        key!("sim.frames", true, sim.frames),
        key!("sim.frame_interval", true, sim.frame_interval),
        key!("sim.num_primitives", true, sim.scene.num_primitives),
        key!("sim.max_speed", true, sim.scene.max_speed),
        key!("sim.x_range", true, sim.scene.x_range),
        key!("sim.y_range", true, sim.scene.y_range),
        key!("sim.azimuth_count", true, sim.beams.azimuth_count),
        key!("sim.elevation_count", true, sim.beams.elevation_count),
        key!("sim.horizontal_fov", true, sim.beams.horizontal_fov),
        key!("sim.elevation_min", true, sim.beams.elevation_min),
        key!("sim.elevation_max", true, sim.beams.elevation_max),
        key!("sim.range_cap", true, sim.beams.range_cap),
        key!("sim.ego_max_speed", true, sim.ego_max_speed),
        key!("sim.ego_max_yaw", true, sim.ego_max_yaw),
        key!("grid.dims", true, train.model.grid.dims),
        key!("grid.min", true, train.model.grid.min),
        key!("grid.extent", true, train.model.grid.extent),
        key!("model.point_features", true, train.model.point_features),
        key!("model.feat_dim", true, train.model.feat_dim),
        key!("model.enc_hidden", true, train.model.enc_hidden),
        key!("model.d_sin", true, train.model.d_sin),
        key!("model.d_act", true, train.model.d_act),
        key!("model.sin_base", true, train.model.sin_base),
        key!("model.field_width", true, train.model.field_width),
        key!("model.field_layers", true, train.model.field_layers),
        key!("model.sdf_out_bias", true, train.model.sdf_out_bias),
        key!("model.z_init", true, train.model.z_init),
        key!("model.recurrent", true, train.model.recurrent),
        key!("model.temporal_field", true, train.model.temporal_field),
        key!("model.raw_action_concat", true, train.model.raw_action_concat),
        key!("model.bounds", true, train.model.bounds),
        key!("model.precision", true, train.model.precision),
        key!("train.lr", true, train.lr),
        key!("train.schedule", true, train.schedule),
        key!("train.total_steps", true, train.total_steps),
        key!("train.steps_per_epoch", true, train.steps_per_epoch),
        key!("train.mask_rate", true, train.mask_rate),
        key!("train.n_render", true, train.n_render),
        key!("train.n_ray", true, train.n_ray),
        key!("train.near", true, train.near),
        key!("train.far", true, train.far),
        key!("train.min_weight_sum", true, train.min_weight_sum),
        key!("train.jitter", true, train.jitter),
        key!("train.curriculum_epochs", true, train.curriculum_epochs),
        key!("train.k_max", true, train.k_max),
        key!("train.decay_base", true, train.decay_base),
        key!("train.reconstruction_only", true, train.reconstruction_only),
        key!("train.z_thd", true, train.z_thd),
        key!("run.checkpoint_every", false, run.checkpoint_every),
        key!("run.zero_wall_ms", false, run.zero_wall_ms),
        key!("eval.horizon", false, run.eval_horizon),
        key!("eval.max_rays", false, run.eval_max_rays),
        key!("path.data", false, paths.data),
        key!("path.out", false, paths.out),
    ]
}

/// Every accepted key, in file order.
pub fn key_names() -> Vec<&'static str> {
    keys().iter().map(|k| k.name).collect()
}

fn split_line(line: &str) -> Option<&str> {
    let body = line.split_once('#').map_or(line, |(b, _)| b).trim();
    (!body.is_empty()).then_some(body)
}

impl RunConfig {
    /// Sets one key; `value` is the text after `=`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let table = keys();
        let k = table
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
        (k.set)(self, value.trim()).map_err(|e| Error::config(format!("{key}: {e}")))
    }

    /// Applies a `key=value` override, as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Parses a configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let Some(body) = split_line(line) else { continue };
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: `{k}` given twice", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in keys() {
            writeln!(out, "{} = {}", k.name, (k.get)(self)).expect("string write");
        }
        out
    }

    /// SHA-256 over the hashed keys. Paths and run options are left out, so
    /// moving a run or changing its checkpoint cadence keeps the hash.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for k in keys().into_iter().filter(|k| k.hashed) {
            h.update(format!("{}={}\n", k.name, (k.get)(self)).as_bytes());
        }
        h.finalize().into()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sim.beams.validate()?;
        if self.sim.frames < 1 || self.sim.sequences < 1 {
            return Err(Error::config("simulation needs at least one sequence of one frame"));
        }
        if !(self.sim.frame_interval > 0.0) {
            return Err(Error::config("frame interval must be positive"));
        }
        if self.run.eval_max_rays == 0 {
            return Err(Error::config("eval.max_rays must be positive"));
        }
        Ok(())
    }
}
