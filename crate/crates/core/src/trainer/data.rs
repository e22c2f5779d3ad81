use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lidarsim::{
    generate_sequence, load_cloud, BeamPattern, EgoAction, Pose2, RandomSceneParams, SceneSpec, Sequence,
};

/// Synthetic dataset recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub sequences: usize,
    pub frames: usize,
    pub frame_interval: f64,
    pub scene: RandomSceneParams,
    pub beams: BeamPattern,
    /// Upper bound of the ego forward speed, m/s.
    pub ego_max_speed: f64,
    /// Upper bound of the per-frame heading change, radians.
    pub ego_max_yaw: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sequences: 200,
            frames: 3,
            frame_interval: crate::lidarsim::FRAME_INTERVAL,
            scene: RandomSceneParams::default(),
            beams: BeamPattern::default(),
            ego_max_speed: 5.0,
            ego_max_yaw: 0.1,
            seed: 0,
        }
    }
}

/// A sequence together with the scene that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scene: SceneSpec,
    pub sequence: Sequence,
}

/// Scene and action draws for sequence `index`, independent of the other sequences.
pub fn simulate_episode(cfg: &SimConfig, index: usize) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let scene = SceneSpec::random(rng.random(), &cfg.scene)?;
    let actions = (1..cfg.frames)
        .map(|_| {
            let dx = if cfg.ego_max_speed > 0.0 {
                rng.random_range(0.0..cfg.ego_max_speed) * cfg.frame_interval
            } else {
                0.0
            };
            let dth = if cfg.ego_max_yaw > 0.0 { rng.random_range(-cfg.ego_max_yaw..cfg.ego_max_yaw) } else { 0.0 };
            EgoAction::new(dx, 0.0, dth)
        })
        .collect::<Result<Vec<_>>>()?;
    let sequence = generate_sequence(&scene, cfg.frames, &cfg.beams, &actions, 0.0, cfg.frame_interval)?;
    Ok(Episode { scene, sequence })
}

pub fn simulate_dataset(cfg: &SimConfig) -> Result<Vec<Episode>> {
    if cfg.sequences == 0 {
        return Err(Error::config("simulation needs at least one sequence"));
    }
    (0..cfg.sequences).into_par_iter().map(|i| simulate_episode(cfg, i)).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes `seq_XXXX/{frame_NNN.trnd, actions.csv, poses.csv, scene.txt}` and a
/// `manifest.txt` of `sha256  relative/path` lines.
pub fn write_dataset(dir: &Path, episodes: &[Episode]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (s, ep) in episodes.iter().enumerate() {
        let rel = PathBuf::from(format!("seq_{s:04}"));
        let sdir = dir.join(&rel);
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for (n, c) in ep.sequence.clouds.iter().enumerate() {
            let mut bytes = Vec::new();
            crate::lidarsim::write_cloud(c, &mut bytes).map_err(|e| Error::io(sdir.join("frame"), e))?;
            files.push((format!("frame_{n:03}.trnd"), bytes));
        }
        let mut actions = String::from("dx,dy,dtheta\n");
        for a in &ep.sequence.actions {
            writeln!(actions, "{},{},{}", a.dx, a.dy, a.dtheta).expect("string write");
        }
        files.push(("actions.csv".into(), actions.into_bytes()));
        let mut poses = String::from("frame,t,x,y,theta\n");
        for (n, c) in ep.sequence.clouds.iter().enumerate() {
            let p = c.sensor_pose;
            writeln!(poses, "{n},{},{},{},{}", c.timestamp, p.x, p.y, p.theta).expect("string write");
        }
        files.push(("poses.csv".into(), poses.into_bytes()));
        files.push(("scene.txt".into(), ep.scene.to_text().into_bytes()));
        for (name, bytes) in files {
            write_file(&sdir.join(&name), &bytes)?;
            writeln!(manifest, "{}  {}/{name}", sha256_hex(&bytes), rel.display()).expect("string write");
        }
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Re-hashes every file listed in the manifest. Returns the listed paths.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let mpath = dir.join(MANIFEST);
    let text = read_text(&mpath)?;
    let mut listed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (sum, rel) = line
            .split_once("  ")
            .ok_or_else(|| Error::format(&mpath, format!("line {}: expected `sha256  path`", i + 1)))?;
        let path = dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != sum {
            return Err(Error::format(&path, "checksum does not match the manifest"));
        }
        listed.push(rel.to_string());
    }
    Ok(listed)
}

fn parse_rows(path: &Path, text: &str, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if vals.len() != width {
            return Err(Error::format(path, format!("line {}: expected {width} columns", i + 1)));
        }
        rows.push(vals);
    }
    Ok(rows)
}

/// Loads one sequence directory; sensor poses come from `poses.csv`.
pub fn load_sequence(sdir: &Path) -> Result<Episode> {
    let apath = sdir.join("actions.csv");
    let actions = parse_rows(&apath, &read_text(&apath)?, 3)?
        .into_iter()
        .map(|r| EgoAction::new(r[0], r[1], r[2]))
        .collect::<Result<Vec<_>>>()?;
    let ppath = sdir.join("poses.csv");
    let poses = parse_rows(&ppath, &read_text(&ppath)?, 5)?;
    if poses.len() != actions.len() + 1 {
        return Err(Error::format(&ppath, format!("{} poses for {} actions", poses.len(), actions.len())));
    }
    let mut clouds = Vec::with_capacity(poses.len());
    for (n, row) in poses.iter().enumerate() {
        let mut c = load_cloud(&sdir.join(format!("frame_{n:03}.trnd")))?;
        let pose = Pose2::new(row[2], row[3], row[4]);
        c.sensor_pose = pose;
        c.frame_pose = pose;
        clouds.push(c);
    }
    let spath = sdir.join("scene.txt");
    let scene = SceneSpec::from_text(&read_text(&spath)?)?;
    Ok(Episode { scene, sequence: Sequence { clouds, actions } })
}

/// Verifies the manifest, then loads every `seq_*` directory in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Episode>> {
    let listed = verify_manifest(dir)?;
    let mut seqs: Vec<&str> = listed.iter().filter_map(|p| p.split('/').next()).collect();
    seqs.dedup();
    if seqs.is_empty() {
        return Err(Error::format(dir.join(MANIFEST), "manifest lists no sequences"));
    }
    seqs.iter().map(|s| load_sequence(&dir.join(s))).collect()
}
