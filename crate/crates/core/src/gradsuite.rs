//! Finite-difference checks over small instances of every differentiable
//! stage: encodings, interpolation, the field, rendering, the loss, the
//! encoder and the recurrence, and the assembled pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    frequency_ladder, mlp_forward, Activation, BoundsPolicy, GradCheck, GradCheckReport, GridMap, Mlp, MlpSpec,
    ParamStore, Tape, Tensor, Var,
};
use crate::encoder::{Encoder, EncoderConfig, GridGeometry};
use crate::error::Result;
use crate::field::{FieldConfig, TemporalField};
use crate::lidarsim::{EgoAction, PointCloud, Pose2};
use crate::renderer::{depth_loss, render_depth, render_rays, RayBatch, RenderConfig};
use crate::trainer::{Model, ModelConfig};

/// Relative-error budget every case must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub module: &'static str,
    pub case: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passes(GRADCHECK_TOLERANCE)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values whose pairwise gaps and distance from zero exceed `gap`, so a
/// finite step never straddles a kink.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn probe(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
    let n = tape.value(x).numel();
    let c = uniform(&mut rng, n, -1.0, 1.0);
    tape.dot(x, c)
}

/// Redraws a bias offset until no finite-difference step of `check` crosses
/// a kink, then returns that report. Zero biases over zero-padded inputs put
/// relu units exactly on their kink, so some offset is always applied. If
/// every draw crosses one, the draw with the fewest crossings is reported.
fn check_settled<F>(store: &mut ParamStore, rng: &mut ChaCha8Rng, check: &GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Copy,
{
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with(".bias")).map(|(id, _)| id).collect();
    let base: Vec<Vec<f64>> = ids.iter().map(|&id| store.value(id).data().to_vec()).collect();
    let mut best: Option<GradCheckReport> = None;
    for _ in 0..SETTLE_ATTEMPTS {
        for (&id, b) in ids.iter().zip(&base) {
            for (v, b) in store.value_mut(id).iter_mut().zip(b) {
                *v = b + rng.random_range(-0.3..0.3);
            }
        }
        let report = check.run(store, f)?;
        if report.kink_crossings == 0 {
            return Ok(report);
        }
        if best.as_ref().is_none_or(|b| report.kink_crossings < b.kink_crossings) {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one attempt"))
}

const SETTLE_ATTEMPTS: usize = 50;

type Case = fn(u64, &GradCheck) -> Result<GradCheckReport>;

fn sinusoidal_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.add("x", Tensor::new(vec![3, 2], uniform(&mut rng, 6, -2.0, 2.0))?)?;
    let freqs = frequency_ladder(8, 2, 100.0)?;
    gc.run(&store, |tape, s| {
        let x = tape.param(s, 0);
        let e = tape.sinusoidal(x, &freqs)?;
        probe(tape, e, seed)
    })
}

fn trilinear_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.add("grid", Tensor::new(vec![3, 3, 4, 2], uniform(&mut rng, 72, -1.0, 1.0))?)?;
    // keep every coordinate well inside a cell
    let pts: Vec<f64> = (0..5)
        .flat_map(|_| {
            let ix = rng.random_range(0..3) as f64;
            let iy = rng.random_range(0..2) as f64;
            let iz = rng.random_range(0..2) as f64;
            [ix + rng.random_range(0.1..0.9), iy + rng.random_range(0.1..0.9), iz + rng.random_range(0.1..0.9)]
        })
        .collect();
    store.add("points", Tensor::new(vec![5, 3], pts)?)?;
    gc.run(&store, |tape, s| {
        let g = tape.param(s, 0);
        let p = tape.param(s, 1);
        let f = tape.trilinear(g, p, GridMap::IDENTITY, BoundsPolicy::Clamp)?;
        probe(tape, f, seed)
    })
}

fn mlp_l1_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let spec = MlpSpec::uniform(vec![3, 5, 2], Activation::Softplus)?;
    let mlp = Mlp::register(&mut store, "mlp", spec, &mut rng)?;
    let x = Tensor::new(vec![4, 3], uniform(&mut rng, 12, -1.0, 1.0))?;
    // targets far from the outputs keep the absolute value smooth
    let target: Vec<f64> = away_from_zero(&mut rng, 8, 0.5).into_iter().map(|v| v * 10.0).collect();
    gc.run(&store, |tape, s| {
        let xv = tape.constant(x.clone());
        let y = mlp_forward(tape, s, &mlp, xv)?;
        tape.masked_l1(y, target.clone(), vec![true; 8])
    })
}

fn sigmoid_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.add("s", Tensor::vector(uniform(&mut rng, 6, -3.0, 3.0)))?;
    store.add("log_z", Tensor::scalar(rng.random_range(-0.5..1.5)))?;
    gc.run(&store, |tape, s| {
        let sv = tape.param(s, 0);
        let lz = tape.param(s, 1);
        let z = tape.exp(lz);
        let z6 = tape.broadcast_rows(z, &[6])?;
        let z6 = tape.reshape(z6, vec![6])?;
        let zs = tape.mul(sv, z6)?;
        let phi = tape.sigmoid(zs);
        probe(tape, phi, seed)
    })
}

fn micro_geometry() -> GridGeometry {
    GridGeometry { dims: [2, 3, 3], min: [0.0, -3.0, -1.5], extent: [6.0, 6.0, 3.0] }
}

fn field_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = FieldConfig { feat_dim: 3, d_sin: 4, width: 6, layers: 3, ..FieldConfig::default() };
    let field = TemporalField::register(&mut store, cfg, micro_geometry(), &mut rng)?;
    let grid = store.add("grid", Tensor::new(vec![2, 3, 3, 3], uniform(&mut rng, 54, -1.0, 1.0))?)?;
    let pts = Tensor::new(vec![6, 3], {
        let mut v = Vec::new();
        for _ in 0..6 {
            // interior of a voxel, away from the centres where the stencil switches
            v.push(rng.random_range(0.2..0.8) * 2.0 + 2.0 * rng.random_range(0..2) as f64 + 1.0);
            v.push(rng.random_range(0.2..0.8) * 2.0 - 2.0 + 2.0 * rng.random_range(0..2) as f64);
            v.push(rng.random_range(-0.3..0.3));
        }
        v
    })?;
    let t = rng.random_range(0.0..1.5);
    gc.run(&store, |tape, s| {
        let g = tape.param(s, grid);
        let p = tape.constant(pts.clone());
        let sd = field.sdf(tape, s, g, p, t)?;
        probe(tape, sd, seed)
    })
}

/// SDF rows that descend through zero with gaps large enough to avoid the
/// clamp kink, plus some ascending pairs that stay clamped.
fn sdf_rows(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<f64> {
    let mut s = Vec::with_capacity(m * n);
    for _ in 0..m {
        let mut v = rng.random_range(0.5..2.0);
        for k in 0..n {
            s.push(v);
            let down = k % 3 != 2;
            let step = rng.random_range(0.1..0.6);
            v += if down { -step } else { step };
        }
    }
    s
}

fn render_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (3, 7);
    let mut store = ParamStore::new();
    store.add("s", Tensor::new(vec![m, n], sdf_rows(&mut rng, m, n))?)?;
    store.add("log_z", Tensor::scalar(rng.random_range(0.0..1.2)))?;
    let dist: Vec<f64> = (0..m).flat_map(|_| (0..n).map(|k| 1.0 + k as f64 * 0.7)).collect();
    gc.run(&store, |tape, s| {
        let sv = tape.param(s, 0);
        let lz = tape.param(s, 1);
        let out = render_depth(tape, sv, lz, &dist)?;
        let w = probe(tape, out.weights, seed)?;
        let d = probe(tape, out.depth, seed + 1)?;
        tape.add(w, d)
    })
}

fn loss_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (4, 6);
    let mut store = ParamStore::new();
    store.add("s", Tensor::new(vec![m, n], sdf_rows(&mut rng, m, n))?)?;
    store.add("log_z", Tensor::scalar(rng.random_range(0.0..1.2)))?;
    let dist: Vec<f64> = (0..m).flat_map(|_| (0..n).map(|k| 1.0 + k as f64)).collect();
    let depth = |tape: &mut Tape, s: &ParamStore| {
        let sv = tape.param(s, 0);
        let lz = tape.param(s, 1);
        render_depth(tape, sv, lz, &dist)
    };
    // targets half a metre either side of the prediction keep the L1 smooth
    let mut tape = Tape::new();
    let out = depth(&mut tape, &store)?;
    let observed: Vec<f64> =
        tape.value(out.depth).data().iter().enumerate().map(|(i, d)| d + if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
    gc.run(&store, |tape, s| {
        let out = depth(tape, s)?;
        Ok(depth_loss(tape, &out, &observed, 0.0)?.expect("rays carry weight"))
    })
}

fn micro_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Encoder> {
    let cfg = EncoderConfig {
        in_channels: 2,
        feat_dim: 3,
        hidden: [3, 3],
        d_sin: 4,
        d_act: 2,
        sin_base: 100.0,
        recurrent: true,
        raw_action_concat: false,
    };
    Encoder::register(store, cfg, rng)
}

fn encoder_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = micro_encoder(&mut store, &mut rng)?;
    let raw = Tensor::new(vec![2, 3, 3, 2], uniform(&mut rng, 36, 0.0, 1.0))?;
    let f = |tape: &mut Tape, s: &ParamStore| {
        let g = enc.encode(tape, s, &raw)?;
        probe(tape, g, seed)
    };
    check_settled(&mut store, &mut rng, &GradCheck { max_elements: Some(24), ..gc.clone() }, f)
}

fn recurrent_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = micro_encoder(&mut store, &mut rng)?;
    let grid = store.add("grid", Tensor::new(vec![2, 3, 3, 3], uniform(&mut rng, 54, -1.0, 1.0))?)?;
    let a = EgoAction::new(rng.random_range(0.0..2.0), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3))?;
    let f = |tape: &mut Tape, s: &ParamStore| {
        let g = tape.param(s, grid);
        let act = enc.embed_action(tape, s, &a)?;
        let next = enc.recurrent_step(tape, s, g, act)?;
        probe(tape, next, seed)
    };
    check_settled(&mut store, &mut rng, &GradCheck { max_elements: Some(24), ..gc.clone() }, f)
}

/// Micro pipeline: encoder, one recurrent step, field, renderer and loss on
/// four rays with eight samples each.
fn pipeline_case(seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        grid: micro_geometry(),
        feat_dim: 2,
        enc_hidden: [2, 2],
        d_sin: 4,
        d_act: 2,
        sin_base: 100.0,
        field_width: 4,
        field_layers: 2,
        z_init: 2.0,
        sdf_out_bias: 0.0,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, seed)?;
    let points = (0..12).map(|_| [rng.random_range(0.5..5.5), rng.random_range(-2.5..2.5), rng.random_range(-1.0..1.0)]);
    let pts: Vec<[f64; 3]> = points.collect();
    let feats = uniform(&mut rng, 12, 0.0, 1.0);
    let cloud = PointCloud::new(pts, feats, 1, 0.0, Pose2::default())?;
    let action = EgoAction::new(0.4, 0.1, 0.05)?;
    let origin = [0.0, 0.0, 0.0];
    let dirs: Vec<[f64; 3]> = (0..4)
        .map(|i| {
            let a = -0.4 + 0.25 * i as f64;
            [a.cos() * 0.98, a.sin() * 0.98, -0.2]
        })
        .map(|d: [f64; 3]| {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            [d[0] / n, d[1] / n, d[2] / n]
        })
        .collect();
    let batch = RayBatch {
        origins: vec![origin; 4],
        directions: dirs,
        ranges: vec![30.0, 0.05, 30.0, 0.05],
        timestamp: 0.5,
    };
    let rcfg = RenderConfig { n_ray: 8, near: 0.3, far: 6.0, min_weight_sum: 0.0, jitter: true };
    let input = crate::encoder::voxelize(&cloud, &model.cfg.grid)?.grid;
    let (encoder, field, log_z) = (model.encoder.clone(), model.field.clone(), model.log_z);
    let f = |tape: &mut Tape, s: &ParamStore| {
        let g0 = encoder.encode(tape, s, &input)?;
        let act = encoder.embed_action(tape, s, &action)?;
        let g1 = encoder.recurrent_step(tape, s, g0, act)?;
        let lz = tape.param(s, log_z);
        let out = render_rays(tape, s, &field, g1, lz, &batch, 0.5, &rcfg, seed)?;
        Ok(depth_loss(tape, &out, &batch.ranges, 0.0)?.expect("weights are positive"))
    };
    check_settled(&mut model.store, &mut rng, &GradCheck { max_elements: Some(12), ..gc.clone() }, f)
}

/// `(module, case, check)` for every stage.
pub const CASES: &[(&str, &str, Case)] = &[
    ("diffcore", "sinusoidal", sinusoidal_case),
    ("diffcore", "trilinear", trilinear_case),
    ("diffcore", "mlp_l1", mlp_l1_case),
    ("diffcore", "sigmoid", sigmoid_case),
    ("field", "sdf", field_case),
    ("renderer", "alpha_transmittance_depth", render_case),
    ("renderer", "depth_loss", loss_case),
    ("encoder", "encode", encoder_case),
    ("encoder", "recurrent_step", recurrent_case),
    ("renderer", "pipeline", pipeline_case),
];

/// Runs every case for each seed. `fault` corrupts one op's backward rule.
pub fn run_suite(seeds: &[u64], step: f64, fault: Option<&str>) -> Result<Vec<CaseResult>> {
    let gc = GradCheck { step, fault: fault.map(str::to_string), ..GradCheck::default() };
    let mut out = Vec::new();
    for &seed in seeds {
        for &(module, case, f) in CASES {
            out.push(CaseResult { module, case, seed, report: f(seed, &gc)? });
        }
    }
    Ok(out)
}
