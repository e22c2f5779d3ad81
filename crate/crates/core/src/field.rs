//! Time-conditioned signed distance field over a feature grid.

use rand::Rng;

use crate::diffcore::{
    frequency_ladder, mlp_forward, Activation, BoundsPolicy, Mlp, MlpSpec, ParamStore, Tape, Tensor, Var,
};
use crate::encoder::GridGeometry;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    pub feat_dim: usize,
    pub d_sin: usize,
    pub sin_base: f64,
    pub width: usize,
    /// Affine layers in the MLP.
    pub layers: usize,
    /// Initial value of the output bias, meters.
    pub out_bias: f64,
    /// Feed the encoded timestamp to the MLP.
    pub temporal: bool,
    pub bounds: BoundsPolicy,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            feat_dim: 128,
            d_sin: 32,
            sin_base: crate::diffcore::DEFAULT_SIN_BASE,
            width: 64,
            layers: 4,
            out_bias: 0.5,
            temporal: true,
            bounds: BoundsPolicy::Clamp,
        }
    }
}

/// `sdf.*`: MLP over `[p normalized, encoded t, grid feature at p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalField {
    cfg: FieldConfig,
    geom: GridGeometry,
    mlp: Mlp,
    freqs: Vec<f64>,
}

impl TemporalField {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: FieldConfig,
        geom: GridGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        geom.validate()?;
        if cfg.layers == 0 || cfg.width == 0 {
            return Err(Error::config("field MLP needs at least one layer of positive width"));
        }
        let freqs = if cfg.temporal { frequency_ladder(cfg.d_sin, 1, cfg.sin_base)? } else { Vec::new() };
        let input = 3 + 2 * freqs.len() + cfg.feat_dim;
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(cfg.width, cfg.layers - 1));
        widths.push(1);
        let mlp = Mlp::register(store, "sdf", MlpSpec::uniform(widths, Activation::Softplus)?, rng)?;
        let (_, last_bias) = *mlp.layers().last().expect("at least one layer");
        store.set_value(last_bias, Tensor::vector(vec![cfg.out_bias]))?;
        Ok(TemporalField { cfg, geom, mlp, freqs })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn input_width(&self) -> usize {
        self.mlp.spec().input_width()
    }

    /// Grid features at `points [B, 3]` (meters), `[B, feat_dim]`.
    pub fn query_feature(&self, tape: &mut Tape, grid: Var, points: Var) -> Result<Var> {
        let c = tape.value(grid).last_dim();
        if c != self.cfg.feat_dim {
            return Err(Error::contract(format!("field expects {} grid channels, got {c}", self.cfg.feat_dim)));
        }
        tape.trilinear(grid, points, self.geom.grid_map(), self.cfg.bounds)
    }

    /// Signed distance at `points [B, 3]` for relative time `t`, `[B, 1]`.
    pub fn sdf(&self, tape: &mut Tape, store: &ParamStore, grid: Var, points: Var, t: f64) -> Result<Var> {
        if tape.value(points).shape().len() != 2 || tape.value(points).last_dim() != 3 {
            return Err(Error::contract("field queries must be [B, 3]"));
        }
        let b = tape.value(points).rows();
        let feat = self.query_feature(tape, grid, points)?;
        let pn = self.normalize(tape, points)?;
        let mut parts = vec![pn];
        if self.cfg.temporal {
            let tv = tape.constant(Tensor::new(vec![1, 1], vec![t])?);
            let enc = tape.sinusoidal(tv, &self.freqs)?;
            let enc = tape.reshape(enc, vec![2 * self.freqs.len()])?;
            parts.push(tape.broadcast_rows(enc, &[b])?);
        }
        parts.push(feat);
        let x = tape.concat(&parts)?;
        mlp_forward(tape, store, &self.mlp, x)
    }

    /// Maps the grid volume onto `[-1, 1]^3`.
    fn normalize(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let c = self.geom.center();
        let mut w = vec![0.0; 9];
        let mut bias = vec![0.0; 3];
        for i in 0..3 {
            let k = 2.0 / self.geom.extent[i];
            w[i * 4] = k;
            bias[i] = -c[i] * k;
        }
        let w = tape.constant(Tensor::new(vec![3, 3], w)?);
        let bias = tape.constant(Tensor::vector(bias));
        tape.linear(points, w, Some(bias))
    }
}
