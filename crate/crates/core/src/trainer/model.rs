use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{BoundsPolicy, ParamId, ParamStore, Precision, Tape, Tensor, Var};
use crate::encoder::{voxelize, Encoder, EncoderConfig, GridGeometry};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, TemporalField};
use crate::lidarsim::{EgoAction, PointCloud};

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: GridGeometry,
    /// Per-point feature width of the input clouds.
    pub point_features: usize,
    pub feat_dim: usize,
    pub enc_hidden: [usize; 2],
    pub d_sin: usize,
    pub d_act: usize,
    pub sin_base: f64,
    pub field_width: usize,
    pub field_layers: usize,
    pub sdf_out_bias: f64,
    /// Initial sharpness of the opacity sigmoid.
    pub z_init: f64,
    pub recurrent: bool,
    pub temporal_field: bool,
    pub raw_action_concat: bool,
    pub bounds: BoundsPolicy,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: GridGeometry::default(),
            point_features: 1,
            feat_dim: 128,
            enc_hidden: [16, 64],
            d_sin: 32,
            d_act: 16,
            sin_base: crate::diffcore::DEFAULT_SIN_BASE,
            field_width: 64,
            field_layers: 4,
            sdf_out_bias: 0.5,
            z_init: 10.0,
            recurrent: true,
            temporal_field: true,
            raw_action_concat: false,
            bounds: BoundsPolicy::Clamp,
            precision: Precision::F64,
        }
    }
}

/// Encoder, action path, recurrence, field and sharpness in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub field: TemporalField,
    /// `render.log_z`.
    pub log_z: ParamId,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if !(cfg.z_init.is_finite() && cfg.z_init > 0.0) {
            return Err(Error::config(format!("z_init must be positive, got {}", cfg.z_init)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::register(
            &mut store,
            EncoderConfig {
                in_channels: 1 + cfg.point_features,
                feat_dim: cfg.feat_dim,
                hidden: cfg.enc_hidden,
                d_sin: cfg.d_sin,
                d_act: cfg.d_act,
                sin_base: cfg.sin_base,
                recurrent: cfg.recurrent,
                raw_action_concat: cfg.raw_action_concat,
            },
            &mut rng,
        )?;
        let field = TemporalField::register(
            &mut store,
            FieldConfig {
                feat_dim: cfg.feat_dim,
                d_sin: cfg.d_sin,
                sin_base: cfg.sin_base,
                width: cfg.field_width,
                layers: cfg.field_layers,
                out_bias: cfg.sdf_out_bias,
                temporal: cfg.temporal_field,
                bounds: cfg.bounds,
            },
            cfg.grid.clone(),
            &mut rng,
        )?;
        let log_z = store.add("render.log_z", Tensor::scalar(cfg.z_init.ln()))?;
        Ok(Model { cfg, store, encoder, field, log_z })
    }

    pub fn tape(&self) -> Tape {
        Tape::with_precision(self.cfg.precision)
    }

    /// Whether the model can render a horizon other than the encoded frame.
    pub fn can_forecast(&self) -> bool {
        self.cfg.recurrent || self.cfg.temporal_field
    }

    /// Encodes `input` (already in the reference frame) and, with the
    /// recurrence on, rolls it through `actions`. Returns one grid per
    /// horizon `0..=actions.len()`; without the recurrence every horizon
    /// shares the encoded grid.
    pub fn grids(&self, tape: &mut Tape, input: &PointCloud, actions: &[EgoAction]) -> Result<Vec<Var>> {
        if input.feature_dim != self.cfg.point_features {
            return Err(Error::contract(format!(
                "model expects {} point features, cloud has {}",
                self.cfg.point_features, input.feature_dim
            )));
        }
        let raw = voxelize(input, &self.cfg.grid)?;
        let mut g = self.encoder.encode(tape, &self.store, &raw.grid)?;
        let mut out = vec![g];
        for a in actions {
            if self.cfg.recurrent {
                let act = self.encoder.embed_action(tape, &self.store, a)?;
                g = self.encoder.recurrent_step(tape, &self.store, g, act)?;
            }
            out.push(g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(recurrent: bool) -> ModelConfig {
        ModelConfig {
            grid: GridGeometry { dims: [2, 4, 4], min: [0.0, -4.0, -2.0], extent: [8.0, 8.0, 4.0] },
            feat_dim: 4,
            enc_hidden: [3, 3],
            d_sin: 4,
            d_act: 2,
            field_width: 6,
            field_layers: 2,
            recurrent,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn ablation_removes_action_path() {
        let on = Model::new(tiny(true), 0).unwrap();
        let off = Model::new(tiny(false), 0).unwrap();
        assert!(on.store.names().iter().any(|n| n.starts_with("act.")));
        assert!(on.store.names().iter().any(|n| n.starts_with("rec.")));
        assert!(!off.store.names().iter().any(|n| n.starts_with("act.") || n.starts_with("rec.")));
    }

    #[test]
    fn parameter_set_independent_of_steps() {
        let m = Model::new(tiny(true), 1).unwrap();
        let before = m.store.names();
        let cloud = PointCloud::new(vec![[1.0, 0.0, 0.0]], vec![0.5], 1, 0.0, Default::default()).unwrap();
        let mut tape = m.tape();
        let a = EgoAction::new(0.5, 0.0, 0.1).unwrap();
        let g = m.grids(&mut tape, &cloud, &[a, a, a]).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(m.store.names(), before);
        for v in g {
            assert_eq!(tape.value(v).shape(), &[2, 4, 4, 4]);
            assert!(tape.value(v).is_finite());
        }
    }
}
