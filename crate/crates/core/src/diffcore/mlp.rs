use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    None,
}

/// Layer widths `[in, h1, ..., out]` plus one activation per affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP needs at least an input and an output width"));
        }
        if widths.contains(&0) {
            return Err(Error::config(format!("MLP widths must be positive: {widths:?}")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::config(format!(
                "{} layers need {} activations, got {}",
                widths.len() - 1,
                widths.len() - 1,
                activations.len()
            )));
        }
        Ok(MlpSpec { widths, activations })
    }

    /// `hidden` activation on every layer but the last, which stays linear.
    pub fn uniform(widths: Vec<usize>, hidden: Activation) -> Result<Self> {
        let n = widths.len().saturating_sub(1);
        let mut acts = vec![hidden; n];
        if let Some(last) = acts.last_mut() {
            *last = Activation::None;
        }
        Self::new(widths, acts)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }
}

/// Parameters of one MLP inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers `{prefix}.{i}.weight` (`[out, in]`) and `{prefix}.{i}.bias` for each layer.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, pair) in spec.widths.windows(2).enumerate() {
            let (inp, out) = (pair[0], pair[1]);
            let w = store.add_uniform(format!("{prefix}.{i}.weight"), vec![out, inp], inp, rng)?;
            let b = store.add_uniform(format!("{prefix}.{i}.bias"), vec![out], inp, rng)?;
            layers.push((w, b));
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// `(weight, bias)` ids per layer.
    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }
}

/// Applies the affine+activation stack to `x` (`[B, in]` or `[in]`).
pub fn mlp_forward(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, x: Var) -> Result<Var> {
    let width = tape.value(x).last_dim();
    if width != mlp.spec.input_width() {
        return Err(Error::contract(format!(
            "MLP expects input width {}, got {width}",
            mlp.spec.input_width()
        )));
    }
    let mut h = x;
    for (&(w, b), act) in mlp.layers.iter().zip(&mlp.spec.activations) {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        h = tape.linear(h, w, Some(b))?;
        h = match act {
            Activation::Relu => tape.relu(h),
            Activation::Softplus => tape.softplus(h),
            Activation::None => h,
        };
    }
    Ok(h)
}
