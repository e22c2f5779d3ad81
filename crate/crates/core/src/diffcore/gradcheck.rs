//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor in `|analytic - numeric| / (|numeric| + eps)`.
pub const FD_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst element per parameter, in store order.
    pub per_param: Vec<ParamError>,
    pub max_rel_error: f64,
    /// Checked elements whose perturbed evaluations crossed a kink (relu,
    /// L1, alpha clamp). Their central differences straddle two smooth
    /// pieces and say nothing about the analytic slope.
    pub kink_crossings: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Configurable checker. `f` must rebuild the whole computation on the tape
/// it is given and return a scalar node.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub epsilon: f64,
    /// Check at most this many evenly strided elements per parameter.
    pub max_elements: Option<usize>,
    /// Op whose backward rule is deliberately corrupted on the analytic pass.
    pub fault: Option<String>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-3, epsilon: FD_EPSILON, max_elements: None, fault: None }
    }
}

impl GradCheck {
    pub fn run<F>(&self, store: &ParamStore, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let mut tape = Tape::new();
        if let Some(op) = &self.fault {
            tape.inject_fault(op);
        }
        let root = f(&mut tape, store)?;
        let base = tape.scalar(root);
        let signature = tape.kink_signature();
        if !base.is_finite() {
            return Err(Error::numeric("objective", format!("value {base}")));
        }
        let analytic = tape.backward(root)?.for_store(store);
        drop(tape);

        let eval = |s: &ParamStore, name: &str| -> Result<(f64, bool)> {
            let mut t = Tape::new();
            let r = f(&mut t, s)?;
            let v = t.scalar(r);
            if v.is_finite() {
                Ok((v, t.kink_signature() != signature))
            } else {
                Err(Error::numeric(name, format!("objective became {v} under perturbation")))
            }
        };

        let mut work = store.clone();
        let mut per_param = Vec::new();
        let mut max_rel = 0.0f64;
        let mut kink_crossings = 0;
        for (id, p) in store.iter() {
            if !p.requires_grad {
                continue;
            }
            let n = p.value.numel();
            let stride = match self.max_elements {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            let mut worst: Option<ParamError> = None;
            for i in (0..n).step_by(stride) {
                let orig = p.value.data()[i];
                work.value_mut(id)[i] = orig + self.step;
                let (plus, crossed_up) = eval(&work, &p.name)?;
                work.value_mut(id)[i] = orig - self.step;
                let (minus, crossed_down) = eval(&work, &p.name)?;
                work.value_mut(id)[i] = orig;
                kink_crossings += usize::from(crossed_up || crossed_down);
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[id][i];
                let rel = (a - numeric).abs() / (numeric.abs() + self.epsilon);
                if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                    worst = Some(ParamError {
                        name: p.name.clone(),
                        index: i,
                        analytic: a,
                        numeric,
                        rel_error: rel,
                    });
                }
            }
            if let Some(w) = worst {
                max_rel = max_rel.max(w.rel_error);
                per_param.push(w);
            }
        }
        Ok(GradCheckReport { per_param, max_rel_error: max_rel, kink_crossings })
    }
}

/// Maximum relative error between tape gradients and central differences.
pub fn finite_difference_check<F>(f: F, params: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    GradCheck { step, ..GradCheck::default() }.run(params, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn quadratic_is_essentially_exact() {
        let mut store = ParamStore::new();
        store.add("v", Tensor::vector(vec![0.3, -1.2, 2.5])).unwrap();
        let report = finite_difference_check(
            |t, s| {
                let v = t.param(s, 0);
                let sq = t.sum_squares(v);
                Ok(t.scale(sq, 0.5))
            },
            &store,
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut store = ParamStore::new();
        store.add("v", Tensor::vector(vec![0.3, -1.2])).unwrap();
        let check = GradCheck { fault: Some("sum_squares".into()), ..GradCheck::default() };
        let report = check
            .run(&store, |t, s| {
                let v = t.param(s, 0);
                Ok(t.sum_squares(v))
            })
            .unwrap();
        assert!(report.max_rel_error > 0.4);
        assert_eq!(report.kink_crossings, 0);
        assert_eq!(report.worst().unwrap().name, "v");
    }

    #[test]
    fn relu_kink_crossing_is_counted() {
        let mut store = ParamStore::new();
        store.add("v", Tensor::vector(vec![0.0005, 0.5])).unwrap();
        let report = finite_difference_check(
            |t, s| {
                let v = t.param(s, 0);
                let r = t.relu(v);
                Ok(t.sum(r))
            },
            &store,
            1e-3,
        )
        .unwrap();
        assert_eq!(report.kink_crossings, 1);
    }

    #[test]
    fn non_finite_objective_names_parameter() {
        let mut store = ParamStore::new();
        store.add("edge", Tensor::vector(vec![700.0])).unwrap();
        let err = GradCheck { step: 20.0, ..GradCheck::default() }
            .run(&store, |t, s| {
                let v = t.param(s, 0);
                let e = t.exp(v);
                Ok(t.sum(e))
            })
            .unwrap_err();
        match err {
            Error::Numeric { name, .. } => assert_eq!(name, "edge"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
