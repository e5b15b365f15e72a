//! Central finite-difference comparison against tape gradients, at f64.

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    /// Entries whose magnitude is below a thousandth of the largest gradient
    /// are compared against that floor instead of their own size, so
    /// round-off in near-zero entries does not dominate.
    fn from_pairs(pairs: &[(f64, f64)]) -> GradCheck {
        let scale = pairs.iter().fold(0.0f64, |m, (a, n)| m.max(a.abs()).max(n.abs()));
        let floor = (1e-3 * scale).max(1e-9);
        let max_rel_err = pairs
            .iter()
            .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max);
        GradCheck {
            max_rel_err,
            checked: pairs.len(),
        }
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }
}

/// Checks every scalar of the listed parameters. `f` builds a scalar loss.
pub fn check_params<F>(store: &ParamStore<f64>, ids: &[ParamId], f: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>) -> Var,
{
    let analytic: Vec<Matrix<f64>> = {
        let mut g = Graph::new(store);
        let y = f(&mut g);
        let grads = g.backward(y);
        ids.iter()
            .map(|&id| {
                let v = store.value(id);
                grads.param(id).cloned().unwrap_or_else(|| Matrix::zeros(v.rows, v.cols))
            })
            .collect()
    };
    let mut work = store.clone();
    let mut pairs = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data[i];
            let mut eval = |x: f64| {
                work.value_mut(id).data[i] = x;
                let mut g = Graph::new(&work);
                let y = f(&mut g);
                g.value(y).data[0]
            };
            let numeric = (eval(orig + STEP) - eval(orig - STEP)) / (2.0 * STEP);
            work.value_mut(id).data[i] = orig;
            pairs.push((analytic[k].data[i], numeric));
        }
    }
    GradCheck::from_pairs(&pairs)
}

/// Checks the gradient with respect to a free input matrix.
pub fn check_input<F>(store: &ParamStore<f64>, x: &Matrix<f64>, f: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let y = f(&mut g, xv);
    let grads = g.backward(y);
    let analytic = grads.of(xv).cloned().unwrap_or_else(|| Matrix::zeros(x.rows, x.cols));
    let mut pairs = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let eval = |d: f64| {
            let mut xp = x.clone();
            xp.data[i] += d;
            let mut g = Graph::new(store);
            let v = g.input(xp);
            let y = f(&mut g, v);
            g.value(y).data[0]
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        pairs.push((analytic.data[i], numeric));
    }
    GradCheck::from_pairs(&pairs)
}
