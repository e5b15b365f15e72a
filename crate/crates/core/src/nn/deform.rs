use std::sync::Arc;

use super::{Builder, Linear};
use crate::autograd::{Graph, Var};
use crate::config::OffsetInit;
use crate::kernels::DeformGeom;
use crate::params::{Init, ParamId};
use crate::real::Real;
use crate::tensor::Matrix;

/// Where each query's sampling points are anchored.
#[derive(Debug, Clone)]
pub enum Reference {
    /// Normalized `(x, y)` centers; offsets are measured in pixels of each level.
    Points(Vec<[f64; 2]>),
    /// Normalized `(cx, cy, w, h)` boxes; offsets are measured in half box
    /// extents divided by the number of points.
    Boxes(Vec<[f64; 4]>),
}

impl Reference {
    pub fn len(&self) -> usize {
        match self {
            Reference::Points(p) => p.len(),
            Reference::Boxes(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn center(&self, i: usize) -> [f64; 2] {
        match self {
            Reference::Points(p) => p[i],
            Reference::Boxes(b) => [b[i][0], b[i][1]],
        }
    }
}

/// Multi-scale deformable attention.
#[derive(Debug, Clone)]
pub struct MsDeformAttn {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub value_proj: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub out_proj: Linear,
}

impl MsDeformAttn {
    pub fn new<T: Real>(
        bld: &mut Builder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        offset_init: OffsetInit,
    ) -> Self {
        let n = heads * levels * points;
        let offsets = Linear::with_init(bld, &format!("{name}.offsets"), dim, 2 * n, Init::Zeros, Init::Zeros);
        if offset_init == OffsetInit::Grid {
            let bias = grid_bias(heads, levels, points);
            *bld.store.value_mut(offsets.b) = Matrix::from_f64(1, 2 * n, &bias);
        }
        MsDeformAttn {
            heads,
            levels,
            points,
            value_proj: Linear::new(bld, &format!("{name}.value"), dim, dim),
            offsets,
            weights: Linear::with_init(bld, &format!("{name}.weights"), dim, n, Init::Zeros, Init::Zeros),
            out_proj: Linear::new(bld, &format!("{name}.out"), dim, dim),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.value_proj, &self.offsets, &self.weights, &self.out_proj]
            .iter()
            .flat_map(|l| [l.w, l.b])
            .collect()
    }

    /// `query` already carries its positional code. `value` holds the
    /// flattened levels described by `shapes`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        query: Var,
        value: Var,
        shapes: &[(usize, usize)],
        reference: &Reference,
    ) -> Var {
        let (nq, dim) = g.shape(query);
        assert_eq!(shapes.len(), self.levels, "level count mismatch");
        assert_eq!(reference.len(), nq, "one reference per query");
        if nq == 0 {
            return g.constant(Matrix::zeros(0, dim));
        }
        let geom = Arc::new(DeformGeom::new(self.heads, shapes.to_vec(), self.points, dim));
        let (base, scale) = self.anchor(reference, shapes);
        let v = self.value_proj.forward(g, value);
        let off = self.offsets.forward(g, query);
        let scale = g.constant(scale);
        let base = g.constant(base);
        let off = g.mul(off, scale);
        let loc = g.add(off, base);
        let logits = self.weights.forward(g, query);
        let attn = g.softmax_groups(logits, self.levels * self.points);
        let sampled = g.deform_sample(v, loc, attn, geom);
        self.out_proj.forward(g, sampled)
    }

    /// Constant `base` and per-coordinate `scale` such that
    /// `loc = base + offset * scale`.
    fn anchor<T: Real>(&self, reference: &Reference, shapes: &[(usize, usize)]) -> (Matrix<T>, Matrix<T>) {
        let nq = reference.len();
        let width = 2 * self.heads * self.levels * self.points;
        let mut base = Vec::with_capacity(nq * width);
        let mut scale = Vec::with_capacity(nq * width);
        let mut warned = false;
        for q in 0..nq {
            let [mut cx, mut cy] = reference.center(q);
            if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) || !cx.is_finite() || !cy.is_finite() {
                if !warned {
                    log::warn!("deformable reference ({cx}, {cy}) outside the unit square, clamping");
                    warned = true;
                }
                cx = if cx.is_finite() { cx.clamp(0.0, 1.0) } else { 0.5 };
                cy = if cy.is_finite() { cy.clamp(0.0, 1.0) } else { 0.5 };
            }
            for _h in 0..self.heads {
                for &(lh, lw) in shapes {
                    let (sx, sy) = match reference {
                        Reference::Points(_) => (1.0 / lw as f64, 1.0 / lh as f64),
                        Reference::Boxes(b) => {
                            let k = 0.5 / self.points as f64;
                            (b[q][2] * k, b[q][3] * k)
                        }
                    };
                    for _p in 0..self.points {
                        base.push(cx);
                        base.push(cy);
                        scale.push(sx);
                        scale.push(sy);
                    }
                }
            }
        }
        (Matrix::from_f64(nq, width, &base), Matrix::from_f64(nq, width, &scale))
    }
}

/// One ray per head, point `p` at distance `p + 1` along it.
fn grid_bias(heads: usize, levels: usize, points: usize) -> Vec<f64> {
    let mut bias = vec![0.0; 2 * heads * levels * points];
    for h in 0..heads {
        let theta = std::f64::consts::TAU * h as f64 / heads as f64;
        let (s, c) = theta.sin_cos();
        let m = c.abs().max(s.abs());
        for l in 0..levels {
            for p in 0..points {
                let idx = (h * levels + l) * points + p;
                bias[2 * idx] = c / m * (p + 1) as f64;
                bias[2 * idx + 1] = s / m * (p + 1) as f64;
            }
        }
    }
    bias
}
