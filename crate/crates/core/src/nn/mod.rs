//! Differentiable building blocks: dense layers, attention, the convolutional
//! backbone surrogate and the feature enhancer.

mod backbone;
mod deform;
mod enhancer;

pub use backbone::{Backbone, MultiScaleFeatures};
pub use deform::{MsDeformAttn, Reference};
pub use enhancer::{EnhancerOutput, FeatureEnhancer, TextEncoder, TextTokens};

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::real::Real;

/// Everything a module constructor needs to register its parameters.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Builder { store, rng, group }
    }

    pub fn with_group(&mut self, group: ParamGroup) -> Builder<'_, T> {
        Builder {
            store: self.store,
            rng: self.rng,
            group,
        }
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init, no_decay: bool) -> ParamId {
        self.store
            .add_init(name, self.group, rows, cols, init, no_decay, self.rng)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(bld: &mut Builder<T>, name: &str, input: usize, output: usize) -> Self {
        Self::with_init(bld, name, input, output, Init::Xavier, Init::Zeros)
    }

    pub fn with_init<T: Real>(
        bld: &mut Builder<T>,
        name: &str,
        input: usize,
        output: usize,
        w_init: Init,
        b_init: Init,
    ) -> Self {
        Linear {
            w: bld.param(&format!("{name}.w"), input, output, w_init, false),
            b: bld.param(&format!("{name}.b"), 1, output, b_init, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_bcast(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(bld: &mut Builder<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: bld.param(&format!("{name}.gamma"), 1, dim, Init::Ones, true),
            beta: bld.param(&format!("{name}.beta"), 1, dim, Init::Zeros, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(bld: &mut Builder<T>, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(bld, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    /// Same as [`Mlp::new`] but the last layer starts at zero, so the initial
    /// output is exactly zero.
    pub fn zero_last<T: Real>(bld: &mut Builder<T>, name: &str, dims: &[usize]) -> Self {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i + 1 == n { Init::Zeros } else { Init::Xavier };
                Linear::with_init(bld, &format!("{name}.{i}"), w[0], w[1], init, Init::Zeros)
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        x
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }
}

/// Pre-norm position-wise feed-forward block, returned without the residual.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<T: Real>(bld: &mut Builder<T>, name: &str, dim: usize, hidden: usize) -> Self {
        Ffn {
            norm: LayerNorm::new(bld, &format!("{name}.norm"), dim),
            up: Linear::new(bld, &format!("{name}.up"), dim, hidden),
            down: Linear::new(bld, &format!("{name}.down"), hidden, dim),
        }
    }

    /// `x + scale * down(relu(up(norm(x))))`
    pub fn residual<T: Real>(&self, g: &mut Graph<T>, x: Var, scale: f64) -> Var {
        let h = self.norm.forward(g, x);
        let h = self.up.forward(g, h);
        let h = g.relu(h);
        let h = self.down.forward(g, h);
        add_scaled(g, x, h, scale)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.norm.gamma,
            self.norm.beta,
            self.up.w,
            self.up.b,
            self.down.w,
            self.down.b,
        ]
    }
}

/// `x + scale * branch`, skipping the multiply when `scale == 1`.
pub fn add_scaled<T: Real>(g: &mut Graph<T>, x: Var, branch: Var, scale: f64) -> Var {
    let b = if scale == 1.0 { branch } else { g.scale(branch, scale) };
    g.add(x, b)
}

/// Standard multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(bld: &mut Builder<T>, name: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            heads,
            q: Linear::new(bld, &format!("{name}.q"), dim, dim),
            k: Linear::new(bld, &format!("{name}.k"), dim, dim),
            v: Linear::new(bld, &format!("{name}.v"), dim, dim),
            out: Linear::new(bld, &format!("{name}.out"), dim, dim),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, query: Var, key: Var, value: Var) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let dim = g.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, o)
    }
}
