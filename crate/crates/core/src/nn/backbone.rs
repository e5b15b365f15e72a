use super::{Builder, LayerNorm, Linear};
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::geometry::sincos_values;
use crate::kernels::ConvGeom;
use crate::params::{Init, ParamId};
use crate::real::Real;
use crate::tensor::Matrix;

/// Flattened pyramid: all levels concatenated row-wise, finest first.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    /// `tokens x D`.
    pub tokens: Var,
    /// `tokens x D` positional code plus level embedding.
    pub pos: Var,
    pub shapes: Vec<(usize, usize)>,
}

impl MultiScaleFeatures {
    pub fn num_tokens(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    /// Normalized center of every token.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        token_centers(&self.shapes)
    }

    /// Level of every token.
    pub fn token_levels(&self) -> Vec<usize> {
        self.shapes
            .iter()
            .enumerate()
            .flat_map(|(l, (h, w))| std::iter::repeat_n(l, h * w))
            .collect()
    }
}

pub fn token_centers(shapes: &[(usize, usize)]) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for &(h, w) in shapes {
        for y in 0..h {
            for x in 0..w {
                out.push([(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    cin: usize,
}

impl Conv {
    fn new<T: Real>(bld: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Self {
        Conv {
            w: bld.param(&format!("{name}.w"), 9 * cin, cout, Init::Xavier, false),
            b: bld.param(&format!("{name}.b"), 1, cout, Init::Zeros, true),
            cin,
        }
    }

    /// 3x3, stride 2, padding 1, followed by ReLU.
    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let geom = ConvGeom {
            height: h,
            width: w,
            channels: self.cin,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let cols = g.im2col(x, geom);
        let wv = g.param(self.w);
        let bv = g.param(self.b);
        let y = g.matmul(cols, wv);
        let y = g.add_bcast(y, bv);
        (g.relu(y), geom.out_height(), geom.out_width())
    }
}

/// Strided convolutional stand-in for a hierarchical vision backbone.
#[derive(Debug, Clone)]
pub struct Backbone {
    image_size: usize,
    d_model: usize,
    convs: Vec<Conv>,
    proj: Vec<(Linear, LayerNorm)>,
    level_embed: ParamId,
}

impl Backbone {
    pub fn new<T: Real>(bld: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let mut chans = vec![3, cfg.stem_channels[0], cfg.stem_channels[1]];
        chans.extend(cfg.level_channels);
        let convs = chans
            .windows(2)
            .enumerate()
            .map(|(i, c)| Conv::new(bld, &format!("backbone.conv{i}"), c[0], c[1]))
            .collect();
        let proj = cfg
            .level_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                (
                    Linear::new(bld, &format!("backbone.proj{l}"), c, cfg.d_model),
                    LayerNorm::new(bld, &format!("backbone.proj{l}.norm"), cfg.d_model),
                )
            })
            .collect();
        let level_embed = bld.param("backbone.level_embed", 3, cfg.d_model, Init::Normal(0.1), true);
        Backbone {
            image_size: cfg.image_size,
            d_model: cfg.d_model,
            convs,
            proj,
            level_embed,
        }
    }

    /// `image` is `(H*W) x 3`, row-major pixels with channels in `[0, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: &Matrix<T>) -> Result<MultiScaleFeatures> {
        let s = self.image_size;
        ensure!(
            image.rows == s * s && image.cols == 3,
            Validation,
            "expected a {s}x{s} RGB image ({} x 3 pixels), got {} x {}",
            s * s,
            image.rows,
            image.cols
        );
        let mut x = g.constant(image.clone());
        let (mut h, mut w) = (s, s);
        let mut levels = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, nh, nw) = conv.forward(g, x, h, w);
            x = y;
            h = nh;
            w = nw;
            if i >= 2 {
                levels.push((x, h, w));
            }
        }
        let mut toks = Vec::new();
        let mut shapes = Vec::new();
        for ((x, h, w), (lin, norm)) in levels.into_iter().zip(&self.proj) {
            let y = lin.forward(g, x);
            toks.push(norm.forward(g, y));
            shapes.push((h, w));
        }
        let tokens = g.concat_rows(&toks);
        let pos = self.positions(g, &shapes);
        Ok(MultiScaleFeatures { tokens, pos, shapes })
    }

    fn positions<T: Real>(&self, g: &mut Graph<T>, shapes: &[(usize, usize)]) -> Var {
        let d = self.d_model;
        let centers = token_centers(shapes);
        let mut data = Vec::with_capacity(centers.len() * d);
        for c in &centers {
            data.extend(sincos_values(c, d / 2));
        }
        let pe = g.constant(Matrix::from_f64(centers.len(), d, &data));
        let mut idx = Vec::with_capacity(centers.len());
        for (l, &(h, w)) in shapes.iter().enumerate() {
            idx.extend(std::iter::repeat_n(l, h * w));
        }
        let table = g.param(self.level_embed);
        let lv = g.gather_rows(table, &idx);
        g.add(pe, lv)
    }
}
