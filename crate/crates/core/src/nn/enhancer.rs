use super::{add_scaled, Builder, Ffn, LayerNorm, MsDeformAttn, MultiHeadAttention, MultiScaleFeatures, Reference};
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::params::{Init, ParamGroup, ParamId};
use crate::real::Real;

/// One embedding row per requested category.
#[derive(Debug, Clone)]
pub struct TextTokens {
    /// `C x D`.
    pub tokens: Var,
    pub category_ids: Vec<u32>,
}

/// Category-name encoder surrogate: a learnable table indexed by category id.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub table: ParamId,
    pub size: usize,
}

impl TextEncoder {
    pub fn new<T: Real>(bld: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let table = bld.param("text.table", cfg.num_categories, cfg.d_model, Init::Normal(1.0), true);
        TextEncoder {
            table,
            size: cfg.num_categories,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, category_ids: &[u32]) -> Result<TextTokens> {
        ensure!(!category_ids.is_empty(), Validation, "text route needs at least one category");
        for &c in category_ids {
            ensure!(
                (c as usize) < self.size,
                Validation,
                "category id {c} outside the text table (size {})",
                self.size
            );
        }
        let idx: Vec<usize> = category_ids.iter().map(|&c| c as usize).collect();
        let t = g.param(self.table);
        Ok(TextTokens {
            tokens: g.gather_rows(t, &idx),
            category_ids: category_ids.to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EnhancerOutput {
    pub image: MultiScaleFeatures,
    pub text: Option<TextTokens>,
}

#[derive(Debug, Clone)]
struct TextFusion {
    img_norm: LayerNorm,
    img_from_text: MultiHeadAttention,
    txt_norm: LayerNorm,
    text_from_img: MultiHeadAttention,
    txt_ffn: Ffn,
}

#[derive(Debug, Clone)]
pub struct EnhancerLayer {
    pub norm: LayerNorm,
    pub deform: MsDeformAttn,
    pub ffn: Ffn,
    fusion: TextFusion,
}

/// Deformable self-attention + FFN over the flattened pyramid, with optional
/// bidirectional image/text cross-attention.
#[derive(Debug, Clone)]
pub struct FeatureEnhancer {
    pub layers: Vec<EnhancerLayer>,
    text_norm: LayerNorm,
    branch_scale: f64,
}

impl FeatureEnhancer {
    pub fn new<T: Real>(bld: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.enhancer_layers)
            .map(|i| {
                let p = format!("enhancer.{i}");
                let mut eb = bld.with_group(ParamGroup::Enhancer);
                let norm = LayerNorm::new(&mut eb, &format!("{p}.norm"), d);
                let deform = MsDeformAttn::new(&mut eb, &format!("{p}.deform"), d, cfg.heads, 3, cfg.points, cfg.offset_init);
                let ffn = Ffn::new(&mut eb, &format!("{p}.ffn"), d, cfg.ffn_dim);
                let mut tb = bld.with_group(ParamGroup::TextRoute);
                let fusion = TextFusion {
                    img_norm: LayerNorm::new(&mut tb, &format!("{p}.i2t.norm"), d),
                    img_from_text: MultiHeadAttention::new(&mut tb, &format!("{p}.i2t"), d, cfg.heads),
                    txt_norm: LayerNorm::new(&mut tb, &format!("{p}.t2i.norm"), d),
                    text_from_img: MultiHeadAttention::new(&mut tb, &format!("{p}.t2i"), d, cfg.heads),
                    txt_ffn: Ffn::new(&mut tb, &format!("{p}.tffn"), d, cfg.ffn_dim),
                };
                EnhancerLayer {
                    norm,
                    deform,
                    ffn,
                    fusion,
                }
            })
            .collect();
        let text_norm = LayerNorm::new(&mut bld.with_group(ParamGroup::TextRoute), "enhancer.text_norm", d);
        FeatureEnhancer {
            layers,
            text_norm,
            branch_scale: cfg.branch_scale,
        }
    }

    /// Parameters of the image path (deformable self-attention and FFN),
    /// which visual prompt generation reads through the enhanced features.
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut v = vec![l.norm.gamma, l.norm.beta];
                v.extend(l.deform.param_ids());
                v.extend(l.ffn.param_ids());
                v
            })
            .collect()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        features: &MultiScaleFeatures,
        text: Option<&TextTokens>,
    ) -> EnhancerOutput {
        let s = self.branch_scale;
        let reference = Reference::Points(features.centers());
        let pos = features.pos;
        let mut x = features.tokens;
        let mut t = text.map(|t| t.tokens);
        for layer in &self.layers {
            let xn = layer.norm.forward(g, x);
            let q = g.add(xn, pos);
            let a = layer.deform.forward(g, q, xn, &features.shapes, &reference);
            x = add_scaled(g, x, a, s);
            if let Some(tv) = t {
                let f = &layer.fusion;
                let xn = f.img_norm.forward(g, x);
                let q = g.add(xn, pos);
                let a = f.img_from_text.forward(g, q, tv, tv);
                x = add_scaled(g, x, a, s);
                let tn = f.txt_norm.forward(g, tv);
                let k = g.add(x, pos);
                let a = f.text_from_img.forward(g, tn, k, x);
                let tv = add_scaled(g, tv, a, s);
                t = Some(f.txt_ffn.residual(g, tv, s));
            }
            x = layer.ffn.residual(g, x, s);
        }
        let text = match (text, t) {
            (Some(src), Some(tv)) => Some(TextTokens {
                tokens: self.text_norm.forward(g, tv),
                category_ids: src.category_ids.clone(),
            }),
            _ => None,
        };
        EnhancerOutput {
            image: MultiScaleFeatures {
                tokens: x,
                pos,
                shapes: features.shapes.clone(),
            },
            text,
        }
    }
}
