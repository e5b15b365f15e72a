//! Visual prompt generation: K prompt boxes of one category plus the
//! enhanced image features become a single D-dimensional embedding.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::geometry::{sincos_encode_raw, NormalizedBox, GLOBAL_BOX};
use crate::nn::{Builder, Ffn, LayerNorm, Linear, MsDeformAttn, MultiHeadAttention, MultiScaleFeatures, Reference};
use crate::params::{Init, ParamGroup, ParamId};
use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    #[serde(rename = "self")]
    SelfImage,
    Batch,
    Memory,
}

impl PromptSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptSource::SelfImage => "self",
            PromptSource::Batch => "batch",
            PromptSource::Memory => "memory",
        }
    }
}

/// A detached prompt embedding with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPromptEmbedding {
    pub vector: Vec<f32>,
    pub category_id: u32,
    pub source: PromptSource,
    pub dataset_id: u32,
}

impl VisualPromptEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Query rows for one category: K prompt rows then the global carrier row.
#[derive(Debug, Clone)]
pub struct PromptQuerySet {
    /// `(K+1) x D`.
    pub content: Var,
    /// `(K+1) x D`.
    pub position: Var,
    pub boxes: Vec<[f64; 4]>,
}

impl PromptQuerySet {
    pub fn k(&self) -> usize {
        self.boxes.len() - 1
    }
}

/// Prompts for several categories of one image, still attached to the graph.
#[derive(Debug, Clone)]
pub struct ImagePrompts {
    /// `C x D`, row order matching `category_ids`.
    pub vectors: Var,
    pub category_ids: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Afvpg {
    pub k_max: usize,
    d_model: usize,
    pub prompt_embed: ParamId,
    pub carrier_embed: ParamId,
    content_proj: Linear,
    pos_proj: Linear,
    cross_norm: LayerNorm,
    cross: MsDeformAttn,
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    ffn: Ffn,
    out_norm: LayerNorm,
}

impl Afvpg {
    pub fn new<T: Real>(bld: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let mut b = bld.with_group(ParamGroup::Visual);
        let d = cfg.d_model;
        Afvpg {
            k_max: cfg.k_max,
            d_model: d,
            prompt_embed: b.param("afvpg.prompt_embed", 1, d, Init::Normal(1.0), true),
            carrier_embed: b.param("afvpg.carrier_embed", 1, d, Init::Normal(1.0), true),
            content_proj: Linear::new(&mut b, "afvpg.content_proj", d, d),
            pos_proj: Linear::new(&mut b, "afvpg.pos_proj", d, d),
            cross_norm: LayerNorm::new(&mut b, "afvpg.cross_norm", d),
            cross: MsDeformAttn::new(&mut b, "afvpg.cross", d, cfg.heads, 3, cfg.points, cfg.offset_init),
            self_norm: LayerNorm::new(&mut b, "afvpg.self_norm", d),
            self_attn: MultiHeadAttention::new(&mut b, "afvpg.self_attn", d, cfg.heads),
            ffn: Ffn::new(&mut b, "afvpg.ffn", d, cfg.ffn_dim),
            out_norm: LayerNorm::new(&mut b, "afvpg.out_norm", d),
        }
    }

    /// Content rows are one learnable embedding broadcast K times with the
    /// carrier appended, projected jointly; position rows project the
    /// sine-cosine code of each box with the global box appended.
    pub fn build_prompt_queries<T: Real>(&self, g: &mut Graph<T>, boxes: &[NormalizedBox]) -> Result<PromptQuerySet> {
        let k = boxes.len();
        ensure!(k >= 1, Validation, "a prompt needs at least one box");
        ensure!(k <= self.k_max, Validation, "{k} prompt boxes exceed the limit of {}", self.k_max);
        for b in boxes {
            ensure!(b.w > 0.0 && b.h > 0.0, Validation, "degenerate prompt box {b:?}");
        }
        let c = g.param(self.prompt_embed);
        let c = g.gather_rows(c, &vec![0; k]);
        let carrier = g.param(self.carrier_embed);
        let cat = g.concat_rows(&[c, carrier]);
        let content = self.content_proj.forward(g, cat);
        let mut rows: Vec<[f64; 4]> = boxes.iter().map(|b| b.as_array()).collect();
        rows.push(GLOBAL_BOX.as_array());
        let mut pe = Vec::with_capacity(rows.len() * self.d_model);
        for r in &rows {
            pe.extend(sincos_encode_raw(*r, self.d_model));
        }
        let pe = g.constant(Matrix::from_f64(rows.len(), self.d_model, &pe));
        let position = self.pos_proj.forward(g, pe);
        Ok(PromptQuerySet {
            content,
            position,
            boxes: rows,
        })
    }

    /// Runs the attention block over one or more query sets stacked row-wise
    /// and returns each set's last row, normalized (`sets x D`).
    fn attend<T: Real>(&self, g: &mut Graph<T>, sets: &[PromptQuerySet], enhanced: &MultiScaleFeatures) -> Var {
        let (q, pos, refs) = if sets.len() == 1 {
            (sets[0].content, sets[0].position, sets[0].boxes.clone())
        } else {
            let c: Vec<Var> = sets.iter().map(|s| s.content).collect();
            let p: Vec<Var> = sets.iter().map(|s| s.position).collect();
            let r = sets.iter().flat_map(|s| s.boxes.iter().copied()).collect();
            (g.concat_rows(&c), g.concat_rows(&p), r)
        };
        let qn = self.cross_norm.forward(g, q);
        let qp = g.add(qn, pos);
        let a = self.cross.forward(g, qp, enhanced.tokens, &enhanced.shapes, &Reference::Boxes(refs));
        let q1 = g.add(q, a);
        let qn = self.self_norm.forward(g, q1);
        let qp = g.add(qn, pos);
        let mut start = 0;
        let mut parts = Vec::with_capacity(sets.len());
        for s in sets {
            let n = s.boxes.len();
            let (qs, vs) = if sets.len() == 1 {
                (qp, qn)
            } else {
                (g.slice_rows(qp, start, n), g.slice_rows(qn, start, n))
            };
            parts.push(self.self_attn.forward(g, qs, qs, vs));
            start += n;
        }
        let a = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let q2 = g.add(q1, a);
        let q3 = self.ffn.residual(g, q2, 1.0);
        let mut last = Vec::with_capacity(sets.len());
        let mut end = 0;
        for s in sets {
            end += s.boxes.len();
            last.push(end - 1);
        }
        let v = g.gather_rows(q3, &last);
        self.out_norm.forward(g, v)
    }

    /// The embedding of one category (`1 x D`).
    pub fn generate_prompt<T: Real>(
        &self,
        g: &mut Graph<T>,
        queries: &PromptQuerySet,
        enhanced: &MultiScaleFeatures,
    ) -> Result<Var> {
        let (_, qd) = g.shape(queries.content);
        let (_, fd) = g.shape(enhanced.tokens);
        ensure!(qd == fd, Shape, "prompt width {qd} does not match feature width {fd}");
        Ok(self.attend(g, std::slice::from_ref(queries), enhanced))
    }

    /// One embedding per category, all categories in a single batched pass.
    pub fn generate_prompts_for_image<T: Real>(
        &self,
        g: &mut Graph<T>,
        per_category: &[(u32, Vec<NormalizedBox>)],
        enhanced: &MultiScaleFeatures,
    ) -> Result<Option<ImagePrompts>> {
        if per_category.is_empty() {
            return Ok(None);
        }
        let (_, fd) = g.shape(enhanced.tokens);
        ensure!(fd == self.d_model, Shape, "feature width {fd} does not match model width {}", self.d_model);
        let sets = per_category
            .iter()
            .map(|(_, b)| self.build_prompt_queries(g, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(ImagePrompts {
            vectors: self.attend(g, &sets, enhanced),
            category_ids: per_category.iter().map(|(c, _)| *c).collect(),
        }))
    }
}

/// Keeps at most `k_max` boxes, chosen uniformly without replacement and
/// kept in their original order.
pub fn cap_boxes<R: Rng>(boxes: &[NormalizedBox], k_max: usize, rng: &mut R) -> Vec<NormalizedBox> {
    if boxes.len() <= k_max {
        return boxes.to_vec();
    }
    let mut pick = index::sample(rng, boxes.len(), k_max).into_vec();
    pick.sort_unstable();
    pick.into_iter().map(|i| boxes[i]).collect()
}

/// Copies rows of a prompt matrix out of the graph.
pub fn detach_rows<T: Real>(
    m: &Matrix<T>,
    category_ids: &[u32],
    source: PromptSource,
    dataset_id: u32,
) -> Vec<VisualPromptEmbedding> {
    category_ids
        .iter()
        .enumerate()
        .map(|(r, &c)| VisualPromptEmbedding {
            vector: m.row(r).iter().map(|v| v.f64() as f32).collect(),
            category_id: c,
            source,
            dataset_id,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::{Backbone, FeatureEnhancer};
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            d_model: 8,
            heads: 2,
            points: 1,
            ffn_dim: 8,
            k_max: 4,
            num_queries: 5,
            ..ModelConfig::desk()
        }
    }

    fn nb(cx: f64, cy: f64, w: f64, h: f64) -> NormalizedBox {
        NormalizedBox::new(cx, cy, w, h).unwrap()
    }

    fn features<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, seed: u64) -> MultiScaleFeatures {
        let shapes = cfg.level_shapes();
        let n: usize = shapes.iter().map(|(h, w)| h * w).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tokens = g.constant(Matrix::from_f64(n, cfg.d_model, &data));
        let pos = g.constant(Matrix::zeros(n, cfg.d_model));
        MultiScaleFeatures { tokens, pos, shapes }
    }

    fn module<T: Real>(cfg: &ModelConfig) -> (ParamStore<T>, Afvpg) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Afvpg::new(&mut Builder::new(&mut store, &mut rng, ParamGroup::Visual), cfg);
        (store, m)
    }

    #[test]
    fn query_set_rows() {
        let cfg = tiny_cfg();
        let (store, m) = module::<f64>(&cfg);
        let mut g = Graph::new(&store);
        let q = m.build_prompt_queries(&mut g, &[nb(0.2, 0.3, 0.1, 0.2)]).unwrap();
        assert_eq!(g.shape(q.content), (2, 8));
        assert_eq!(q.boxes[1], [0.5, 0.5, 1.0, 1.0]);
        let three = [nb(0.2, 0.3, 0.1, 0.2), nb(0.6, 0.3, 0.1, 0.2), nb(0.4, 0.8, 0.3, 0.2)];
        let q = m.build_prompt_queries(&mut g, &three).unwrap();
        let c = g.value(q.content);
        assert_eq!(c.row(0), c.row(1));
        assert_eq!(c.row(1), c.row(2));
        assert_ne!(c.row(2), c.row(3));
        assert!(m.build_prompt_queries(&mut g, &[]).is_err());
        assert!(m.build_prompt_queries(&mut g, &[three[0]; 5]).is_err());
    }

    #[test]
    fn batched_matches_looped() {
        let cfg = tiny_cfg();
        let (store, m) = module::<f32>(&cfg);
        let mut g = Graph::new(&store);
        let f = features(&mut g, &cfg, 2);
        let cats = vec![
            (3, vec![nb(0.2, 0.3, 0.1, 0.2)]),
            (5, vec![nb(0.6, 0.3, 0.2, 0.2), nb(0.7, 0.7, 0.3, 0.1)]),
            (9, vec![nb(0.4, 0.4, 0.5, 0.5)]),
        ];
        let batched = m.generate_prompts_for_image(&mut g, &cats, &f).unwrap().unwrap();
        assert_eq!(batched.category_ids, vec![3, 5, 9]);
        for (r, (_, boxes)) in cats.iter().enumerate() {
            let q = m.build_prompt_queries(&mut g, boxes).unwrap();
            let v = m.generate_prompt(&mut g, &q, &f).unwrap();
            let bv = g.value(batched.vectors).row(r).to_vec();
            for (a, b) in g.value(v).row(0).iter().zip(bv) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(m.generate_prompts_for_image(&mut g, &[], &f).unwrap().is_none());
    }

    #[test]
    fn box_order_does_not_matter() {
        let cfg = tiny_cfg();
        let (store, m) = module::<f32>(&cfg);
        let mut g = Graph::new(&store);
        let f = features(&mut g, &cfg, 4);
        let boxes = [nb(0.2, 0.3, 0.1, 0.2), nb(0.6, 0.3, 0.2, 0.2), nb(0.7, 0.7, 0.3, 0.1)];
        let rev: Vec<_> = boxes.iter().rev().copied().collect();
        let q1 = m.build_prompt_queries(&mut g, &boxes).unwrap();
        let q2 = m.build_prompt_queries(&mut g, &rev).unwrap();
        let a = m.generate_prompt(&mut g, &q1, &f).unwrap();
        let b = m.generate_prompt(&mut g, &q2, &f).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-5);
    }

    #[test]
    fn gradient_reaches_features() {
        let cfg = tiny_cfg();
        let (mut store, m) = module::<f64>(&cfg);
        let shapes = cfg.level_shapes();
        let n: usize = shapes.iter().map(|(h, w)| h * w).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // With unit gain and zero shift the output norm is constant.
        for id in [m.out_norm.gamma, m.out_norm.beta] {
            for v in store.value_mut(id).data.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let x = Matrix::from_f64(n, 8, &(0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let boxes = [nb(0.3, 0.4, 0.3, 0.2), nb(0.6, 0.6, 0.2, 0.4)];
        let r = gradcheck::check_input(&store, &x, |g, xv| {
            let pos = g.constant(Matrix::zeros(n, 8));
            let f = MultiScaleFeatures {
                tokens: xv,
                pos,
                shapes: shapes.clone(),
            };
            let q = m.build_prompt_queries(g, &boxes).unwrap();
            let v = m.generate_prompt(g, &q, &f).unwrap();
            let sq = g.mul(v, v);
            g.sum_all(sq)
        });
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn shares_enhancer_parameters() {
        let cfg = ModelConfig {
            enhancer_layers: 1,
            ..tiny_cfg()
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bld = Builder::new(&mut store, &mut rng, ParamGroup::Backbone);
        let bb = Backbone::new(&mut bld, &cfg);
        let en = FeatureEnhancer::new(&mut bld, &cfg);
        let m = Afvpg::new(&mut bld, &cfg);
        let img = Matrix::from_f64(32 * 32, 3, &(0..32 * 32 * 3).map(|i| (i % 11) as f64 / 10.0).collect::<Vec<_>>());
        let mut g = Graph::new(&store);
        let raw = bb.forward(&mut g, &img).unwrap();
        let enh = en.forward(&mut g, &raw, None).image;
        let q = m.build_prompt_queries(&mut g, &[nb(0.4, 0.4, 0.3, 0.3)]).unwrap();
        let v = m.generate_prompt(&mut g, &q, &enh).unwrap();
        let loss = g.sum_all(v);
        let grads = g.backward(loss);
        let shared = en.shared_param_ids();
        let ffn_up = en.layers[0].ffn.up.w;
        assert!(shared.contains(&ffn_up));
        assert!(grads.param(ffn_up).unwrap().sq_norm() > 0.0);
    }
}
