//! Query selection, the decoder, alignment logits and the full two-route model.

mod checkpoint;
mod loss;
pub mod matching;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{
    class_cost, cost_matrix, hungarian_match, layer_loss, total_loss, GtBox, LossBreakdown, LossWeights,
    MatchResult, MatchWeights,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::afvpg::{Afvpg, ImagePrompts};
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::geometry::sincos_encode_raw;
use crate::kernels::sigmoid;
use crate::nn::{
    Backbone, Builder, FeatureEnhancer, Ffn, LayerNorm, Linear, Mlp, MsDeformAttn, MultiHeadAttention,
    MultiScaleFeatures, Reference, TextEncoder,
};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::prompt_strategies::PromptColumnSet;
use crate::real::Real;
use crate::tensor::{matmul, Matrix};

const SIGMOID_EPS: f64 = 1e-5;

pub fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS);
    (x / (1.0 - x)).ln()
}

/// Outputs of one decoder layer (or of the proposal stage), still on the graph.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// `Nq x 4`, normalized `cxcywh`.
    pub boxes: Var,
    /// `Nq x P`.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct QueryState {
    /// `Nq x D` content queries.
    pub content: Var,
    pub reference: Vec<[f64; 4]>,
    /// Token index of every selected query, in selection order.
    pub selected: Vec<usize>,
    /// Box and logit predictions of the selected tokens themselves.
    pub proposals: LayerOutput,
}

#[derive(Debug, Clone)]
pub struct RouteOutput {
    pub layers: Vec<LayerOutput>,
    pub proposals: LayerOutput,
    pub prompts: Var,
}

impl RouteOutput {
    /// Every supervised output: proposals (when enabled) then decoder layers.
    pub fn supervised(&self, with_proposals: bool) -> Vec<LayerOutput> {
        let mut v = Vec::with_capacity(self.layers.len() + 1);
        if with_proposals {
            v.push(self.proposals);
        }
        v.extend(self.layers.iter().copied());
        v
    }

    pub fn last(&self) -> LayerOutput {
        *self.layers.last().expect("at least one decoder layer")
    }
}

/// Detached predictions of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub boxes: Vec<[f64; 4]>,
    /// `Nq x P`.
    pub logits: Matrix<f32>,
    /// Category of every prompt column.
    pub column_categories: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub category: u32,
    pub score: f64,
}

impl DetectionSet {
    pub fn from_layer<T: Real>(g: &Graph<T>, out: LayerOutput, column_categories: &[u32]) -> Self {
        let b = g.value(out.boxes);
        DetectionSet {
            boxes: (0..b.rows).map(|r| [b.at(r, 0).f64(), b.at(r, 1).f64(), b.at(r, 2).f64(), b.at(r, 3).f64()]).collect(),
            logits: g.value(out.logits).cast(),
            column_categories: column_categories.to_vec(),
        }
    }

    /// Scores every (query, category) pair by the highest sigmoid over that
    /// category's columns and keeps the best `top`, ties by query then
    /// category order.
    pub fn detections(&self, top: usize) -> Vec<Detection> {
        let mut cats: Vec<u32> = self.column_categories.clone();
        cats.sort_unstable();
        cats.dedup();
        let mut out = Vec::with_capacity(self.boxes.len() * cats.len());
        for (q, b) in self.boxes.iter().enumerate() {
            for &c in &cats {
                let best = self
                    .column_categories
                    .iter()
                    .enumerate()
                    .filter(|(_, &cc)| cc == c)
                    .map(|(k, _)| self.logits.at(q, k) as f64)
                    .fold(f64::NEG_INFINITY, f64::max);
                out.push(Detection {
                    bbox: *b,
                    category: c,
                    score: sigmoid(best),
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(top);
        out
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    sa_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    ca_norm: LayerNorm,
    prompt_attn: MultiHeadAttention,
    da_norm: LayerNorm,
    deform: MsDeformAttn,
    ffn: Ffn,
    box_head: Mlp,
}

/// Query selection and the decoder.
#[derive(Debug, Clone)]
pub struct Head {
    nq: usize,
    d: usize,
    enc_output: Linear,
    enc_norm: LayerNorm,
    enc_box: Mlp,
    query_embed: ParamId,
    ref_mlp: Mlp,
    layers: Vec<DecoderLayer>,
    out_norm: LayerNorm,
    pub logit_bias: ParamId,
}

impl Head {
    pub fn new<T: Real>(bld: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let mut b = bld.with_group(ParamGroup::Head);
        let d = cfg.d_model;
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    sa_norm: LayerNorm::new(&mut b, &format!("{p}.sa_norm"), d),
                    self_attn: MultiHeadAttention::new(&mut b, &format!("{p}.self_attn"), d, cfg.heads),
                    ca_norm: LayerNorm::new(&mut b, &format!("{p}.ca_norm"), d),
                    prompt_attn: MultiHeadAttention::new(&mut b, &format!("{p}.prompt_attn"), d, cfg.heads),
                    da_norm: LayerNorm::new(&mut b, &format!("{p}.da_norm"), d),
                    deform: MsDeformAttn::new(&mut b, &format!("{p}.deform"), d, cfg.heads, 3, cfg.points, cfg.offset_init),
                    ffn: Ffn::new(&mut b, &format!("{p}.ffn"), d, cfg.ffn_dim),
                    box_head: Mlp::zero_last(&mut b, &format!("{p}.box"), &[d, d, d, 4]),
                }
            })
            .collect();
        Head {
            nq: cfg.num_queries,
            d,
            enc_output: Linear::new(&mut b, "select.proj", d, d),
            enc_norm: LayerNorm::new(&mut b, "select.norm", d),
            enc_box: Mlp::zero_last(&mut b, "select.box", &[d, d, d, 4]),
            query_embed: b.param("select.query_embed", cfg.num_queries, d, Init::Normal(1.0), true),
            ref_mlp: Mlp::new(&mut b, "decoder.ref_mlp", &[d, d, d]),
            layers,
            out_norm: LayerNorm::new(&mut b, "decoder.out_norm", d),
            logit_bias: b.param("decoder.logit_bias", 1, 1, Init::Const(cfg.logit_bias_init), true),
        }
    }

    /// Scaled dot product of query outputs and prompt columns plus a shared bias.
    fn logits<T: Real>(&self, g: &mut Graph<T>, x: Var, prompts: Var) -> Var {
        let l = g.matmul_t(x, prompts);
        let l = g.scale(l, 1.0 / (self.d as f64).sqrt());
        let b = g.param(self.logit_bias);
        g.add_bcast(l, b)
    }

    /// Top-`nq` tokens by their best prompt logit; ties go to the lower
    /// token index.
    pub fn query_select<T: Real>(
        &self,
        g: &mut Graph<T>,
        enhanced: &MultiScaleFeatures,
        prompts: Var,
        nq: usize,
    ) -> Result<QueryState> {
        let (np, _) = g.shape(prompts);
        ensure!(np >= 1, Validation, "query selection needs at least one prompt column");
        let n_tok = enhanced.num_tokens();
        ensure!(
            nq <= n_tok && nq <= self.nq,
            Validation,
            "cannot select {nq} queries from {n_tok} tokens (configured maximum {})",
            self.nq
        );
        let mem = self.enc_output.forward(g, enhanced.tokens);
        let mem = self.enc_norm.forward(g, mem);
        let scores_all = matmul(g.value(mem), g.value(prompts), true);
        let scores: Vec<f64> = (0..n_tok)
            .map(|t| scores_all.row(t).iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let selected = top_k(&scores, nq);
        let sel = g.gather_rows(mem, &selected);
        let centers = enhanced.centers();
        let levels = enhanced.token_levels();
        let mut anchors = Vec::with_capacity(nq * 4);
        for &t in &selected {
            let s = 0.05 * (1u32 << levels[t]) as f64;
            anchors.extend([centers[t][0], centers[t][1], s, s].map(inverse_sigmoid));
        }
        let anchors = g.constant(Matrix::from_f64(nq, 4, &anchors));
        let delta = self.enc_box.forward(g, sel);
        let z = g.add(delta, anchors);
        let boxes = g.sigmoid(z);
        let logits = self.logits(g, sel, prompts);
        let reference = box_rows(g.value(boxes));
        let qe = g.param(self.query_embed);
        let content = if nq == self.nq {
            qe
        } else {
            g.slice_rows(qe, 0, nq)
        };
        Ok(QueryState {
            content,
            reference,
            selected,
            proposals: LayerOutput { boxes, logits },
        })
    }

    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        queries: &QueryState,
        prompts: Var,
        enhanced: &MultiScaleFeatures,
    ) -> Vec<LayerOutput> {
        let mut q = queries.content;
        let mut reference = queries.reference.clone();
        let nq = reference.len();
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut pe = Vec::with_capacity(nq * self.d);
            for r in &reference {
                pe.extend(sincos_encode_raw(*r, self.d));
            }
            let pe = g.constant(Matrix::from_f64(nq, self.d, &pe));
            let qpos = self.ref_mlp.forward(g, pe);

            let n = layer.sa_norm.forward(g, q);
            let k = g.add(n, qpos);
            let a = layer.self_attn.forward(g, k, k, n);
            q = g.add(q, a);

            let n = layer.ca_norm.forward(g, q);
            let k = g.add(n, qpos);
            let a = layer.prompt_attn.forward(g, k, prompts, prompts);
            q = g.add(q, a);

            let n = layer.da_norm.forward(g, q);
            let k = g.add(n, qpos);
            let a = layer
                .deform
                .forward(g, k, enhanced.tokens, &enhanced.shapes, &Reference::Boxes(reference.clone()));
            q = g.add(q, a);
            q = layer.ffn.residual(g, q, 1.0);

            let out = self.out_norm.forward(g, q);
            let delta = layer.box_head.forward(g, out);
            let inv: Vec<f64> = reference.iter().flat_map(|r| r.map(inverse_sigmoid)).collect();
            let inv = g.constant(Matrix::from_f64(nq, 4, &inv));
            let z = g.add(delta, inv);
            let boxes = g.sigmoid(z);
            let logits = self.logits(g, out, prompts);
            reference = box_rows(g.value(boxes));
            outs.push(LayerOutput { boxes, logits });
        }
        outs
    }
}

fn box_rows<T: Real>(m: &Matrix<T>) -> Vec<[f64; 4]> {
    (0..m.rows)
        .map(|r| [m.at(r, 0).f64(), m.at(r, 1).f64(), m.at(r, 2).f64(), m.at(r, 3).f64()])
        .collect()
}

/// Indices of the `k` largest scores, descending, lower index first on ties.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Parameter layout of the whole model.
#[derive(Debug, Clone)]
pub struct Network {
    pub backbone: Backbone,
    pub text: TextEncoder,
    pub enhancer: FeatureEnhancer,
    pub afvpg: Afvpg,
    pub head: Head,
}

/// Configuration, parameters and module layout.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub net: Network,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut bld = Builder::new(&mut store, &mut rng, ParamGroup::Backbone);
        let backbone = Backbone::new(&mut bld, &cfg);
        let text = TextEncoder::new(&mut bld.with_group(ParamGroup::TextRoute), &cfg);
        let enhancer = FeatureEnhancer::new(&mut bld, &cfg);
        let afvpg = Afvpg::new(&mut bld, &cfg);
        let head = Head::new(&mut bld, &cfg);
        Ok(Model {
            cfg,
            store,
            net: Network {
                backbone,
                text,
                enhancer,
                afvpg,
                head,
            },
        })
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.store)
    }

    /// Backbone and enhancer without text, as used by the visual route.
    pub fn visual_features(&self, g: &mut Graph<T>, image: &Matrix<T>) -> Result<MultiScaleFeatures> {
        let raw = self.net.backbone.forward(g, image)?;
        Ok(self.net.enhancer.forward(g, &raw, None).image)
    }

    pub fn prompts_for_image(
        &self,
        g: &mut Graph<T>,
        per_category: &[(u32, Vec<crate::geometry::NormalizedBox>)],
        enhanced: &MultiScaleFeatures,
    ) -> Result<Option<ImagePrompts>> {
        self.net.afvpg.generate_prompts_for_image(g, per_category, enhanced)
    }

    /// Query selection and decoding against an arbitrary prompt matrix.
    pub fn detect_with(&self, g: &mut Graph<T>, enhanced: &MultiScaleFeatures, prompts: Var) -> Result<RouteOutput> {
        let qs = self.net.head.query_select(g, enhanced, prompts, self.cfg.num_queries)?;
        let layers = self.net.head.decode(g, &qs, prompts, enhanced);
        Ok(RouteOutput {
            layers,
            proposals: qs.proposals,
            prompts,
        })
    }

    pub fn text_route_forward(&self, g: &mut Graph<T>, image: &Matrix<T>, category_ids: &[u32]) -> Result<RouteOutput> {
        let tokens = self.net.text.forward(g, category_ids)?;
        let raw = self.net.backbone.forward(g, image)?;
        let enh = self.net.enhancer.forward(g, &raw, Some(&tokens));
        let prompts = enh.text.expect("text was supplied").tokens;
        self.detect_with(g, &enh.image, prompts)
    }

    pub fn visual_route_forward(
        &self,
        g: &mut Graph<T>,
        image: &Matrix<T>,
        columns: &PromptColumnSet,
    ) -> Result<RouteOutput> {
        ensure!(!columns.is_empty(), Validation, "visual route needs at least one prompt column");
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(columns.len() * d);
        for c in &columns.columns {
            ensure!(
                c.embedding.dim() == d,
                Shape,
                "prompt width {} does not match model width {d}",
                c.embedding.dim()
            );
            data.extend(c.embedding.vector.iter().map(|&v| T::of(v as f64)));
        }
        let prompts = g.constant(Matrix::from_vec(columns.len(), d, data));
        let enh = self.visual_features(g, image)?;
        self.detect_with(g, &enh, prompts)
    }

    pub fn param_groups(&self) -> Vec<(ParamGroup, usize)> {
        ParamGroup::ALL
            .iter()
            .map(|&gr| {
                let n = self.store.ids_in(gr).iter().map(|&id| self.store.value(id).len()).sum();
                (gr, n)
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::afvpg::{PromptSource, VisualPromptEmbedding};
    use crate::prompt_strategies::PromptColumn;
    use rand::Rng;

    pub(crate) fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            d_model: 16,
            stem_channels: [4, 8],
            level_channels: [8, 8, 8],
            heads: 2,
            points: 2,
            enhancer_layers: 1,
            decoder_layers: 2,
            ffn_dim: 16,
            num_queries: 6,
            ..ModelConfig::desk()
        }
    }

    pub(crate) fn image<T: Real>(size: usize, seed: u64) -> Matrix<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Matrix::from_f64(size * size, 3, &data)
    }

    fn columns(cats: &[u32], d: usize, seed: u64) -> PromptColumnSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PromptColumnSet {
            columns: cats
                .iter()
                .map(|&c| PromptColumn {
                    category_id: c,
                    source: PromptSource::SelfImage,
                    embedding: VisualPromptEmbedding {
                        vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        category_id: c,
                        source: PromptSource::SelfImage,
                        dataset_id: 0,
                    },
                })
                .collect(),
            positive_categories: cats.iter().copied().collect(),
        }
    }

    #[test]
    fn top_k_ties_by_index() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 0.0, 3.0], 3), vec![1, 2, 4]);
        assert_eq!(top_k(&[0.5, 0.1], 2), vec![0, 1]);
    }

    #[test]
    fn max_over_columns_selects_both() {
        let model = Model::<f64>::new(small_cfg()).unwrap();
        let mut g = model.graph();
        let f = model.visual_features(&mut g, &image(32, 1)).unwrap();
        let mem = model.net.head.enc_output.forward(&mut g, f.tokens);
        let mem = model.net.head.enc_norm.forward(&mut g, mem);
        let m = g.value(mem).clone();
        // Each prompt is a scaled copy of one token's memory row.
        let p = Matrix::from_f64(2, 16, &[m.row(3), m.row(17)].concat().iter().map(|v| v * 10.0).collect::<Vec<_>>());
        let pv = g.constant(p);
        let qs = model.net.head.query_select(&mut g, &f, pv, 2).unwrap();
        let mut sel = qs.selected.clone();
        sel.sort_unstable();
        assert_eq!(sel, vec![3, 17]);
    }

    #[test]
    fn all_tokens_when_saturated() {
        let cfg = ModelConfig {
            num_queries: 21,
            ..small_cfg()
        };
        let model = Model::<f64>::new(cfg).unwrap();
        let mut g = model.graph();
        let f = model.visual_features(&mut g, &image(32, 1)).unwrap();
        let p = g.constant(Matrix::filled(1, 16, 0.3));
        let qs = model.net.head.query_select(&mut g, &f, p, 21).unwrap();
        let mut s = qs.selected.clone();
        s.sort_unstable();
        assert_eq!(s, (0..21).collect::<Vec<_>>());
        assert!(model.net.head.query_select(&mut g, &f, p, 22).is_err());
    }

    #[test]
    fn zero_refinement_keeps_references() {
        let model = Model::<f64>::new(small_cfg()).unwrap();
        let mut g = model.graph();
        let out = model.visual_route_forward(&mut g, &image(32, 2), &columns(&[1, 2, 3], 16, 0)).unwrap();
        assert_eq!(out.layers.len(), 2);
        let p = g.value(out.proposals.boxes).clone();
        for l in &out.layers {
            assert_eq!(g.shape(l.logits), (6, 3));
            assert!(g.value(l.boxes).max_abs_diff(&p) < 1e-9);
        }
    }

    #[test]
    fn column_permutation_equivariance() {
        let model = Model::<f32>::new(small_cfg()).unwrap();
        let img = image::<f32>(32, 3);
        let cols = columns(&[1, 2, 3, 4], 16, 7);
        let perm = [2, 0, 3, 1];
        let permuted = PromptColumnSet {
            columns: perm.iter().map(|&k| cols.columns[k].clone()).collect(),
            positive_categories: cols.positive_categories.clone(),
        };
        let mut g = model.graph();
        let a = model.visual_route_forward(&mut g, &img, &cols).unwrap().last();
        let b = model.visual_route_forward(&mut g, &img, &permuted).unwrap().last();
        assert!(g.value(a.boxes).max_abs_diff(g.value(b.boxes)) < 1e-5);
        let (la, lb) = (g.value(a.logits), g.value(b.logits));
        for q in 0..6 {
            for (j, &k) in perm.iter().enumerate() {
                assert!((la.at(q, k) - lb.at(q, j)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn text_route_shapes_and_equivariance() {
        let model = Model::<f32>::new(small_cfg()).unwrap();
        let img = image::<f32>(32, 4);
        let mut g = model.graph();
        let a = model.text_route_forward(&mut g, &img, &[1, 2, 5]).unwrap().last();
        assert_eq!(g.shape(a.logits), (6, 3));
        let b = model.text_route_forward(&mut g, &img, &[5, 1, 2]).unwrap().last();
        let (la, lb) = (g.value(a.logits), g.value(b.logits));
        for q in 0..6 {
            assert!((la.at(q, 0) - lb.at(q, 1)).abs() < 1e-5);
            assert!((la.at(q, 2) - lb.at(q, 0)).abs() < 1e-5);
        }
        assert!(model.text_route_forward(&mut g, &img, &[]).is_err());
    }
}
