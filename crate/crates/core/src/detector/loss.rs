use serde::{Deserialize, Serialize};

use super::{matching, LayerOutput};
use crate::autograd::{Graph, Var};
use crate::geometry::{cxcywh_to_xyxy, giou_xyxy};
use crate::kernels::{sigmoid, FocalParams};
use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    /// Normalized `cxcywh`.
    pub bbox: [f64; 4],
    pub category: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alignment: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alignment: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Weighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub alignment: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.alignment + self.l1 + self.giou
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.alignment += o.alignment;
        self.l1 += o.l1;
        self.giou += o.giou;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            alignment: self.alignment * s,
            l1: self.l1 * s,
            giou: self.giou * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(query, gt)`, sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
}

/// Focal-style classification cost of assigning a query whose best
/// probability over the category's columns is `p`.
pub fn class_cost(p: f64, fp: FocalParams) -> f64 {
    let a = if fp.alpha < 0.0 { 0.5 } else { fp.alpha };
    let pos = a * (1.0 - p).powf(fp.gamma) * -(p + 1e-8).ln();
    let neg = (1.0 - a) * p.powf(fp.gamma) * -(1.0 - p + 1e-8).ln();
    pos - neg
}

/// `queries x gts` cost, row-major. `gt_columns[g]` lists the prompt columns
/// that count as positives for ground truth `g`.
pub fn cost_matrix(
    boxes: &[[f64; 4]],
    logits: &Matrix<f64>,
    gts: &[GtBox],
    gt_columns: &[Vec<usize>],
    w: MatchWeights,
    fp: FocalParams,
) -> Vec<f64> {
    let mut cost = Vec::with_capacity(boxes.len() * gts.len());
    for (q, b) in boxes.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let best = gt_columns[gi]
                .iter()
                .map(|&k| logits.at(q, k))
                .fold(f64::NEG_INFINITY, f64::max);
            let cls = if best.is_finite() { class_cost(sigmoid(best), fp) } else { 0.0 };
            let l1: f64 = b.iter().zip(gt.bbox).map(|(x, y)| (x - y).abs()).sum();
            let giou = giou_xyxy(cxcywh_to_xyxy(*b), cxcywh_to_xyxy(gt.bbox));
            cost.push(w.class * cls + w.l1 * l1 + w.giou * (1.0 - giou));
        }
    }
    cost
}

pub fn hungarian_match(
    boxes: &[[f64; 4]],
    logits: &Matrix<f64>,
    gts: &[GtBox],
    gt_columns: &[Vec<usize>],
    w: MatchWeights,
    fp: FocalParams,
) -> MatchResult {
    let cost = cost_matrix(boxes, logits, gts, gt_columns, w, fp);
    let pairs = matching::assign(&cost, boxes.len(), gts.len());
    let matched: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    MatchResult {
        unmatched_gt: (0..gts.len()).filter(|g| !matched.contains(g)).collect(),
        pairs,
    }
}

/// Matches one layer's predictions and returns its weighted loss on the graph.
#[allow(clippy::too_many_arguments)]
pub fn layer_loss<T: Real>(
    g: &mut Graph<T>,
    out: LayerOutput,
    gts: &[GtBox],
    gt_columns: &[Vec<usize>],
    lw: LossWeights,
    mw: MatchWeights,
    fp: FocalParams,
) -> (Var, LossBreakdown, MatchResult) {
    let boxes_m = g.value(out.boxes).to_f64();
    let nq = g.shape(out.boxes).0;
    let boxes: Vec<[f64; 4]> = boxes_m.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let logits_m: Matrix<f64> = g.value(out.logits).cast();
    let m = hungarian_match(&boxes, &logits_m, gts, gt_columns, mw, fp);
    let np = logits_m.cols;
    let norm = 1.0 / m.pairs.len().max(1) as f64;

    let mut targets = Matrix::<T>::zeros(nq, np);
    for &(q, gi) in &m.pairs {
        for &k in &gt_columns[gi] {
            targets.set(q, k, T::one());
        }
    }
    let align = g.focal_loss(out.logits, &targets, fp);
    let align = g.scale(align, lw.alignment * norm);
    let mut terms = vec![align];
    let mut br = LossBreakdown {
        alignment: g.value(align).data[0].f64(),
        ..LossBreakdown::default()
    };
    if !m.pairs.is_empty() {
        let qidx: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let tgt: Vec<f64> = m.pairs.iter().flat_map(|p| gts[p.1].bbox).collect();
        let tgt = Matrix::<T>::from_f64(qidx.len(), 4, &tgt);
        let pred = g.gather_rows(out.boxes, &qidx);
        let tv = g.constant(tgt.clone());
        let diff = g.sub(pred, tv);
        let diff = g.abs(diff);
        let l1 = g.sum_all(diff);
        let l1 = g.scale(l1, lw.l1 * norm);
        let gl = g.giou_loss(pred, &tgt);
        let gl = g.scale(gl, lw.giou * norm);
        br.l1 = g.value(l1).data[0].f64();
        br.giou = g.value(gl).data[0].f64();
        terms.push(l1);
        terms.push(gl);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    (total, br, m)
}

/// Sum of [`layer_loss`] over every supervised output.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    outputs: &[LayerOutput],
    gts: &[GtBox],
    gt_columns: &[Vec<usize>],
    lw: LossWeights,
    mw: MatchWeights,
    fp: FocalParams,
) -> (Var, LossBreakdown) {
    let mut br = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for &o in outputs {
        let (l, b, _) = layer_loss(g, o, gts, gt_columns, lw, mw, fp);
        br.add(&b);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    (total.expect("at least one output"), br)
}
