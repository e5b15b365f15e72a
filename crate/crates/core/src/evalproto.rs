//! Evaluation protocols (exemplar, global-concept and text prompting) and a
//! COCO-style AP engine.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afvpg::{cap_boxes, PromptSource, VisualPromptEmbedding};
use crate::blob;
use crate::data_synth::{AnnotatedImage, Dataset};
use crate::detector::{DetectionSet, Model};
use crate::error::{ensure, Error, Result};
use crate::geometry::{cxcywh_to_xyxy, iou_xyxy, NormalizedBox};
use crate::par;
use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    VisualI,
    VisualG,
    Text,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::VisualI => "visual-i",
            Protocol::VisualG => "visual-g",
            Protocol::Text => "text",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual-i" | "visual_i" => Ok(Protocol::VisualI),
            "visual-g" | "visual_g" => Ok(Protocol::VisualG),
            "text" => Ok(Protocol::Text),
            _ => Err(Error::Validation(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub seed: u64,
    pub score_threshold: f64,
    pub iou_thresholds: Vec<f64>,
    pub visual_g_images_per_category: usize,
    /// Detections kept per image.
    pub max_detections: usize,
}

impl ProtocolConfig {
    pub fn new(protocol: Protocol, seed: u64) -> Self {
        ProtocolConfig {
            protocol,
            seed,
            score_threshold: 0.0,
            iou_thresholds: coco_thresholds(),
            visual_g_images_per_category: 16,
            max_detections: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.iou_thresholds.is_empty(), Validation, "no IoU thresholds");
        ensure!(
            self.iou_thresholds.iter().all(|&t| t > 0.0 && t <= 1.0),
            Validation,
            "IoU thresholds must lie in (0, 1]"
        );
        ensure!(
            self.iou_thresholds.windows(2).all(|w| w[0] < w[1]),
            Validation,
            "IoU thresholds must be strictly increasing"
        );
        ensure!(self.visual_g_images_per_category >= 1, Validation, "need at least one image per category");
        ensure!(self.max_detections >= 1, Validation, "max_detections must be positive");
        Ok(())
    }
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalDetection {
    pub image_id: u64,
    pub category: u32,
    /// Normalized `cxcywh`.
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGt {
    pub image_id: u64,
    pub category: u32,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub per_category_ap: BTreeMap<u32, f64>,
}

/// Average precision of one category at one IoU threshold, 101-point
/// interpolated. Detections must already be sorted by descending score.
fn category_ap(dets: &[&EvalDetection], gts: &BTreeMap<u64, Vec<[f64; 4]>>, n_gt: usize, thr: f64) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut used: BTreeMap<u64, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for d in dets {
        let pb = cxcywh_to_xyxy(d.bbox);
        let mut best = None;
        let mut best_iou = thr;
        if let Some(list) = gts.get(&d.image_id) {
            let flags = &used[&d.image_id];
            for (k, g) in list.iter().enumerate() {
                if flags[k] {
                    continue;
                }
                let v = iou_xyxy(pb, cxcywh_to_xyxy(*g));
                if v >= best_iou {
                    best_iou = v;
                    best = Some(k);
                }
            }
        }
        match best {
            Some(k) => {
                used.get_mut(&d.image_id).expect("image present")[k] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let rt = r as f64 / 100.0;
        let pos = recall.partition_point(|&x| x < rt);
        if pos < precision.len() {
            sum += precision[pos];
        }
    }
    sum / 101.0
}

fn ap_at(dets: &[EvalDetection], gts: &[EvalGt], thresholds: &[f64]) -> BTreeMap<u32, Vec<f64>> {
    let mut by_cat: BTreeMap<u32, BTreeMap<u64, Vec<[f64; 4]>>> = BTreeMap::new();
    for g in gts {
        by_cat.entry(g.category).or_default().entry(g.image_id).or_default().push(g.bbox);
    }
    let mut out = BTreeMap::new();
    for (&c, per_image) in &by_cat {
        let n_gt = per_image.values().map(Vec::len).sum();
        let mut cd: Vec<&EvalDetection> = dets.iter().filter(|d| d.category == c).collect();
        cd.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.insert(c, thresholds.iter().map(|&t| category_ap(&cd, per_image, n_gt, t)).collect());
    }
    out
}

/// COCO-style AP over the categories that have ground truth. Detections of
/// categories without ground truth are ignored. Ties in score keep input
/// order.
pub fn compute_ap(dets: &[EvalDetection], gts: &[EvalGt], thresholds: &[f64]) -> ApSummary {
    let full = ap_at(dets, gts, thresholds);
    let at50 = ap_at(dets, gts, &[0.5]);
    let per_category_ap: BTreeMap<u32, f64> =
        full.iter().map(|(&c, v)| (c, v.iter().sum::<f64>() / v.len() as f64)).collect();
    let mean = |m: &mut dyn Iterator<Item = f64>, n: usize| if n == 0 { 0.0 } else { m.sum::<f64>() / n as f64 };
    ApSummary {
        ap: mean(&mut per_category_ap.values().copied(), per_category_ap.len()),
        ap50: mean(&mut at50.values().map(|v| v[0]), at50.len()),
        per_category_ap,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub dataset_id: u32,
    pub ap: f64,
    pub ap50: f64,
    pub per_category_ap: BTreeMap<u32, f64>,
    pub n_images: usize,
    pub skipped_images: usize,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        blob::write_json(path, self)
    }

    /// Appends `run_id,protocol,seed,ap,ap50,wall_time`, writing the header
    /// first when the file is new. `wall_time` may be left empty for
    /// reproducible output.
    pub fn append_csv(&self, path: &Path, run_id: &str, wall_time: Option<f64>) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut line = String::new();
        if fresh {
            line.push_str("run_id,protocol,seed,ap,ap50,wall_time\n");
        }
        let wt = wall_time.map(|w| format!("{w:.3}")).unwrap_or_default();
        line.push_str(&format!("{run_id},{},{},{:.6},{:.6},{wt}\n", self.protocol, self.seed, self.ap, self.ap50));
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn gts_of(images: &[&AnnotatedImage]) -> Vec<EvalGt> {
    images
        .iter()
        .flat_map(|im| {
            im.normalized().into_iter().map(move |(b, c)| EvalGt {
                image_id: im.image_id,
                category: c,
                bbox: b.as_array(),
            })
        })
        .collect()
}

fn to_eval(set: &DetectionSet, image_id: u64, cfg: &ProtocolConfig) -> Vec<EvalDetection> {
    set.detections(cfg.max_detections)
        .into_iter()
        .filter(|d| d.score >= cfg.score_threshold)
        .map(|d| EvalDetection {
            image_id,
            category: d.category,
            bbox: d.bbox,
            score: d.score,
        })
        .collect()
}

fn image_rng(seed: u64, image_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    rng
}

fn report(
    cfg: &ProtocolConfig,
    ds: &Dataset,
    per_image: Vec<Result<Option<Vec<EvalDetection>>>>,
) -> Result<EvalReport> {
    let mut dets = Vec::new();
    let mut scored = Vec::new();
    let mut skipped = 0;
    for (im, r) in ds.images.iter().zip(per_image) {
        match r? {
            Some(d) => {
                dets.extend(d);
                scored.push(im);
            }
            None => skipped += 1,
        }
    }
    let s = compute_ap(&dets, &gts_of(&scored), &cfg.iou_thresholds);
    Ok(EvalReport {
        protocol: cfg.protocol,
        seed: cfg.seed,
        dataset_id: ds.dataset_id(),
        ap: s.ap,
        ap50: s.ap50,
        per_category_ap: s.per_category_ap,
        n_images: scored.len(),
        skipped_images: skipped,
    })
}

/// Detections for one image prompted by one seeded-random GT box per
/// present category. `None` when the image has no annotations.
pub fn visual_i_image<T: Real>(
    model: &Model<T>,
    im: &AnnotatedImage,
    cfg: &ProtocolConfig,
) -> Result<Option<DetectionSet>> {
    if im.annotations.is_empty() {
        return Ok(None);
    }
    let mut rng = image_rng(cfg.seed, im.image_id);
    let per_cat: Vec<(u32, Vec<NormalizedBox>)> = im
        .boxes_by_category()
        .into_iter()
        .map(|(c, b)| {
            let k = rng.random_range(0..b.len());
            (c, vec![b[k]])
        })
        .collect();
    let mut g = model.graph();
    let enh = model.visual_features(&mut g, &im.to_matrix())?;
    let prompts = model.prompts_for_image(&mut g, &per_cat, &enh)?.expect("categories present");
    let out = model.detect_with(&mut g, &enh, prompts.vectors)?;
    Ok(Some(DetectionSet::from_layer(&g, out.last(), &prompts.category_ids)))
}

pub fn eval_visual_i<T: Real>(model: &Model<T>, ds: &Dataset, cfg: &ProtocolConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let per_image = par::map_slice(&ds.images, |im| {
        Ok(visual_i_image(model, im, cfg)?.map(|s| to_eval(&s, im.image_id, cfg)))
    });
    report(cfg, ds, per_image)
}

/// Per-category prompts averaged over sampled training images.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrompts {
    pub dataset_id: u32,
    pub dim: usize,
    pub prompts: Vec<VisualPromptEmbedding>,
    /// Categories with no training image.
    pub missing: Vec<u32>,
    /// Sampled image ids per category, in sampling order.
    pub sources: BTreeMap<u32, Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptManifest {
    dataset_id: u32,
    dim: usize,
    categories: Vec<u32>,
    missing: Vec<u32>,
    sources: BTreeMap<u32, Vec<u64>>,
}

impl GlobalPrompts {
    pub fn category_ids(&self) -> Vec<u32> {
        self.prompts.iter().map(|p| p.category_id).collect()
    }

    /// `bin` holds the rows as f32 LE; a JSON sidecar holds the rest.
    pub fn save(&self, bin: &Path) -> Result<()> {
        let flat: Vec<f32> = self.prompts.iter().flat_map(|p| p.vector.iter().copied()).collect();
        blob::write_f32(bin, &flat)?;
        blob::write_json(
            &blob::sidecar(bin),
            &PromptManifest {
                dataset_id: self.dataset_id,
                dim: self.dim,
                categories: self.category_ids(),
                missing: self.missing.clone(),
                sources: self.sources.clone(),
            },
        )
    }

    pub fn load(bin: &Path) -> Result<Self> {
        let m: PromptManifest = blob::read_json(&blob::sidecar(bin))?;
        let flat = blob::read_f32(bin)?;
        if m.dim == 0 || flat.len() != m.dim * m.categories.len() {
            return Err(Error::format(bin, "prompt payload does not match manifest"));
        }
        Ok(GlobalPrompts {
            dataset_id: m.dataset_id,
            dim: m.dim,
            prompts: m
                .categories
                .iter()
                .zip(flat.chunks(m.dim))
                .map(|(&c, v)| VisualPromptEmbedding {
                    vector: v.to_vec(),
                    category_id: c,
                    source: PromptSource::Memory,
                    dataset_id: m.dataset_id,
                })
                .collect(),
            missing: m.missing,
            sources: m.sources,
        })
    }
}

/// Image picks for one category: without replacement when enough images
/// hold it, with replacement otherwise.
fn sample_holders<R: Rng>(holders: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if holders.len() >= n {
        index::sample(rng, holders.len(), n).into_iter().map(|k| holders[k]).collect()
    } else {
        (0..n).map(|_| holders[rng.random_range(0..holders.len())]).collect()
    }
}

/// Embedding of category `c` from one image, using up to `k_max` of its boxes.
pub fn image_prompt<T: Real>(
    model: &Model<T>,
    im: &AnnotatedImage,
    c: u32,
    box_seed: u64,
) -> Result<Vec<f64>> {
    let boxes = im.boxes_by_category().remove(&c).unwrap_or_default();
    ensure!(!boxes.is_empty(), Validation, "image {} holds no instance of category {c}", im.image_id);
    let mut rng = image_rng(box_seed, im.image_id);
    let boxes = cap_boxes(&boxes, model.cfg.k_max, &mut rng);
    let mut g = model.graph();
    let enh = model.visual_features(&mut g, &im.to_matrix())?;
    let qs = model.net.afvpg.build_prompt_queries(&mut g, &boxes)?;
    let v = model.net.afvpg.generate_prompt(&mut g, &qs, &enh)?;
    Ok(g.value(v).to_f64())
}

pub fn extract_global_prompts<T: Real>(model: &Model<T>, train: &Dataset, cfg: &ProtocolConfig) -> Result<GlobalPrompts> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut missing = Vec::new();
    let mut plan: Vec<(u32, Vec<usize>)> = Vec::new();
    for c in train.category_ids() {
        let holders: Vec<usize> = train
            .images
            .iter()
            .enumerate()
            .filter(|(_, im)| im.annotations.iter().any(|a| a.category_id == c))
            .map(|(i, _)| i)
            .collect();
        if holders.is_empty() {
            log::warn!("category {c} has no training image; excluded from prompts");
            missing.push(c);
            continue;
        }
        plan.push((c, sample_holders(&holders, cfg.visual_g_images_per_category, &mut rng)));
    }
    // Each distinct (category, image) pair is embedded once.
    let mut jobs: Vec<(u32, usize)> = plan.iter().flat_map(|(c, ims)| ims.iter().map(move |&i| (*c, i))).collect();
    jobs.sort_unstable();
    jobs.dedup();
    let vecs = par::map_slice(&jobs, |&(c, i)| image_prompt(model, &train.images[i], c, cfg.seed));
    let mut cache = BTreeMap::new();
    for (job, v) in jobs.into_iter().zip(vecs) {
        cache.insert(job, v?);
    }
    let dim = model.cfg.d_model;
    let mut prompts = Vec::with_capacity(plan.len());
    let mut sources = BTreeMap::new();
    for (c, ims) in &plan {
        let mut acc = vec![0.0f64; dim];
        for &i in ims {
            for (a, v) in acc.iter_mut().zip(&cache[&(*c, i)]) {
                *a += v;
            }
        }
        prompts.push(VisualPromptEmbedding {
            vector: acc.iter().map(|a| (a / ims.len() as f64) as f32).collect(),
            category_id: *c,
            source: PromptSource::Memory,
            dataset_id: train.dataset_id(),
        });
        sources.insert(*c, ims.iter().map(|&i| train.images[i].image_id).collect());
    }
    Ok(GlobalPrompts {
        dataset_id: train.dataset_id(),
        dim,
        prompts,
        missing,
        sources,
    })
}

/// Prompt rows sorted by category so the forward pass does not depend on
/// file order.
fn canonical_prompts<T: Real>(p: &GlobalPrompts) -> (Matrix<T>, Vec<u32>) {
    let mut rows: Vec<&VisualPromptEmbedding> = p.prompts.iter().collect();
    rows.sort_by_key(|e| e.category_id);
    let data = rows.iter().flat_map(|e| e.vector.iter().map(|&v| T::of(v as f64))).collect();
    (Matrix::from_vec(rows.len(), p.dim, data), rows.iter().map(|e| e.category_id).collect())
}

pub fn eval_visual_g<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    prompts: &GlobalPrompts,
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    ensure!(
        prompts.dim == model.cfg.d_model,
        Validation,
        "prompt width {} does not match model width {}",
        prompts.dim,
        model.cfg.d_model
    );
    let have = prompts.category_ids();
    for c in ds.category_ids() {
        ensure!(
            have.contains(&c) || prompts.missing.contains(&c),
            Validation,
            "prompt file does not cover category {c}"
        );
    }
    for c in &have {
        ensure!(ds.category_ids().contains(c), Validation, "prompt category {c} is not in the dataset dictionary");
    }
    ensure!(!have.is_empty(), Validation, "prompt file is empty");
    let (pm, cats) = canonical_prompts::<T>(prompts);
    let per_image = par::map_slice(&ds.images, |im| {
        let mut g = model.graph();
        let enh = model.visual_features(&mut g, &im.to_matrix())?;
        let pv = g.constant(pm.clone());
        let out = model.detect_with(&mut g, &enh, pv)?;
        Ok(Some(to_eval(&DetectionSet::from_layer(&g, out.last(), &cats), im.image_id, cfg)))
    });
    report(cfg, ds, per_image)
}

pub fn text_image<T: Real>(model: &Model<T>, im: &AnnotatedImage, cats: &[u32]) -> Result<DetectionSet> {
    let mut g = model.graph();
    let out = model.text_route_forward(&mut g, &im.to_matrix(), cats)?;
    Ok(DetectionSet::from_layer(&g, out.last(), cats))
}

pub fn eval_text<T: Real>(model: &Model<T>, ds: &Dataset, cfg: &ProtocolConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut cats = ds.category_ids();
    cats.sort_unstable();
    let per_image = par::map_slice(&ds.images, |im| Ok(Some(to_eval(&text_image(model, im, &cats)?, im.image_id, cfg))));
    report(cfg, ds, per_image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate, SceneSpec};
    use crate::detector::tests::small_cfg;

    fn det(img: u64, c: u32, b: [f64; 4], s: f64) -> EvalDetection {
        EvalDetection {
            image_id: img,
            category: c,
            bbox: b,
            score: s,
        }
    }

    fn gt(img: u64, c: u32, b: [f64; 4]) -> EvalGt {
        EvalGt {
            image_id: img,
            category: c,
            bbox: b,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let gts = [gt(1, 1, [0.3, 0.3, 0.2, 0.2]), gt(1, 2, [0.7, 0.7, 0.2, 0.3]), gt(2, 1, [0.5, 0.5, 0.4, 0.4])];
        let dets: Vec<_> = gts.iter().map(|g| det(g.image_id, g.category, g.bbox, 0.9)).collect();
        let s = compute_ap(&dets, &gts, &coco_thresholds());
        assert_eq!(s.ap, 1.0);
        assert_eq!(s.ap50, 1.0);
        let s = compute_ap(&[], &gts, &coco_thresholds());
        assert_eq!(s.ap, 0.0);
    }

    #[test]
    fn two_gt_fixture() {
        // One hit at score .9 and one miss at .8 against two ground truths:
        // precision 1 on the 51 recall points 0.00..=0.50, zero after.
        let gts = [gt(1, 1, [0.25, 0.25, 0.2, 0.2]), gt(1, 1, [0.75, 0.75, 0.2, 0.2])];
        let dets = [det(1, 1, [0.25, 0.25, 0.2, 0.2], 0.9), det(1, 1, [0.5, 0.1, 0.05, 0.05], 0.8)];
        let s = compute_ap(&dets, &gts, &coco_thresholds());
        assert!((s.ap50 - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_counts_once() {
        let gts = [gt(1, 1, [0.5, 0.5, 0.2, 0.2])];
        let b = [0.5, 0.5, 0.2, 0.2];
        let s = compute_ap(&[det(1, 1, b, 0.9), det(1, 1, b, 0.8)], &gts, &[0.5]);
        assert_eq!(s.ap, 1.0);
        let s = compute_ap(&[det(1, 1, [0.1, 0.1, 0.05, 0.05], 0.95), det(1, 1, b, 0.8)], &gts, &[0.5]);
        assert!((s.ap - 1.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_validation() {
        let mut c = ProtocolConfig::new(Protocol::Text, 0);
        c.iou_thresholds = vec![0.5, 0.5];
        assert!(c.validate().is_err());
        c.iou_thresholds = vec![0.0, 0.5];
        assert!(c.validate().is_err());
        assert_eq!("visual-g".parse::<Protocol>().unwrap(), Protocol::VisualG);
        assert!("visual".parse::<Protocol>().is_err());
    }

    fn tiny_data() -> Dataset {
        let mut spec = SceneSpec::default_pair(32).remove(0);
        spec.object_scale = (0.15, 0.3);
        generate(&spec, 6, 11).unwrap()
    }

    #[test]
    fn protocols_are_deterministic() {
        let model = Model::<f32>::new(small_cfg()).unwrap();
        let ds = tiny_data();
        for p in [Protocol::VisualI, Protocol::Text] {
            let cfg = ProtocolConfig::new(p, 3);
            let a = match p {
                Protocol::VisualI => eval_visual_i(&model, &ds, &cfg).unwrap(),
                _ => eval_text(&model, &ds, &cfg).unwrap(),
            };
            let b = match p {
                Protocol::VisualI => eval_visual_i(&model, &ds, &cfg).unwrap(),
                _ => eval_text(&model, &ds, &cfg).unwrap(),
            };
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            assert!((0.0..=1.0).contains(&a.ap));
            assert_eq!(a.n_images, 6);
        }
    }

    #[test]
    fn global_prompts_average_and_order() {
        let model = Model::<f64>::new(small_cfg()).unwrap();
        let ds = tiny_data();
        let cfg = ProtocolConfig::new(Protocol::VisualG, 5);
        let gp = extract_global_prompts(&model, &ds, &cfg).unwrap();
        assert_eq!(gp.prompts.len() + gp.missing.len(), 6);
        // Streamed mean of the sampled images agrees with the cached average.
        let p = &gp.prompts[0];
        let srcs = &gp.sources[&p.category_id];
        assert_eq!(srcs.len(), 16);
        let mut acc = vec![0.0; gp.dim];
        for (n, id) in srcs.iter().enumerate() {
            let im = ds.images.iter().find(|im| im.image_id == *id).unwrap();
            let v = image_prompt(&model, im, p.category_id, cfg.seed).unwrap();
            for (a, x) in acc.iter_mut().zip(v) {
                *a += (x - *a) / (n + 1) as f64;
            }
        }
        for (a, b) in acc.iter().zip(&p.vector) {
            assert!((a - *b as f64).abs() < 1e-6);
        }

        let mut rev = gp.clone();
        rev.prompts.reverse();
        let a = eval_visual_g(&model, &ds, &gp, &cfg).unwrap();
        let b = eval_visual_g(&model, &ds, &rev, &cfg).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        gp.save(&path).unwrap();
        assert_eq!(GlobalPrompts::load(&path).unwrap().prompts.len(), gp.prompts.len());

        let mut short = gp.clone();
        short.prompts.truncate(1);
        short.missing.clear();
        assert!(eval_visual_g(&model, &ds, &short, &cfg).is_err());
    }

    #[test]
    fn self_retrieval_single_object() {
        let gts = [gt(1, 4, [0.4, 0.6, 0.3, 0.2])];
        let s = compute_ap(&[det(1, 4, [0.4, 0.6, 0.3, 0.2], 0.2)], &gts, &coco_thresholds());
        assert_eq!(s.ap, 1.0);
    }

    #[test]
    fn csv_appends_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let r = EvalReport {
            protocol: Protocol::Text,
            seed: 1,
            dataset_id: 0,
            ap: 0.25,
            ap50: 0.5,
            per_category_ap: BTreeMap::new(),
            n_images: 3,
            skipped_images: 0,
        };
        r.append_csv(&p, "run", None).unwrap();
        r.append_csv(&p, "run", Some(1.5)).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.ends_with("run,text,1,0.250000,0.500000,1.500\n"));
    }
}
