//! Optimizer, the visual and text training steps, the cyclical schedule and
//! the ablation harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afvpg::{cap_boxes, detach_rows, PromptSource};
use crate::autograd::{Graph, Var};
use crate::blob;
use crate::config::{hex, ModelConfig};
use crate::data_synth::{AnnotatedImage, BatchSampler, Dataset};
use crate::detector::{load_checkpoint, save_checkpoint};
use crate::detector::{total_loss, GtBox, LossBreakdown, LossWeights, MatchWeights};
use crate::detector::Model;
use crate::error::{ensure, Error, Result};
use crate::evalproto::{eval_text, eval_visual_g, eval_visual_i, extract_global_prompts, Protocol, ProtocolConfig};
use crate::geometry::NormalizedBox;
use crate::kernels::FocalParams;
use crate::params::{ParamGroup, ParamId};
use crate::prompt_strategies::{ibp_aggregate, plan_columns, BatchPromptTable, ColumnOptions, ColumnRecipe, VisualCuesBank};
use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "afvpg")]
    Afvpg,
    #[serde(rename = "+dmd")]
    Dmd,
    #[serde(rename = "+ibp")]
    Ibp,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Afvpg, Variant::Dmd, Variant::Ibp, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Afvpg => "afvpg",
            Variant::Dmd => "+dmd",
            Variant::Ibp => "+ibp",
            Variant::Full => "full",
        }
    }

    /// Row label of the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Afvpg => "AFVPG",
            Variant::Dmd => "AFVPG+DMD",
            Variant::Ibp => "AFVPG+IBP",
            Variant::Full => "AFVPG+IBP+DMD",
        }
    }

    pub fn ibp(self) -> bool {
        matches!(self, Variant::Ibp | Variant::Full)
    }

    pub fn dmd(self) -> bool {
        matches!(self, Variant::Dmd | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "afvpg" => Ok(Variant::Afvpg),
            "+dmd" | "dmd" => Ok(Variant::Dmd),
            "+ibp" | "ibp" => Ok(Variant::Ibp),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Validation(format!("unknown variant {s:?} (afvpg, +ibp, +dmd, full)"))),
        }
    }
}

/// Which groups stay fixed in each phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeSpec {
    /// Everything trains in both phases.
    None,
    /// Visual steps update only the visual-route modules (prompt generator,
    /// shared enhancer and the head); text steps update the shared modules
    /// and the text route. The backbone never moves.
    Paper,
}

impl FreezeSpec {
    pub fn frozen(self, phase: Phase) -> Vec<ParamGroup> {
        match (self, phase) {
            (FreezeSpec::None, _) => Vec::new(),
            (FreezeSpec::Paper, Phase::Visual) => vec![ParamGroup::Backbone, ParamGroup::TextRoute],
            (FreezeSpec::Paper, Phase::Text) => vec![ParamGroup::Backbone, ParamGroup::Visual],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Visual,
    Text,
}

impl Phase {
    pub fn code(self) -> char {
        match self {
            Phase::Visual => 'V',
            Phase::Text => 'T',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `(visual, text)` steps per cycle.
    pub visual_to_text_ratio: (usize, usize),
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at whose start the learning rate drops tenfold.
    pub lr_drop_epochs: Vec<usize>,
    pub freeze_spec: FreezeSpec,
    pub seed: u64,
    pub bank_capacity: usize,
    /// Bank categories sampled per image, capped at dictionary size - 1.
    pub bank_sample: usize,
    pub variant: Variant,
    pub batch_negatives: bool,
    pub hflip: bool,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub loss_weights: LossWeights,
    pub match_weights: MatchWeights,
    pub focal: FocalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Settings from the paper's implementation details.
    pub fn paper() -> Self {
        TrainConfig {
            visual_to_text_ratio: (8, 1),
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.1,
            batch_size: 8,
            epochs: 12,
            lr_drop_epochs: vec![8, 11],
            freeze_spec: FreezeSpec::Paper,
            seed: 0,
            bank_capacity: 16,
            bank_sample: 40,
            variant: Variant::Full,
            batch_negatives: true,
            hflip: false,
            max_steps: None,
            loss_weights: LossWeights::default(),
            match_weights: MatchWeights::default(),
            focal: FocalParams::default(),
        }
    }

    /// Single-core preset for the synthetic corpus.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            clip_norm: 1.0,
            freeze_spec: FreezeSpec::None,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-scale" | "desk" => Ok(Self::desk()),
            "paper-scale" | "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown training preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (v, t) = self.visual_to_text_ratio;
        ensure!(v + t > 0, Config, "visual_to_text_ratio must have a positive component");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "lr must be positive");
        ensure!(self.weight_decay >= 0.0, Config, "weight decay must be non-negative");
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(self.bank_capacity >= 1, Config, "bank capacity must be positive");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.clip_norm >= 0.0, Config, "clip norm must be non-negative");
        Ok(())
    }

    pub fn column_options(&self, dictionary: usize) -> ColumnOptions {
        ColumnOptions {
            ibp: self.variant.ibp(),
            dmd: self.variant.dmd(),
            batch_negatives: self.batch_negatives,
            bank_sample: self.bank_sample.min(dictionary.saturating_sub(1)),
        }
    }

    pub fn phase(&self, step: usize) -> Phase {
        let (v, t) = self.visual_to_text_ratio;
        if step % (v + t) < v {
            Phase::Visual
        } else {
            Phase::Text
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * 0.1f64.powi(drops as i32)
    }

    pub fn hash(&self) -> String {
        let s = serde_json::to_vec(self).expect("config serializes");
        hex(&sha2::Sha256::digest(&s))
    }
}

use sha2::Digest;

/// Decoupled-weight-decay Adam over a parameter store.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros: Vec<Matrix<T>> = model
            .store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows, p.value.cols))
            .collect();
        AdamW {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update to the parameters in `grads` outside `frozen`.
    /// Returns the pre-clip global norm over the updated parameters.
    pub fn update(
        &mut self,
        model: &mut Model<T>,
        grads: &[(ParamId, Matrix<T>)],
        lr: f64,
        cfg: &TrainConfig,
        frozen: &[ParamGroup],
    ) -> f64 {
        let live: Vec<&(ParamId, Matrix<T>)> = grads
            .iter()
            .filter(|(id, _)| !frozen.contains(&model.store.get(*id).group))
            .collect();
        let norm = live.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / (norm + 1e-6)
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in live {
            let p = model.store.get_mut(*id);
            let decay = if p.no_decay { 0.0 } else { cfg.weight_decay };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for k in 0..g.data.len() {
                let gk = g.data[k].f64() * clip;
                let mk = b1 * m.data[k].f64() + (1.0 - b1) * gk;
                let vk = b2 * v.data[k].f64() + (1.0 - b2) * gk * gk;
                m.data[k] = T::of(mk);
                v.data[k] = T::of(vk);
                let w = p.value.data[k].f64();
                let upd = lr * ((mk / bc1) / ((vk / bc2).sqrt() + cfg.eps) + decay * w);
                p.value.data[k] = T::of(w - upd);
            }
        }
        norm
    }

    /// Moments as named f32 arrays for checkpoint extras.
    pub fn export(&self, model: &Model<T>) -> Vec<(String, Matrix<f32>)> {
        let mut out = vec![("adam.step".to_string(), Matrix::scalar(self.step as f32))];
        for (id, p) in model.store.iter() {
            out.push((format!("adam.m.{}", p.name), self.m[id.0].cast()));
            out.push((format!("adam.v.{}", p.name), self.v[id.0].cast()));
        }
        out
    }

    pub fn import(model: &Model<T>, extras: &[(String, Matrix<f32>)]) -> Result<Self> {
        let find = |n: &str| {
            extras
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state {n}")))
        };
        let mut opt = AdamW::new(model);
        opt.step = find("adam.step")?.data[0] as u64;
        for (id, p) in model.store.iter() {
            opt.m[id.0] = find(&format!("adam.m.{}", p.name))?.cast();
            opt.v[id.0] = find(&format!("adam.v.{}", p.name))?.cast();
        }
        Ok(opt)
    }
}

fn gt_boxes(im: &AnnotatedImage) -> Vec<GtBox> {
    im.normalized()
        .into_iter()
        .map(|(b, c)| GtBox {
            bbox: b.as_array(),
            category: c,
        })
        .collect()
}

fn gt_columns(gts: &[GtBox], column_categories: &[u32]) -> Vec<Vec<usize>> {
    gts.iter()
        .map(|g| {
            column_categories
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == g.category)
                .map(|(k, _)| k)
                .collect()
        })
        .collect()
}

fn detached_grads<T: Real>(g: &Graph<T>, loss: Var) -> Vec<(ParamId, Matrix<T>)> {
    g.backward(loss).params().into_iter().map(|(id, m)| (id, m.clone())).collect()
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Mean prompt columns per image (visual steps).
    pub columns: f64,
}

/// One visual-prompt step on a single-dataset batch. Self prompts of every
/// image live on one graph, so batch columns pass gradients back to the
/// images that produced them. Prompts are pushed to the bank after the
/// update.
#[allow(clippy::too_many_arguments)]
pub fn visual_step<T: Real, R: Rng>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    bank: &mut VisualCuesBank,
    batch: &[AnnotatedImage],
    dictionary: usize,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepReport> {
    ensure!(!batch.is_empty(), Validation, "empty batch");
    let ds = batch[0].dataset_id;
    ensure!(batch.iter().all(|im| im.dataset_id == ds), Validation, "batch mixes datasets");
    let opts = cfg.column_options(dictionary);
    let n = batch.len();
    let (grads, breakdown, columns, pushed) = {
        let mut g = model.graph();
        let mut enh = Vec::with_capacity(n);
        let mut prompts = Vec::with_capacity(n);
        let mut table = BatchPromptTable::new(n, ds);
        for (i, im) in batch.iter().enumerate() {
            let e = model.visual_features(&mut g, &im.to_matrix())?;
            let per_cat: Vec<(u32, Vec<NormalizedBox>)> = im
                .boxes_by_category()
                .into_iter()
                .map(|(c, b)| (c, cap_boxes(&b, model.cfg.k_max, rng)))
                .collect();
            let p = model.prompts_for_image(&mut g, &per_cat, &e)?;
            if let Some(p) = &p {
                for emb in detach_rows(g.value(p.vectors), &p.category_ids, PromptSource::SelfImage, ds) {
                    table.insert(i, emb)?;
                }
            }
            enh.push(e);
            prompts.push(p);
        }
        let row_of = |g: &mut Graph<T>, s: usize, c: u32| -> Var {
            let p = prompts[s].as_ref().expect("holder has prompts");
            let r = p.category_ids.iter().position(|&x| x == c).expect("holder has category");
            g.slice_rows(p.vectors, r, 1)
        };
        let mut losses = Vec::with_capacity(n);
        let mut br = LossBreakdown::default();
        let mut ncols = 0usize;
        let mut batch_prompts = Vec::new();
        for (i, im) in batch.iter().enumerate() {
            let Some(own) = &prompts[i] else { continue };
            let positives: BTreeSet<u32> = own.category_ids.iter().copied().collect();
            let plan = plan_columns(&positives, &table, bank, i, &opts, rng);
            let mut rows = Vec::with_capacity(plan.len());
            let mut cats = Vec::with_capacity(plan.len());
            for spec in &plan {
                let v = match &spec.recipe {
                    ColumnRecipe::SelfPrompt => row_of(&mut g, i, spec.category_id),
                    ColumnRecipe::Batch(src) => {
                        if positives.contains(&spec.category_id) {
                            batch_prompts.extend(ibp_aggregate(&table, spec.category_id, i));
                        }
                        let parts: Vec<Var> = src.iter().map(|&s| row_of(&mut g, s, spec.category_id)).collect();
                        let stacked = g.concat_rows(&parts);
                        g.mean_rows(stacked)
                    }
                    ColumnRecipe::Memory(v) => {
                        g.constant(Matrix::from_vec(1, v.len(), v.iter().map(|&x| T::of(x as f64)).collect()))
                    }
                };
                rows.push(v);
                cats.push(spec.category_id);
            }
            ncols += rows.len();
            let pv = g.concat_rows(&rows);
            let out = model.detect_with(&mut g, &enh[i], pv)?;
            let gts = gt_boxes(im);
            let cols = gt_columns(&gts, &cats);
            let (l, b) = total_loss(
                &mut g,
                &out.supervised(model.cfg.encoder_aux_loss),
                &gts,
                &cols,
                cfg.loss_weights,
                cfg.match_weights,
                cfg.focal,
            );
            losses.push(l);
            br.add(&b);
        }
        ensure!(!losses.is_empty(), Validation, "no image in the batch has annotations");
        let k = losses.len();
        let sum = losses[1..].iter().fold(losses[0], |acc, &l| g.add(acc, l));
        let loss = g.scale(sum, 1.0 / k as f64);
        // Self prompts, then the intra-batch prompts that guided this step.
        let mut pushed: Vec<_> = table.iter().cloned().collect();
        pushed.extend(batch_prompts);
        (detached_grads(&g, loss), br.scaled(1.0 / k as f64), ncols as f64 / k as f64, pushed)
    };
    let frozen = cfg.freeze_spec.frozen(Phase::Visual);
    let grad_norm = opt.update(model, &grads, lr, cfg, &frozen);
    for e in &pushed {
        bank.push(e);
    }
    Ok(StepReport {
        loss: breakdown,
        grad_norm,
        columns,
    })
}

/// One text-prompt step with the dataset's whole dictionary as columns.
pub fn text_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &[AnnotatedImage],
    dictionary: &[u32],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    ensure!(!batch.is_empty(), Validation, "empty batch");
    let mut cats = dictionary.to_vec();
    cats.sort_unstable();
    let (grads, br) = {
        let mut g = model.graph();
        let mut losses = Vec::with_capacity(batch.len());
        let mut br = LossBreakdown::default();
        for im in batch {
            let out = model.text_route_forward(&mut g, &im.to_matrix(), &cats)?;
            let gts = gt_boxes(im);
            let cols = gt_columns(&gts, &cats);
            let (l, b) = total_loss(
                &mut g,
                &out.supervised(model.cfg.encoder_aux_loss),
                &gts,
                &cols,
                cfg.loss_weights,
                cfg.match_weights,
                cfg.focal,
            );
            losses.push(l);
            br.add(&b);
        }
        let k = losses.len();
        let sum = losses[1..].iter().fold(losses[0], |acc, &l| g.add(acc, l));
        let loss = g.scale(sum, 1.0 / k as f64);
        (detached_grads(&g, loss), br.scaled(1.0 / k as f64))
    };
    let grad_norm = opt.update(model, &grads, lr, cfg, &cfg.freeze_spec.frozen(Phase::Text));
    Ok(StepReport {
        loss: br,
        grad_norm,
        columns: cats.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub dataset_id: u32,
    pub lr: f64,
    pub total: f64,
    pub alignment: f64,
    pub l1: f64,
    pub giou: f64,
    pub grad_norm: f64,
    pub columns: f64,
    pub bank_occupancy: usize,
}

/// Append-only training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub entries: Vec<LedgerEntry>,
    pub checkpoints: Vec<String>,
}

impl RunLedger {
    pub fn push(&mut self, e: LedgerEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            ensure!(e.step > last.step, Validation, "ledger step {} does not follow {}", e.step, last.step);
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn phases(&self) -> String {
        self.entries.iter().map(|e| e.phase.code()).collect()
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.entries.iter().filter(|e| e.phase == phase).count()
    }

    pub const CSV_HEADER: &'static str =
        "step,epoch,phase,dataset_id,lr,total,alignment,l1,giou,grad_norm,columns,bank_occupancy";

    pub fn csv_row(e: &LedgerEntry) -> String {
        format!(
            "{},{},{},{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.2},{}",
            e.step,
            e.epoch,
            e.phase.code(),
            e.dataset_id,
            e.lr,
            e.total,
            e.alignment,
            e.l1,
            e.giou,
            e.grad_norm,
            e.columns,
            e.bank_occupancy
        )
    }

    /// Writes the CSV and JSON-lines forms from scratch.
    pub fn write(&self, csv: &Path, jsonl: &Path) -> Result<()> {
        let mut c = String::from(Self::CSV_HEADER);
        c.push('\n');
        let mut j = String::new();
        for e in &self.entries {
            c.push_str(&Self::csv_row(e));
            c.push('\n');
            j.push_str(&serde_json::to_string(e)?);
            j.push('\n');
        }
        blob::write_bytes(csv, c.as_bytes())?;
        blob::write_bytes(jsonl, j.as_bytes())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut l = RunLedger::default();
        for line in text.lines().filter(|s| !s.trim().is_empty()) {
            l.push(serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?)?;
        }
        Ok(l)
    }

    /// Median total loss of the first and last tenth of the run.
    pub fn loss_trend(&self) -> Option<(f64, f64)> {
        let n = self.entries.len();
        let k = (n / 10).max(1);
        if n < 2 {
            return None;
        }
        let med = |s: &[LedgerEntry]| {
            let mut v: Vec<f64> = s.iter().map(|e| e.total).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        Some((med(&self.entries[..k]), med(&self.entries[n - k..])))
    }
}

/// Training data: the train split of every dataset in sampler order.
pub struct TrainData {
    pub datasets: Vec<Dataset>,
}

impl TrainData {
    pub fn new(datasets: Vec<Dataset>) -> Result<Self> {
        ensure!(!datasets.is_empty(), Validation, "no training datasets");
        Ok(TrainData { datasets })
    }

    pub fn sampler(&self, cfg: &TrainConfig) -> Result<BatchSampler> {
        BatchSampler::new(self.datasets.iter().map(Dataset::len).collect(), cfg.batch_size, cfg.seed)
    }
}

/// Everything needed to continue a run.
pub struct TrainState<T: Real> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub bank: VisualCuesBank,
    pub ledger: RunLedger,
    /// Next step to run.
    pub step: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(&model);
        TrainState {
            model,
            opt,
            bank: VisualCuesBank::new(cfg.bank_capacity),
            ledger: RunLedger::default(),
            step: 0,
        }
    }

    /// Writes `ckpt-<step>.bin`, `bank-<step>.bin` and the ledger under `dir`.
    pub fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<PathBuf> {
        let ck = dir.join(format!("ckpt-{:06}.bin", self.step));
        let meta = serde_json::json!({
            "step": self.step,
            "train_config": cfg,
            "train_config_hash": cfg.hash(),
        });
        save_checkpoint(&ck, &self.model, &self.opt.export(&self.model), meta)?;
        self.bank.save(&dir.join(format!("bank-{:06}.bin", self.step)))?;
        self.ledger.write(&dir.join("ledger.csv"), &dir.join("ledger.jsonl"))?;
        Ok(ck)
    }

    /// Restores a state written by [`TrainState::save`]; refuses a
    /// different model or training configuration.
    pub fn resume(ckpt: &Path, cfg: &TrainConfig) -> Result<Self> {
        let ck = load_checkpoint(ckpt)?;
        let stored = ck.meta["train_config_hash"].as_str().unwrap_or_default();
        ensure!(
            stored == cfg.hash(),
            Config,
            "checkpoint was trained with a different training configuration"
        );
        let step = ck.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::format(ckpt, "checkpoint has no step"))? as usize;
        let model: Model<T> = ck.into_model()?;
        let opt = AdamW::import(&model, &ck.extras)?;
        let dir = ckpt.parent().unwrap_or(Path::new("."));
        let bank = VisualCuesBank::load(&dir.join(format!("bank-{step:06}.bin")))?;
        let mut ledger = RunLedger::read_jsonl(&dir.join("ledger.jsonl"))?;
        ledger.entries.retain(|e| e.step < step);
        Ok(TrainState {
            model,
            opt,
            bank,
            ledger,
            step,
        })
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11);
    rng.set_stream(step as u64);
    rng
}

pub fn total_steps(cfg: &TrainConfig, sampler: &BatchSampler) -> usize {
    cfg.max_steps.unwrap_or(cfg.epochs * sampler.batches_per_epoch())
}

/// Runs steps `state.step..total` following the repeating visual/text
/// pattern. With `out` set, a checkpoint and bank snapshot are written at
/// every epoch boundary and at the end.
pub fn run_schedule<T: Real>(
    state: &mut TrainState<T>,
    data: &TrainData,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let sampler = data.sampler(cfg)?;
    let bpe = sampler.batches_per_epoch();
    let total = total_steps(cfg, &sampler);
    let mut cached_epoch = usize::MAX;
    let mut batches = Vec::new();
    while state.step < total {
        let s = state.step;
        let epoch = s / bpe;
        if epoch != cached_epoch {
            batches = sampler.epoch(epoch as u64);
            cached_epoch = epoch;
        }
        let b = &batches[s % bpe];
        let ds = &data.datasets[b.dataset];
        let mut rng = step_rng(cfg.seed, s);
        let images: Vec<AnnotatedImage> = b
            .indices
            .iter()
            .map(|&i| {
                let im = &ds.images[i];
                if cfg.hflip && rng.random_bool(0.5) {
                    im.hflip()
                } else {
                    im.clone()
                }
            })
            .collect();
        let lr = cfg.lr_at(epoch);
        let phase = cfg.phase(s);
        let dict = ds.category_ids();
        let rep = match phase {
            Phase::Visual => visual_step(
                &mut state.model,
                &mut state.opt,
                &mut state.bank,
                &images,
                dict.len(),
                lr,
                cfg,
                &mut rng,
            )?,
            Phase::Text => text_step(&mut state.model, &mut state.opt, &images, &dict, lr, cfg)?,
        };
        if !rep.loss.total().is_finite() {
            return Err(Error::Validation(format!("loss diverged at step {s}")));
        }
        state.ledger.push(LedgerEntry {
            step: s,
            epoch,
            phase,
            dataset_id: ds.dataset_id(),
            lr,
            total: rep.loss.total(),
            alignment: rep.loss.alignment,
            l1: rep.loss.l1,
            giou: rep.loss.giou,
            grad_norm: rep.grad_norm,
            columns: rep.columns,
            bank_occupancy: state.bank.occupancy(),
        })?;
        state.step += 1;
        if s % 50 == 0 {
            log::info!(
                "step {s}/{total} {} loss {:.4} (align {:.4} l1 {:.4} giou {:.4})",
                phase.code(),
                rep.loss.total(),
                rep.loss.alignment,
                rep.loss.l1,
                rep.loss.giou
            );
        }
        if let Some(dir) = out {
            if state.step % bpe == 0 || state.step == total {
                let ck = state.save(dir, cfg)?;
                state.ledger.checkpoints.push(ck.display().to_string());
            }
        }
    }
    Ok(())
}

/// Text-only training from the current weights.
pub fn pretrain_text_route<T: Real>(
    state: &mut TrainState<T>,
    data: &TrainData,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = TrainConfig {
        visual_to_text_ratio: (0, 1),
        freeze_spec: FreezeSpec::None,
        ..cfg.clone()
    };
    run_schedule(state, data, &cfg, out)
}

/// Copies every parameter of `src` into `dst`.
pub fn inherit<T: Real>(dst: &mut Model<T>, src: &Model<T>) -> Result<()> {
    ensure!(dst.cfg.hash() == src.cfg.hash(), Config, "cannot inherit across model configurations");
    dst.store.load_values_from(&src.store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTriple {
    pub visual_i_ap: f64,
    pub visual_g_ap: f64,
    pub text_ap: f64,
}

/// Mean AP of each protocol over the held-out splits.
pub fn evaluate_all<T: Real>(model: &Model<T>, train: &[Dataset], val: &[Dataset], seed: u64) -> Result<EvalTriple> {
    let mut acc = [0.0; 3];
    for (tr, va) in train.iter().zip(val) {
        let i = eval_visual_i(model, va, &ProtocolConfig::new(Protocol::VisualI, seed))?;
        let gcfg = ProtocolConfig::new(Protocol::VisualG, seed);
        let gp = extract_global_prompts(model, tr, &gcfg)?;
        let gg = eval_visual_g(model, va, &gp, &gcfg)?;
        let t = eval_text(model, va, &ProtocolConfig::new(Protocol::Text, seed))?;
        acc[0] += i.ap;
        acc[1] += gg.ap;
        acc[2] += t.ap;
    }
    let n = train.len().max(1) as f64;
    Ok(EvalTriple {
        visual_i_ap: acc[0] / n,
        visual_g_ap: acc[1] / n,
        text_ap: acc[2] / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub seed: u64,
    pub visual_i_ap: f64,
    pub visual_g_ap: f64,
    pub text_ap: f64,
}

/// Trains each variant from the same starting weights and budget, then
/// scores all three protocols.
pub fn run_ablation_grid(
    model_cfg: &ModelConfig,
    start: Option<&Model<f32>>,
    train: &[Dataset],
    val: &[Dataset],
    cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let data = TrainData::new(train.to_vec())?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let vcfg = TrainConfig {
            variant: v,
            ..cfg.clone()
        };
        let mut model = Model::<f32>::new(model_cfg.clone())?;
        if let Some(s) = start {
            inherit(&mut model, s)?;
        }
        let mut state = TrainState::new(model, &vcfg);
        run_schedule(&mut state, &data, &vcfg, None)?;
        let e = evaluate_all(&state.model, train, val, cfg.seed)?;
        log::info!("{}: visual-i {:.4} visual-g {:.4} text {:.4}", v.label(), e.visual_i_ap, e.visual_g_ap, e.text_ap);
        rows.push(AblationRow {
            variant: v,
            label: v.label().to_string(),
            seed: cfg.seed,
            visual_i_ap: e.visual_i_ap,
            visual_g_ap: e.visual_g_ap,
            text_ap: e.text_ap,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut s = String::from("variant,label,seed,visual_i_ap,visual_g_ap,text_ap\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.variant, r.label, r.seed, r.visual_i_ap, r.visual_g_ap, r.text_ap
        ));
    }
    blob::write_bytes(path, s.as_bytes())
}

/// Appends one line to a plain-text log, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Per-group parameter deltas between two stores of the same model.
pub fn group_deltas<T: Real>(a: &Model<T>, b: &Model<T>) -> BTreeMap<ParamGroup, f64> {
    let mut out = BTreeMap::new();
    for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
        *out.entry(pa.group).or_insert(0.0) += pa.value.max_abs_diff(&pb.value);
    }
    out
}
