//! Intra-batch prompt averaging, the per-dataset visual cues bank, and the
//! assembly of prompt columns for one image.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::seq::IteratorRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::afvpg::{PromptSource, VisualPromptEmbedding};
use crate::blob;
use crate::error::{ensure, Error, Result};

fn mean(vectors: &[&[f32]]) -> Vec<f32> {
    let d = vectors[0].len();
    let mut acc = vec![0.0f64; d];
    for v in vectors {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += x as f64;
        }
    }
    let n = vectors.len() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Self prompts of every image in a batch, keyed by `(category, sample)`.
#[derive(Debug, Clone, Default)]
pub struct BatchPromptTable {
    entries: BTreeMap<(u32, usize), VisualPromptEmbedding>,
    pub batch_size: usize,
    pub dataset_id: u32,
}

impl BatchPromptTable {
    pub fn new(batch_size: usize, dataset_id: u32) -> Self {
        BatchPromptTable {
            entries: BTreeMap::new(),
            batch_size,
            dataset_id,
        }
    }

    pub fn insert(&mut self, sample: usize, e: VisualPromptEmbedding) -> Result<()> {
        ensure!(
            sample < self.batch_size,
            Validation,
            "sample index {sample} outside batch of {}",
            self.batch_size
        );
        ensure!(
            e.source == PromptSource::SelfImage,
            Validation,
            "batch table holds self prompts only"
        );
        self.entries.insert((e.category_id, sample), e);
        Ok(())
    }

    pub fn get(&self, category: u32, sample: usize) -> Option<&VisualPromptEmbedding> {
        self.entries.get(&(category, sample))
    }

    pub fn categories(&self) -> BTreeSet<u32> {
        self.entries.keys().map(|(c, _)| *c).collect()
    }

    /// Samples `J` whose image produced a prompt for `category`.
    pub fn holders(&self, category: u32) -> Vec<usize> {
        self.entries
            .range((category, 0)..=(category, usize::MAX))
            .map(|((_, j), _)| *j)
            .collect()
    }

    /// Samples averaged into the batch prompt of `category` for sample `i`:
    /// every holder except `i` itself. `None` when that set is empty.
    pub fn ibp_sources(&self, category: u32, i: usize) -> Option<Vec<usize>> {
        let src: Vec<usize> = self.holders(category).into_iter().filter(|&j| j != i).collect();
        (!src.is_empty()).then_some(src)
    }

    pub fn iter(&self) -> impl Iterator<Item = &VisualPromptEmbedding> {
        self.entries.values()
    }
}

/// Mean of the other batch images' prompts for `category`, as seen from
/// sample `i`.
pub fn ibp_aggregate(table: &BatchPromptTable, category: u32, i: usize) -> Option<VisualPromptEmbedding> {
    let src = table.ibp_sources(category, i)?;
    let vecs: Vec<&[f32]> = src
        .iter()
        .map(|&j| table.get(category, j).expect("holder").vector.as_slice())
        .collect();
    Some(VisualPromptEmbedding {
        vector: mean(&vecs),
        category_id: category,
        source: PromptSource::Batch,
        dataset_id: table.dataset_id,
    })
}

/// Per-dataset, per-category FIFO queues of past prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualCuesBank {
    capacity: usize,
    queues: BTreeMap<u32, BTreeMap<u32, VecDeque<Vec<f32>>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankManifest {
    capacity: usize,
    dim: usize,
    /// `(dataset_id, category_id, length)` in file order, oldest first.
    queues: Vec<(u32, u32, usize)>,
}

impl VisualCuesBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "bank capacity must be positive");
        VisualCuesBank {
            capacity,
            queues: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends a copy, evicting the oldest entry once the queue is full.
    pub fn push(&mut self, e: &VisualPromptEmbedding) {
        let q = self
            .queues
            .entry(e.dataset_id)
            .or_default()
            .entry(e.category_id)
            .or_default();
        q.push_back(e.vector.clone());
        while q.len() > self.capacity {
            q.pop_front();
        }
    }

    pub fn queue(&self, dataset_id: u32, category: u32) -> Option<&VecDeque<Vec<f32>>> {
        self.queues.get(&dataset_id).and_then(|m| m.get(&category))
    }

    pub fn len(&self, dataset_id: u32, category: u32) -> usize {
        self.queue(dataset_id, category).map_or(0, |q| q.len())
    }

    pub fn is_empty(&self) -> bool {
        self.queues.values().all(|m| m.values().all(|q| q.is_empty()))
    }

    /// Total stored embeddings across all queues.
    pub fn occupancy(&self) -> usize {
        self.queues.values().flat_map(|m| m.values()).map(|q| q.len()).sum()
    }

    pub fn datasets(&self) -> Vec<u32> {
        self.queues.keys().copied().collect()
    }

    /// Categories of one dataset with a non-empty queue, ascending.
    pub fn populated(&self, dataset_id: u32) -> Vec<u32> {
        self.queues
            .get(&dataset_id)
            .map(|m| m.iter().filter(|(_, q)| !q.is_empty()).map(|(c, _)| *c).collect())
            .unwrap_or_default()
    }

    pub fn save(&self, bin: &Path) -> Result<()> {
        let mut data = Vec::new();
        let mut queues = Vec::new();
        let mut dim = 0;
        for (&ds, m) in &self.queues {
            for (&c, q) in m {
                queues.push((ds, c, q.len()));
                for v in q {
                    dim = v.len();
                    data.extend_from_slice(v);
                }
            }
        }
        blob::write_f32(bin, &data)?;
        blob::write_json(
            &blob::sidecar(bin),
            &BankManifest {
                capacity: self.capacity,
                dim,
                queues,
            },
        )
    }

    pub fn load(bin: &Path) -> Result<Self> {
        let m: BankManifest = blob::read_json(&blob::sidecar(bin))?;
        let data = blob::read_f32(bin)?;
        let total: usize = m.queues.iter().map(|q| q.2).sum();
        if total * m.dim != data.len() {
            return Err(Error::format(bin, "bank payload does not match its manifest"));
        }
        let mut bank = VisualCuesBank::new(m.capacity);
        let mut off = 0;
        for (ds, c, n) in m.queues {
            let q = bank.queues.entry(ds).or_default().entry(c).or_default();
            for _ in 0..n {
                q.push_back(data[off..off + m.dim].to_vec());
                off += m.dim;
            }
        }
        Ok(bank)
    }
}

/// Mean of everything currently stored for `category` (divides by the
/// current queue length).
pub fn dmd_aggregate(bank: &VisualCuesBank, dataset_id: u32, category: u32) -> Option<VisualPromptEmbedding> {
    let q = bank.queue(dataset_id, category).filter(|q| !q.is_empty())?;
    let vecs: Vec<&[f32]> = q.iter().map(|v| v.as_slice()).collect();
    Some(VisualPromptEmbedding {
        vector: mean(&vecs),
        category_id: category,
        source: PromptSource::Memory,
        dataset_id,
    })
}

/// Uniform sample without replacement of up to `d` populated categories.
pub fn sample_bank_categories<R: Rng>(bank: &VisualCuesBank, dataset_id: u32, d: usize, rng: &mut R) -> BTreeSet<u32> {
    bank.populated(dataset_id).into_iter().choose_multiple(rng, d).into_iter().collect()
}

/// How one prompt column is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnRecipe {
    /// This image's own prompt.
    SelfPrompt,
    /// Mean of these batch samples' self prompts.
    Batch(Vec<usize>),
    /// Bank mean, already detached.
    Memory(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub category_id: u32,
    pub source: PromptSource,
    pub recipe: ColumnRecipe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnOptions {
    pub ibp: bool,
    pub dmd: bool,
    /// Batch prompts of categories absent from this image become negatives.
    pub batch_negatives: bool,
    /// Number of bank categories sampled per image.
    pub bank_sample: usize,
}

impl Default for ColumnOptions {
    fn default() -> Self {
        ColumnOptions {
            ibp: true,
            dmd: true,
            batch_negatives: true,
            bank_sample: 40,
        }
    }
}

/// Column order: positives by category then source, then negatives by
/// category then source.
pub fn plan_columns<R: Rng>(
    positives: &BTreeSet<u32>,
    table: &BatchPromptTable,
    bank: &VisualCuesBank,
    i: usize,
    opts: &ColumnOptions,
    rng: &mut R,
) -> Vec<ColumnSpec> {
    let ds = table.dataset_id;
    let mut cols = Vec::new();
    let push_cat = |cols: &mut Vec<ColumnSpec>, c: u32, with_self: bool, with_mem: bool| {
        if with_self {
            cols.push(ColumnSpec {
                category_id: c,
                source: PromptSource::SelfImage,
                recipe: ColumnRecipe::SelfPrompt,
            });
        }
        if opts.ibp && (with_self || opts.batch_negatives) {
            if let Some(src) = table.ibp_sources(c, i) {
                cols.push(ColumnSpec {
                    category_id: c,
                    source: PromptSource::Batch,
                    recipe: ColumnRecipe::Batch(src),
                });
            }
        }
        if opts.dmd && with_mem {
            if let Some(m) = dmd_aggregate(bank, ds, c) {
                cols.push(ColumnSpec {
                    category_id: c,
                    source: PromptSource::Memory,
                    recipe: ColumnRecipe::Memory(m.vector),
                });
            }
        }
    };
    for &c in positives {
        push_cat(&mut cols, c, true, true);
    }
    let sampled = if opts.dmd {
        sample_bank_categories(bank, ds, opts.bank_sample, rng)
    } else {
        BTreeSet::new()
    };
    let mut negatives: BTreeSet<u32> = sampled.difference(positives).copied().collect();
    if opts.ibp && opts.batch_negatives {
        negatives.extend(table.categories().difference(positives));
    }
    for c in negatives {
        push_cat(&mut cols, c, false, sampled.contains(&c));
    }
    cols
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptColumn {
    pub category_id: u32,
    pub source: PromptSource,
    pub embedding: VisualPromptEmbedding,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptColumnSet {
    pub columns: Vec<PromptColumn>,
    pub positive_categories: BTreeSet<u32>,
}

impl PromptColumnSet {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Column indices per category.
    pub fn columns_of(&self, category: u32) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.category_id == category)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn category_ids(&self) -> Vec<u32> {
        self.columns.iter().map(|c| c.category_id).collect()
    }

    /// Only the self columns, in order, for prompt-only forwards.
    pub fn from_self(prompts: &[VisualPromptEmbedding]) -> Self {
        PromptColumnSet {
            columns: prompts
                .iter()
                .map(|e| PromptColumn {
                    category_id: e.category_id,
                    source: e.source,
                    embedding: e.clone(),
                })
                .collect(),
            positive_categories: prompts.iter().map(|e| e.category_id).collect(),
        }
    }
}

/// Detached column set for sample `i` given its own prompts.
pub fn assemble_prompt_columns<R: Rng>(
    self_prompts: &[VisualPromptEmbedding],
    table: &BatchPromptTable,
    bank: &VisualCuesBank,
    i: usize,
    opts: &ColumnOptions,
    rng: &mut R,
) -> PromptColumnSet {
    let own: BTreeMap<u32, &VisualPromptEmbedding> = self_prompts.iter().map(|e| (e.category_id, e)).collect();
    let positives: BTreeSet<u32> = own.keys().copied().collect();
    let columns = plan_columns(&positives, table, bank, i, opts, rng)
        .into_iter()
        .map(|spec| {
            let embedding = match spec.recipe {
                ColumnRecipe::SelfPrompt => own[&spec.category_id].clone(),
                ColumnRecipe::Batch(_) => ibp_aggregate(table, spec.category_id, i).expect("planned batch column"),
                ColumnRecipe::Memory(v) => VisualPromptEmbedding {
                    vector: v,
                    category_id: spec.category_id,
                    source: PromptSource::Memory,
                    dataset_id: table.dataset_id,
                },
            };
            PromptColumn {
                category_id: spec.category_id,
                source: spec.source,
                embedding,
            }
        })
        .collect();
    PromptColumnSet {
        columns,
        positive_categories: positives,
    }
}
