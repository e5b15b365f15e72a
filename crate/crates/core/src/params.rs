//! Named parameter storage. A parameter is owned exactly once by the store;
//! modules hold [`ParamId`] handles, so two modules that reference the same id
//! share the same tensor.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Coarse ownership groups used by freeze policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Convolutional feature extractor and its input projections.
    Backbone,
    /// Deformable self-attention and FFN of the feature enhancer. Shared by
    /// both prompt routes.
    Enhancer,
    /// Text embedding table and the image/text fusion blocks.
    TextRoute,
    /// Visual prompt generator.
    Visual,
    /// Query selection, decoder and prediction heads.
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::Enhancer,
        ParamGroup::TextRoute,
        ParamGroup::Visual,
        ParamGroup::Head,
    ];
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
    /// Excluded from weight decay (biases, norms, embeddings).
    pub no_decay: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Glorot uniform over `(fan_in = rows, fan_out = cols)`.
    Xavier,
    Normal(f64),
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Matrix<T>, no_decay: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
            no_decay,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    #[allow(clippy::too_many_arguments)]
    pub fn add_init(
        &mut self,
        name: &str,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        init: Init,
        no_decay: bool,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n = rows * cols;
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Xavier => {
                let b = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        self.add(name, group, Matrix::from_f64(rows, cols, &data), no_decay)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same layout, values converted to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    no_decay: p.no_decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copy values from `other` by name. Both stores must have identical
    /// layouts.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> crate::Result<()> {
        if other.len() != self.len() {
            return Err(crate::Error::Shape(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| crate::Error::Shape(format!("missing parameter {}", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(crate::Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
