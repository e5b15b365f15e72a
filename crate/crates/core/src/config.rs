//! Model hyper-parameters and named presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};

/// Initial bias of the deformable sampling-offset projection. Its weight
/// matrix is always zero-initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetInit {
    /// Every sampling point starts exactly at its reference center.
    Zero,
    /// Points start on rays around the reference, one direction per head.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input resolution; must be divisible by the coarsest stride (32).
    pub image_size: usize,
    pub d_model: usize,
    /// Widths of the two stride-2 stem convolutions ahead of the pyramid.
    pub stem_channels: [usize; 2],
    /// Channel count `C_i` of each pyramid level before projection to `d_model`.
    pub level_channels: [usize; 3],
    pub heads: usize,
    pub points: usize,
    pub enhancer_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    /// Size of the text surrogate's embedding table (category ids `0..n`).
    pub num_categories: usize,
    /// Upper bound on prompt boxes per category per image.
    pub k_max: usize,
    pub offset_init: OffsetInit,
    /// Initial value of the learnable bias added to every alignment logit.
    pub logit_bias_init: f64,
    /// Multiplier on every residual branch; 1.0 except in identity tests.
    pub branch_scale: f64,
    /// Supervise the query-selection proposals as an extra output.
    pub encoder_aux_loss: bool,
    /// Contrastive denoising queries. Not implemented; validation rejects it.
    pub cdn: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale preset sized for single-core CPU training on 64x64 scenes.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            d_model: 64,
            stem_channels: [16, 32],
            level_channels: [64, 64, 64],
            heads: 4,
            points: 4,
            enhancer_layers: 2,
            decoder_layers: 3,
            ffn_dim: 128,
            num_queries: 30,
            num_categories: 64,
            k_max: 8,
            offset_init: OffsetInit::Grid,
            logit_bias_init: -(99.0f64).ln(),
            branch_scale: 1.0,
            encoder_aux_loss: true,
            cdn: false,
            seed: 0,
        }
    }

    /// Paper-scale dimensions (900 queries, 6 decoder layers, width 256).
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 800,
            d_model: 256,
            stem_channels: [64, 128],
            level_channels: [256, 512, 1024],
            heads: 8,
            points: 4,
            enhancer_layers: 6,
            decoder_layers: 6,
            ffn_dim: 2048,
            num_queries: 900,
            num_categories: 400,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-scale" | "desk" => Ok(Self::desk()),
            "paper-scale" | "paper" => Ok(Self::paper()),
            other => Err(crate::Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    /// `(H_l, W_l)` of the three pyramid levels at strides 8, 16 and 32.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        [8, 16, 32]
            .iter()
            .map(|s| (self.image_size / s, self.image_size / s))
            .collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.level_shapes().iter().map(|(h, w)| h * w).sum()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.image_size > 0 && self.image_size % 32 == 0,
            Config,
            "image_size {} must be a positive multiple of 32",
            self.image_size
        );
        ensure!(
            self.d_model % 8 == 0,
            Config,
            "d_model {} must be divisible by 8",
            self.d_model
        );
        ensure!(
            self.d_model % self.heads == 0,
            Config,
            "d_model {} must split over {} heads",
            self.d_model,
            self.heads
        );
        ensure!(self.points >= 1, Config, "need at least one sampling point");
        ensure!(self.decoder_layers >= 1, Config, "need at least one decoder layer");
        ensure!(self.k_max >= 1, Config, "k_max must be positive");
        ensure!(
            self.num_queries >= 1 && self.num_queries <= self.num_tokens(),
            Config,
            "num_queries {} must be in 1..={} (encoder tokens at {}px)",
            self.num_queries,
            self.num_tokens(),
            self.image_size
        );
        ensure!(
            !self.cdn,
            Config,
            "contrastive denoising queries are not supported by this implementation"
        );
        Ok(())
    }

    /// Stable content hash, used to refuse mismatched checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
