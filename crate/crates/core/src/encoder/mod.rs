//! The trainable concept-embedding model.
//!
//! A small convolutional backbone produces a spatial feature map and a latent
//! code. Each concept gets a positive/negative embedding pair from the latent
//! code; a shared scorer turns each pair into an activation probability that
//! mixes the pair into the final concept embedding. A linear head maps the
//! concatenated mixed embeddings (or, for the CBM variant, the probabilities)
//! to class logits. The feature map is projected to the embedding width so
//! concept embeddings can be compared against every spatial position.

mod checkpoint;
mod model;
pub(crate) mod ops;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    load_checkpoint, read_params, save_checkpoint, write_params, Checkpoint, CONFIG_FILE, PARAMS_FILE, SCHEMA_FILE,
};
pub(crate) use model::argmax;
pub use model::{BatchForward, ForwardOutput, Model, OutputGrads};
pub use ops::logistic;
pub use params::{param_shapes, Params, Tensor, PARAM_NAMES};

pub const TOY_BACKBONE: &str = "toy-conv3";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Concept embeddings + heatmap alignment on unlabeled data.
    Sscbm,
    /// Concept bottleneck on probabilities, trained on KNN pseudo-labels.
    CbmSsl,
    /// Concept embeddings trained on KNN pseudo-labels.
    CemSsl,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Sscbm => "sscbm",
            Variant::CbmSsl => "cbm_ssl",
            Variant::CemSsl => "cem_ssl",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sscbm" => Ok(Variant::Sscbm),
            "cbm_ssl" => Ok(Variant::CbmSsl),
            "cem_ssl" => Ok(Variant::CemSsl),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Which embedding the heatmaps compare against the feature map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapEmbedding {
    #[default]
    Mixed,
    Positive,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => ops::leaky_relu(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub(crate) fn grad(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => ops::leaky_relu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (C, H, W) of the input images.
    pub input_shape: [usize; 3],
    /// Output channels of the three conv stages; the last is the raw
    /// feature-map depth.
    #[serde(default = "default_conv_channels")]
    pub conv_channels: [usize; 3],
    pub n_h: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub variant: Variant,
    #[serde(default)]
    pub heatmap_embedding: HeatmapEmbedding,
    #[serde(default)]
    pub generator_activation: Activation,
    #[serde(default = "default_backbone")]
    pub backbone: String,
}

fn default_conv_channels() -> [usize; 3] {
    [8, 16, 16]
}

fn default_backbone() -> String {
    TOY_BACKBONE.to_string()
}

impl ModelConfig {
    pub fn new(input_shape: [usize; 3], k: usize, l: usize, variant: Variant) -> Self {
        Self {
            input_shape,
            conv_channels: default_conv_channels(),
            n_h: 64,
            m: 16,
            k,
            l,
            variant,
            heatmap_embedding: HeatmapEmbedding::Mixed,
            generator_activation: Activation::LeakyRelu,
            backbone: default_backbone(),
        }
    }

    /// Spatial size of the feature map: stride 2, stride 2, stride 1.
    pub fn feature_hw(&self) -> (usize, usize) {
        let h = ops::conv_out(ops::conv_out(self.input_shape[1], 2), 2);
        let w = ops::conv_out(ops::conv_out(self.input_shape[2], 2), 2);
        (h, w)
    }

    pub fn raw_channels(&self) -> usize {
        self.conv_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone != TOY_BACKBONE {
            return Err(Error::Config(format!("unknown backbone `{}`", self.backbone)));
        }
        let dims = [
            ("n_h", self.n_h),
            ("m", self.m),
            ("k", self.k),
            ("l", self.l),
            ("channels", self.input_shape[0]),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::Config("conv channels must be positive".into()));
        }
        let (h, w) = self.feature_hw();
        if self.input_shape[1] < 5 || self.input_shape[2] < 5 || h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "input {:?} too small: feature map would be {h}x{w}",
                self.input_shape
            )));
        }
        Ok(())
    }
}

/// Latent code `h` produced by the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

/// Backbone feature map before pooling and its per-position projection to
/// the embedding width. Both tensors are stored (H, W, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatureMap {
    pub height: usize,
    pub width: usize,
    pub raw_channels: usize,
    pub raw: Vec<f64>,
    pub channels: usize,
    pub projected: Vec<f64>,
}

impl SpatialFeatureMap {
    pub fn projected_at(&self, p: usize, q: usize) -> &[f64] {
        &self.projected[(p * self.width + q) * self.channels..][..self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbeddingState {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub p_hat: f64,
    pub mixed: Vec<f64>,
}

impl ConceptEmbeddingState {
    pub fn new(pos: Vec<f64>, neg: Vec<f64>, p_hat: f64) -> Self {
        let mixed = mix_embedding(&pos, &neg, p_hat);
        Self {
            pos,
            neg,
            p_hat,
            mixed,
        }
    }

    /// Replace the activation probability and remix.
    pub fn set_probability(&mut self, p_hat: f64) {
        self.p_hat = p_hat;
        self.mixed = mix_embedding(&self.pos, &self.neg, p_hat);
    }
}

/// `p * pos + (1 - p) * neg`.
pub fn mix_embedding(pos: &[f64], neg: &[f64], p_hat: f64) -> Vec<f64> {
    pos.iter()
        .zip(neg)
        .map(|(a, b)| p_hat * a + (1.0 - p_hat) * b)
        .collect()
}
