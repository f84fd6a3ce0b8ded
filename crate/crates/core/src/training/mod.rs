//! Losses, the joint labeled/unlabeled training loop, evaluation,
//! test-time intervention and experiment sweeps.

mod intervention;
mod localization;
mod loss;
mod metrics;
mod sweep;
mod train;

use serde::{Deserialize, Serialize};

use crate::alignment::{DEFAULT_BETA, DEFAULT_TAU};
use crate::encoder::{Activation, HeatmapEmbedding, Model, ModelConfig, Variant, TOY_BACKBONE};
use crate::error::{Error, Result};
use crate::pseudolabel::{ReferenceEncoder, DEFAULT_K_NN};

pub use intervention::{
    intervene, intervene_output, intervention_sweep, read_intervention_csv, ratio_range, write_intervention_csv,
    CurvePoint, InterventionMode, InterventionOutcome, InterventionRequest, SelectionOrder, INTERVENTION_FILE,
};
pub(crate) use intervention::resolve_overrides;
pub use localization::{saliency_localization, LocalizationReport};
pub use loss::{
    alignment_loss, concept_loss, objective, softmax, task_loss, total_loss, BatchRow, LossBreakdown, LossSettings,
    Supervision, TermWeights, PROB_CLAMP,
};
pub use metrics::{evaluate, metrics_from_predictions, predict_dataset, MetricsReport, Prediction};
pub use sweep::{
    ablation_study, sweep_label_ratios, write_ablation_csv, write_sweep_csv, AblationRow, SweepCell, SweepSetting,
    ABLATION_FILE, SWEEP_FILE,
};
pub use train::{read_history, train, EpochMetrics, EpochRecord, HISTORY_FILE};

/// Which alignment term the full model trains with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Pseudo label vs. soft alignment score.
    #[default]
    Full,
    /// Model prediction vs. soft alignment score; pseudo labels unused.
    WoImg,
    /// Pseudo label vs. model prediction; heatmaps unused.
    WoAlign,
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::WoImg => "wo_img",
            Ablation::WoAlign => "wo_align",
        })
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "wo_img" => Ok(Ablation::WoImg),
            "wo_align" => Ok(Ablation::WoAlign),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Size of each labeled and each unlabeled sub-batch.
    pub batch_size: usize,
    pub k_nn: usize,
    pub tau: f64,
    pub beta: f64,
    pub m: usize,
    pub n_h: usize,
    pub variant: Variant,
    pub ablation: Ablation,
    pub seed: u64,
    pub heatmap_embedding: HeatmapEmbedding,
    /// Compute pseudo labels with the trainable backbone at initialisation
    /// instead of a separate frozen one.
    pub share_reference_encoder: bool,
    /// Pooling lattice of reference features.
    pub reference_grid: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lr: 0.05,
            weight_decay: 5e-6,
            epochs: 100,
            batch_size: 32,
            k_nn: DEFAULT_K_NN,
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
            m: 16,
            n_h: 64,
            variant: Variant::Sscbm,
            ablation: Ablation::Full,
            seed: 0,
            heatmap_embedding: HeatmapEmbedding::Mixed,
            share_reference_encoder: false,
            reference_grid: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.k_nn == 0 || self.m == 0 || self.n_h == 0 {
            return bad("batch_size, k_nn, m and n_h must be positive");
        }
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return bad("tau must lie in (-1, 1)");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
            beta: self.beta,
            ablation: self.ablation,
        }
    }

    /// The encoder pseudo labels are computed with: the frozen reference
    /// backbone, or the trainable one at its seeded initialisation.
    pub fn reference_encoder(&self, input_shape: [usize; 3], k: usize, l: usize) -> Result<ReferenceEncoder> {
        if self.share_reference_encoder {
            let model = Model::new(self.model_config(input_shape, k, l), self.seed)?;
            ReferenceEncoder::from_model(model, self.reference_grid)
        } else {
            ReferenceEncoder::frozen(input_shape, self.reference_grid)
        }
    }

    pub fn model_config(&self, input_shape: [usize; 3], k: usize, l: usize) -> ModelConfig {
        ModelConfig {
            input_shape,
            conv_channels: [8, 16, 16],
            n_h: self.n_h,
            m: self.m,
            k,
            l,
            variant: self.variant,
            heatmap_embedding: self.heatmap_embedding,
            generator_activation: Activation::LeakyRelu,
            backbone: TOY_BACKBONE.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda1, c.lambda2, c.lr, c.weight_decay), (1.0, 0.1, 0.05, 5e-6));
        assert_eq!((c.epochs, c.k_nn, c.tau, c.beta, c.m), (100, 2, 0.6, 10.0, 16));
        c.validate().unwrap();
    }

    #[test]
    fn toml_keys_mirror_fields() {
        let c: TrainConfig = toml::from_str("lambda2 = 0.5\nvariant = \"cem_ssl\"\nablation = \"wo_img\"").unwrap();
        assert_eq!(c.lambda2, 0.5);
        assert_eq!(c.variant, Variant::CemSsl);
        assert_eq!(c.ablation, Ablation::WoImg);
        assert!(toml::from_str::<TrainConfig>("lamda2 = 0.5").is_err());
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let c = TrainConfig {
            lambda1: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
