//! Finite-difference gradient checks on a fixed four-example batch.

use sscbm::dataset::Image;
use sscbm::encoder::{HeatmapEmbedding, Model, ModelConfig, Variant, PARAM_NAMES};
use sscbm::training::{objective, Ablation, BatchRow, LossSettings, Supervision, TermWeights};

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn tiny_model(variant: Variant, heatmap: HeatmapEmbedding, seed: u64) -> Model {
    let mut cfg = ModelConfig::new([3, 8, 8], 5, 3, variant);
    cfg.conv_channels = [3, 4, 4];
    cfg.n_h = 6;
    cfg.m = 4;
    cfg.heatmap_embedding = heatmap;
    let mut model = Model::new(cfg, seed).unwrap();
    // non-zero biases so every bias gradient is exercised away from kinks
    for (i, t) in model.params.tensors_mut().into_iter().enumerate() {
        if PARAM_NAMES[i].ends_with(".bias") {
            for (j, v) in t.data.iter_mut().enumerate() {
                *v = 0.05 * (((i * 7 + j * 3) % 5) as f64 - 2.0);
            }
        }
    }
    model
}

pub fn images() -> Vec<Image> {
    (0..4)
        .map(|b| {
            let data = (0..3 * 8 * 8)
                .map(|i| (((i * 31 + b * 17) % 23) as f32 / 23.0 + 0.1 * b as f32).fract())
                .collect();
            Image::from_vec([3, 8, 8], data).unwrap()
        })
        .collect()
}

pub const CONCEPTS: [[u8; 5]; 2] = [[1, 0, 1, 1, 0], [0, 1, 0, 0, 1]];
pub const PSEUDO: [[f64; 5]; 2] = [[0.8, 0.2, 1.0, 0.0, 0.5], [0.0, 0.6, 0.3, 1.0, 0.9]];

pub fn rows(images: &[Image]) -> Vec<BatchRow<'_>> {
    vec![
        BatchRow { input: &images[0], class_label: Some(0), supervision: Supervision::Concepts(&CONCEPTS[0]) },
        BatchRow { input: &images[1], class_label: Some(2), supervision: Supervision::Concepts(&CONCEPTS[1]) },
        BatchRow { input: &images[2], class_label: Some(1), supervision: Supervision::Pseudo(&PSEUDO[0]) },
        BatchRow { input: &images[3], class_label: None, supervision: Supervision::Pseudo(&PSEUDO[1]) },
    ]
}

/// Worst per-group relative error `|a - n| / max(|a|, |n|)`.
pub fn check(model: &Model, settings: &LossSettings, weights: TermWeights) -> Vec<(&'static str, f64)> {
    let imgs = images();
    let batch = rows(&imgs);
    let (_, analytic) = objective(model, &batch, settings, weights).unwrap();
    let scalar = |m: &Model| weights.combine(&objective(m, &batch, settings, weights).unwrap().0);
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (g, name) in PARAM_NAMES.iter().enumerate() {
        let a = &analytic.tensors()[g].data;
        let mut diff2 = 0.0;
        let (mut a2, mut n2) = (0.0, 0.0);
        for j in 0..a.len() {
            let orig = probe.params.tensors()[g].data[j];
            probe.params.tensors_mut()[g].data[j] = orig + STEP;
            let up = scalar(&probe);
            probe.params.tensors_mut()[g].data[j] = orig - STEP;
            let down = scalar(&probe);
            probe.params.tensors_mut()[g].data[j] = orig;
            let n = (up - down) / (2.0 * STEP);
            diff2 += (a[j] - n).powi(2);
            a2 += a[j] * a[j];
            n2 += n * n;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom < 1e-10 { 0.0 } else { diff2.sqrt() / denom };
        out.push((*name, rel));
    }
    out
}

pub fn settings(ablation: Ablation) -> LossSettings {
    LossSettings { lambda1: 1.0, lambda2: 0.1, tau: 0.1, beta: 10.0, ablation }
}

pub const TASK: TermWeights = TermWeights { task: 1.0, concept: 0.0, align: 0.0 };
pub const CONCEPT: TermWeights = TermWeights { task: 0.0, concept: 1.0, align: 0.0 };
pub const ALIGN: TermWeights = TermWeights { task: 0.0, concept: 0.0, align: 1.0 };

/// Largest relative error over all groups.
pub fn worst(errs: &[(&'static str, f64)]) -> (&'static str, f64) {
    errs.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a })
}
