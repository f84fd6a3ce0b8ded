use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, Ablation, TrainConfig};
use crate::dataset::{split_semi, Dataset, Example, SemiSplit, SplitMode, SplitSpec};
use crate::encoder::{Model, Variant};
use crate::error::{Error, Result};
use crate::pseudolabel::{pseudo_label_split, PseudoLabel};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// One row of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub setting: String,
    pub variant: Variant,
    pub concept_acc: f64,
    pub task_acc: f64,
}

pub type SweepSetting = SplitMode;

/// Train and evaluate every variant on every labeled-data setting. Each
/// setting uses one split (seeded by `cfg.seed`) shared by all variants.
pub fn sweep_label_ratios(
    train_examples: &[Example],
    test: &Dataset,
    settings: &[SweepSetting],
    variants: &[Variant],
    cfg: &TrainConfig,
    mut on_cell: impl FnMut(&SweepCell),
) -> Result<Vec<SweepCell>> {
    let shape = test
        .input_shape()
        .ok_or_else(|| Error::Config("empty test set".into()))?;
    let (k, l) = (test.schema.k, test.n_classes);
    let mut cells = Vec::with_capacity(settings.len() * variants.len());
    for &mode in settings {
        let spec = SplitSpec {
            mode,
            seed: cfg.seed,
            strict_unsupervised: false,
        };
        let split = split_semi(train_examples, &spec)?;
        for &variant in variants {
            let run_cfg = TrainConfig {
                variant,
                ..cfg.clone()
            };
            let mut model = Model::new(run_cfg.model_config(shape, k, l), run_cfg.seed)?;
            let encoder = run_cfg.reference_encoder(shape, k, l)?;
            let pseudo = pseudo_label_split(&encoder, &split, run_cfg.k_nn)?;
            train(&mut model, &split, &pseudo, &run_cfg, None, |_| {})?;
            let r = evaluate(&model, test)?;
            let cell = SweepCell {
                setting: mode.to_string(),
                variant,
                concept_acc: r.concept_accuracy,
                task_acc: r.task_accuracy,
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub seed: u64,
    pub concept_acc: f64,
    pub task_acc: f64,
}

/// Train one model per (seed, ablation) on a fixed split and pseudo labels.
pub fn ablation_study(
    split: &SemiSplit,
    pseudo: &BTreeMap<String, PseudoLabel>,
    test: &Dataset,
    ablations: &[Ablation],
    seeds: &[u64],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let shape = test
        .input_shape()
        .ok_or_else(|| Error::Config("empty test set".into()))?;
    let (k, l) = (test.schema.k, test.n_classes);
    let mut rows = Vec::with_capacity(ablations.len() * seeds.len());
    for &seed in seeds {
        for &ablation in ablations {
            let run_cfg = TrainConfig {
                ablation,
                seed,
                ..cfg.clone()
            };
            let mut model = Model::new(run_cfg.model_config(shape, k, l), seed)?;
            train(&mut model, split, pseudo, &run_cfg, None, |_| {})?;
            let r = evaluate(&model, test)?;
            let row = AblationRow {
                ablation,
                seed,
                concept_acc: r.concept_accuracy,
                task_acc: r.task_accuracy,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    write_rows(path, cells)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}
