//! Compare the full alignment objective with its two ablations on one
//! shared split, over two training seeds.

use sscbm::dataset::{generate_synthetic, split_semi, train_test_split, Dataset, SplitSpec, SyntheticSpec};
use sscbm::pseudolabel::pseudo_label_split;
use sscbm::training::{ablation_study, Ablation, TrainConfig};

fn main() -> sscbm::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec {
        n_examples: 1200,
        seed: 3,
        ..Default::default()
    })?
    .dataset;
    let (train_ex, test_ex) = train_test_split(&ds.examples, 0.2, 0)?;
    let test = Dataset::new(ds.schema.clone(), ds.n_classes, test_ex)?;
    let split = split_semi(&train_ex, &SplitSpec::ratio(0.1, 0))?;
    let cfg = TrainConfig {
        epochs: 25,
        ..TrainConfig::default()
    };
    let encoder = cfg.reference_encoder(test.input_shape().unwrap(), ds.schema.k, ds.n_classes)?;
    let pseudo = pseudo_label_split(&encoder, &split, cfg.k_nn)?;

    let ablations = [Ablation::Full, Ablation::WoImg, Ablation::WoAlign];
    ablation_study(&split, &pseudo, &test, &ablations, &[0, 1], &cfg, |row| {
        println!(
            "{:<9} seed {} concept {:.4} task {:.4}",
            row.ablation.to_string(),
            row.seed,
            row.concept_acc,
            row.task_acc
        );
    })?;
    Ok(())
}
