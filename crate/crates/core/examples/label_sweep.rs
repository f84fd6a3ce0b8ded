//! Accuracy of each model variant as the share of concept-labeled training
//! data grows.

use sscbm::dataset::{generate_synthetic, train_test_split, Dataset, SplitMode, SyntheticSpec};
use sscbm::encoder::Variant;
use sscbm::training::{sweep_label_ratios, TrainConfig};

fn main() -> sscbm::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec {
        n_examples: 1200,
        seed: 6,
        ..Default::default()
    })?
    .dataset;
    let (train_ex, test_ex) = train_test_split(&ds.examples, 0.2, 0)?;
    let test = Dataset::new(ds.schema.clone(), ds.n_classes, test_ex)?;
    let cfg = TrainConfig {
        epochs: 25,
        ..TrainConfig::default()
    };
    let settings = [SplitMode::Ratio(0.05), SplitMode::Ratio(0.2), SplitMode::PerClassK(10)];
    let variants = [Variant::Sscbm, Variant::CemSsl, Variant::CbmSsl];
    println!("{:<12} {:<8} {:>8} {:>8}", "setting", "variant", "concept", "task");
    sweep_label_ratios(&train_ex, &test, &settings, &variants, &cfg, |c| {
        println!("{:<12} {:<8} {:>8.4} {:>8.4}", c.setting, c.variant.to_string(), c.concept_acc, c.task_acc);
    })?;
    Ok(())
}
