//! Test-time intervention: correct predicted concepts with ground truth and
//! watch task accuracy respond.

use std::collections::BTreeMap;

use sscbm::dataset::{generate_synthetic, split_semi, train_test_split, Dataset, SplitSpec, SyntheticSpec};
use sscbm::encoder::Model;
use sscbm::pseudolabel::pseudo_label_split;
use sscbm::training::{
    intervene_output, intervention_sweep, ratio_range, train, InterventionMode, SelectionOrder, TrainConfig,
};

fn main() -> sscbm::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec {
        n_examples: 1500,
        seed: 4,
        ..Default::default()
    })?
    .dataset;
    let (train_ex, test_ex) = train_test_split(&ds.examples, 0.2, 0)?;
    let test = Dataset::new(ds.schema.clone(), ds.n_classes, test_ex)?;
    let split = split_semi(&train_ex, &SplitSpec::ratio(0.2, 0))?;
    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let shape = test.input_shape().unwrap();
    let (k, l) = (ds.schema.k, ds.n_classes);
    let pseudo = pseudo_label_split(&cfg.reference_encoder(shape, k, l)?, &split, cfg.k_nn)?;
    let mut model = Model::new(cfg.model_config(shape, k, l), cfg.seed)?;
    train(&mut model, &split, &pseudo, &cfg, None, |_| {})?;

    // single example: flip every wrong concept
    let ex = &test.examples[0];
    let truth = ex.concepts.as_ref().unwrap();
    let out = model.forward(&ex.input)?;
    let fixes: BTreeMap<usize, f64> = out
        .p_hat
        .iter()
        .zip(truth)
        .enumerate()
        .filter(|(_, (p, &t))| u8::from(**p >= 0.5) != t)
        .map(|(i, (_, &t))| (i, f64::from(t)))
        .collect();
    let fixed = intervene_output(&model, &out, &fixes)?;
    println!(
        "{}: label {}, predicted {} -> {} after fixing {} concepts",
        ex.id,
        ex.class_label,
        intervene_output(&model, &out, &BTreeMap::new())?.predicted_class,
        fixed.predicted_class,
        fixes.len()
    );

    for mode in [InterventionMode::Individual, InterventionMode::Group] {
        let curve = intervention_sweep(&model, &test, &ratio_range("0.0:1.0:0.25")?, mode, SelectionOrder::MostErroneous)?;
        let line: Vec<String> = curve.iter().map(|p| format!("{:.2}:{:.3}", p.ratio, p.task_accuracy)).collect();
        println!("{mode:?}: {}", line.join("  "));
    }
    Ok(())
}
