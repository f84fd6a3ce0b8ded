//! Train a semi-supervised concept model at a 10% label ratio, report test
//! accuracy and save a checkpoint.
//!
//! cargo run --release --example train_model -- /tmp/ck

use sscbm::dataset::{generate_synthetic, split_semi, train_test_split, Dataset, SplitSpec, SyntheticSpec};
use sscbm::encoder::{save_checkpoint, Model};
use sscbm::pseudolabel::pseudo_label_split;
use sscbm::training::{evaluate, train, TrainConfig};

fn main() -> sscbm::Result<()> {
    let out = std::env::args().nth(1);
    let synth = generate_synthetic(&SyntheticSpec {
        n_examples: 2000,
        seed: 0,
        ..Default::default()
    })?;
    let ds = synth.dataset;
    let (train_ex, test_ex) = train_test_split(&ds.examples, 0.2, 0)?;
    let test = Dataset::new(ds.schema.clone(), ds.n_classes, test_ex)?;
    let split = split_semi(&train_ex, &SplitSpec::ratio(0.1, 0))?;

    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let shape = test.input_shape().unwrap();
    let (k, l) = (ds.schema.k, ds.n_classes);
    let pseudo = pseudo_label_split(&cfg.reference_encoder(shape, k, l)?, &split, cfg.k_nn)?;
    let mut model = Model::new(cfg.model_config(shape, k, l), cfg.seed)?;
    train(&mut model, &split, &pseudo, &cfg, Some(&test), |r| {
        let eval = r.eval.as_ref().map(|e| format!(" concept {:.3} task {:.3}", e.concept_accuracy, e.task_accuracy));
        println!("epoch {:>2} loss {:.4}{}", r.epoch, r.loss.total, eval.unwrap_or_default());
    })?;

    let m = evaluate(&model, &test)?;
    println!("test concept accuracy {:.4}, task accuracy {:.4}", m.concept_accuracy, m.task_accuracy);
    if let Some(dir) = out {
        save_checkpoint(dir.as_ref(), &model, &ds.schema)?;
        println!("checkpoint written to {dir}");
    }
    Ok(())
}
