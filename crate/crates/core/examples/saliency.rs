//! Render concept saliency maps for a few test images and measure how often
//! the peak lands inside the object that realises the concept.
//!
//! cargo run --release --example saliency -- /tmp/saliency

use std::fs;
use std::path::Path;

use sscbm::alignment::{concept_heatmaps, render_saliency};
use sscbm::dataset::{generate_synthetic, split_semi, train_test_split, Dataset, SplitSpec, SyntheticSpec};
use sscbm::encoder::Model;
use sscbm::pseudolabel::pseudo_label_split;
use sscbm::training::{saliency_localization, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "saliency".into());
    let synth = generate_synthetic(&SyntheticSpec {
        n_examples: 1500,
        seed: 5,
        ..Default::default()
    })?;
    let ds = &synth.dataset;
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

    let [_, h, w] = shape;
    for ex in test.examples.iter().take(3) {
        let fwd = model.forward(&ex.input)?;
        let stack = concept_heatmaps(&fwd.feature_map, &model.heatmap_vectors(&fwd))?;
        let dir = Path::new(&out).join(&ex.id);
        fs::create_dir_all(&dir)?;
        for i in 0..k {
            let map = render_saliency(&stack, i, h, w)?;
            fs::write(dir.join(format!("{i}.png")), map.to_png()?)?;
        }
        println!("wrote {} maps to {}", k, dir.display());
    }

    let report = saliency_localization(&model, &test, &synth.regions)?;
    println!(
        "peak inside region for {}/{} pairs ({:.3}, chance {:.3})",
        report.hits, report.pairs, report.rate, report.chance
    );
    Ok(())
}
