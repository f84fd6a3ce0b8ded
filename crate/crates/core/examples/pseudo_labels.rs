//! Split a dataset into labeled and unlabeled parts and infer concept
//! labels for the unlabeled part from its nearest labeled neighbours.

use sscbm::dataset::{generate_synthetic, split_semi, SplitSpec, SyntheticSpec};
use sscbm::pseudolabel::{pseudo_label_split, ReferenceEncoder};

fn main() -> sscbm::Result<()> {
    let synth = generate_synthetic(&SyntheticSpec {
        n_examples: 400,
        seed: 2,
        ..Default::default()
    })?;
    let ds = &synth.dataset;
    let split = split_semi(&ds.examples, &SplitSpec::ratio(0.1, 0))?;
    let encoder = ReferenceEncoder::frozen(ds.input_shape().unwrap(), 4)?;
    let pseudo = pseudo_label_split(&encoder, &split, 2)?;

    // compare against the hidden ground truth
    let (mut hits, mut total) = (0, 0);
    for ex in &ds.examples {
        if let Some(pl) = pseudo.get(&ex.id) {
            let truth = ex.concepts.as_ref().unwrap();
            hits += pl.c_img.iter().zip(truth).filter(|(p, &t)| u8::from(**p >= 0.5) == t).count();
            total += truth.len();
        }
    }
    println!(
        "{} labeled, {} pseudo-labeled; thresholded agreement with truth {:.3}",
        split.labeled.len(),
        pseudo.len(),
        hits as f64 / total as f64
    );
    let (id, pl) = pseudo.iter().next().unwrap();
    println!("{id}: neighbours {:?} weights {:?}", pl.neighbor_ids, pl.weights);
    Ok(())
}
