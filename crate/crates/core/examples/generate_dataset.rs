//! Render a small synthetic shapes dataset and write it to disk.
//!
//! cargo run --release --example generate_dataset -- /tmp/shapes

use sscbm::dataset::{generate_synthetic, load_dataset, SyntheticSpec};

fn main() -> sscbm::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "shapes".into());
    let synth = generate_synthetic(&SyntheticSpec {
        n_examples: 300,
        seed: 1,
        ..Default::default()
    })?;
    synth.save(out.as_ref())?;

    let ds = load_dataset(out.as_ref())?;
    println!("{} examples, {} classes, shape {:?}", ds.examples.len(), ds.n_classes, ds.input_shape());
    for (i, name) in ds.schema.names.iter().enumerate() {
        let active = ds
            .examples
            .iter()
            .filter(|e| e.concepts.as_ref().is_some_and(|c| c[i] == 1))
            .count();
        println!("  {name:<16} active in {active}");
    }
    Ok(())
}
