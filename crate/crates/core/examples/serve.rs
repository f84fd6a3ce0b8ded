//! Train a small model and serve the prediction and intervention API on
//! 127.0.0.1:8080 until interrupted.
//!
//! curl localhost:8080/api/schema
//! curl -XPOST localhost:8080/api/intervene -d '{"example_id":"syn00003","overrides":{"0":1}}'

use sscbm::dataset::{generate_synthetic, SplitManifest, SplitSpec, SyntheticSpec};
use sscbm::encoder::Model;
use sscbm::pseudolabel::pseudo_label_split;
use sscbm::serving::{router, ServerState, SharedState};
use sscbm::training::{intervention_sweep, ratio_range, train, InterventionMode, SelectionOrder, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_synthetic(&SyntheticSpec {
        n_examples: 1500,
        seed: 7,
        ..Default::default()
    })?
    .dataset;
    let manifest = SplitManifest::build(&ds, 0.2, &SplitSpec::ratio(0.2, 0))?;
    let (split, test) = manifest.materialize(&ds)?;
    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let shape = ds.input_shape().unwrap();
    let (k, l) = (ds.schema.k, ds.n_classes);
    let pseudo = pseudo_label_split(&cfg.reference_encoder(shape, k, l)?, &split, cfg.k_nn)?;
    let mut model = Model::new(cfg.model_config(shape, k, l), cfg.seed)?;
    train(&mut model, &split, &pseudo, &cfg, None, |_| {})?;
    let curve = intervention_sweep(
        &model,
        &test,
        &ratio_range("0.0:1.0:0.1")?,
        InterventionMode::Individual,
        SelectionOrder::MostErroneous,
    )?;

    let state = SharedState::new(ServerState::new(model, ds, Some(&manifest), None, Some(curve))?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:8080").await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}
