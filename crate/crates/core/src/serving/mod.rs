//! Command-line stages and the read-only HTTP API behind the intervention
//! console.

mod api;
pub mod cli;

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::SystemTime;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::alignment::{concept_heatmaps, render_saliency};
use crate::dataset::{load_dataset, ConceptSchema, Dataset, Example, Image, SplitManifest};
use crate::encoder::{load_checkpoint, Model, PARAMS_FILE};
use crate::error::{Error, IoContext, Result};
use crate::training::{read_intervention_csv, softmax, CurvePoint, InterventionOutcome, INTERVENTION_FILE};

pub use api::router;

/// Overrides the checkpoint directory given on the command line.
pub const CHECKPOINT_ENV: &str = "SSCBM_CHECKPOINT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPayload {
    pub index: usize,
    pub name: String,
    pub group: usize,
    pub p_hat: f64,
    /// `p_hat >= 0.5`.
    pub predicted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ground_truth: Option<u8>,
    /// Whether this concept was set by the request.
    pub overridden: bool,
    /// For overridden concepts with known ground truth: does the override
    /// agree with it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub override_matches_truth: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPayload {
    pub example_id: String,
    pub class_probs: Vec<f64>,
    pub predicted_class: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_label: Option<usize>,
    pub concepts: Vec<ConceptPayload>,
    pub saliency_available: bool,
}

impl PredictionPayload {
    pub fn build(
        schema: &ConceptSchema,
        example: &Example,
        outcome: &InterventionOutcome,
        overrides: &BTreeMap<usize, f64>,
        saliency_available: bool,
    ) -> Self {
        let truth = example.concepts.as_deref();
        let concepts = outcome
            .p_hat
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ground_truth = truth.map(|t| t[i]);
                let set = overrides.get(&i);
                ConceptPayload {
                    index: i,
                    name: schema.names[i].clone(),
                    group: schema.groups[i],
                    p_hat: p,
                    predicted: p >= 0.5,
                    ground_truth,
                    overridden: set.is_some(),
                    override_matches_truth: set.zip(ground_truth).map(|(&v, t)| v == f64::from(t)),
                }
            })
            .collect();
        Self {
            example_id: example.id.clone(),
            class_probs: softmax(&outcome.logits),
            predicted_class: outcome.predicted_class,
            class_label: Some(example.class_label),
            concepts,
            saliency_available,
        }
    }
}

/// Where a server loads its snapshot from.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub checkpoint_dir: PathBuf,
    pub data_dir: PathBuf,
    pub split_file: Option<PathBuf>,
    /// Exported saliency tree (`<id>/<concept>.png`); maps missing there
    /// are rendered on demand.
    pub saliency_dir: Option<PathBuf>,
}

impl ServerConfig {
    /// Apply the checkpoint environment override, if set.
    pub fn with_env_override(mut self) -> Self {
        if let Some(dir) = std::env::var_os(CHECKPOINT_ENV).filter(|v| !v.is_empty()) {
            self.checkpoint_dir = PathBuf::from(dir);
        }
        self
    }
}

/// Everything a request may read. Never mutated once built.
#[derive(Debug)]
pub struct ServerState {
    pub model: Model,
    pub schema: ConceptSchema,
    pub dataset: Dataset,
    index: HashMap<String, usize>,
    /// Example ids per split name; `all` is always present.
    pub splits: BTreeMap<String, Vec<String>>,
    pub saliency_dir: Option<PathBuf>,
    pub curve: Option<Vec<CurvePoint>>,
    /// Modification time of the loaded parameters, for reload polling.
    pub loaded_at: Option<SystemTime>,
}

impl ServerState {
    pub fn new(
        model: Model,
        dataset: Dataset,
        split: Option<&SplitManifest>,
        saliency_dir: Option<PathBuf>,
        curve: Option<Vec<CurvePoint>>,
    ) -> Result<Self> {
        if dataset.schema.k != model.config.k || dataset.n_classes > model.config.l {
            return Err(Error::Checkpoint(format!(
                "model expects k = {}, l = {}; dataset has k = {}, l = {}",
                model.config.k, model.config.l, dataset.schema.k, dataset.n_classes
            )));
        }
        if let Some(shape) = dataset.input_shape() {
            if shape != model.config.input_shape {
                return Err(Error::Shape {
                    expected: model.config.input_shape.to_vec(),
                    actual: shape.to_vec(),
                });
            }
        }
        let index = dataset
            .examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect::<HashMap<_, _>>();
        let mut splits = BTreeMap::new();
        splits.insert("all".to_string(), dataset.examples.iter().map(|e| e.id.clone()).collect());
        if let Some(s) = split {
            for (name, ids) in [("test", &s.test), ("labeled", &s.labeled), ("unlabeled", &s.unlabeled)] {
                if let Some(missing) = ids.iter().find(|id| !index.contains_key(*id)) {
                    return Err(Error::UnknownExample(missing.clone()));
                }
                splits.insert(name.to_string(), ids.clone());
            }
        }
        Ok(Self {
            schema: dataset.schema.clone(),
            model,
            dataset,
            index,
            splits,
            saliency_dir,
            curve,
            loaded_at: None,
        })
    }

    /// Load checkpoint, dataset, split and any cached sweep from disk.
    pub fn load(cfg: &ServerConfig) -> Result<Self> {
        let ck = load_checkpoint(&cfg.checkpoint_dir)?;
        let dataset = load_dataset(&cfg.data_dir)?;
        if ck.schema != dataset.schema {
            return Err(Error::Checkpoint(
                "checkpoint schema differs from the dataset schema".into(),
            ));
        }
        let split = cfg.split_file.as_deref().map(SplitManifest::load).transpose()?;
        let curve_path = cfg.checkpoint_dir.join(INTERVENTION_FILE);
        let curve = curve_path
            .exists()
            .then(|| read_intervention_csv(&curve_path))
            .transpose()?;
        let mut state = Self::new(ck.model, dataset, split.as_ref(), cfg.saliency_dir.clone(), curve)?;
        state.loaded_at = params_mtime(&cfg.checkpoint_dir);
        Ok(state)
    }

    pub fn example(&self, id: &str) -> Option<&Example> {
        self.index.get(id).map(|&i| &self.dataset.examples[i])
    }

    fn cached_saliency(&self, id: &str, concept: usize) -> Option<PathBuf> {
        let p = self.saliency_dir.as_ref()?.join(id).join(format!("{concept}.png"));
        p.exists().then_some(p)
    }

    /// Saliency PNG for one concept: the exported file when present,
    /// otherwise rendered from the model.
    pub fn saliency_png(&self, id: &str, concept: usize) -> Result<Vec<u8>> {
        let ex = self.example(id).ok_or_else(|| Error::UnknownExample(id.to_string()))?;
        if concept >= self.schema.k {
            return Err(Error::ConceptIndex {
                index: concept,
                k: self.schema.k,
            });
        }
        if let Some(p) = self.cached_saliency(id, concept) {
            return std::fs::read(&p).at(&p);
        }
        let out = self.model.forward(&ex.input)?;
        let stack = concept_heatmaps(&out.feature_map, &self.model.heatmap_vectors(&out))?;
        render_saliency(&stack, concept, ex.input.height, ex.input.width)?.to_png()
    }
}

pub(crate) fn params_mtime(checkpoint_dir: &Path) -> Option<SystemTime> {
    std::fs::metadata(checkpoint_dir.join(PARAMS_FILE))
        .and_then(|m| m.modified())
        .ok()
}

/// Handle shared by all requests. Each request clones the current snapshot
/// once; a reload swaps in a whole new snapshot.
#[derive(Debug, Clone)]
pub struct SharedState(Arc<RwLock<Arc<ServerState>>>);

impl SharedState {
    pub fn new(state: ServerState) -> Self {
        Self(Arc::new(RwLock::new(Arc::new(state))))
    }

    pub fn snapshot(&self) -> Arc<ServerState> {
        self.0.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn swap(&self, state: ServerState) {
        *self.0.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(state);
    }

    /// Reload from disk if the parameter file changed since the current
    /// snapshot was built. Returns whether a swap happened.
    pub fn reload_if_changed(&self, cfg: &ServerConfig) -> Result<bool> {
        let current = self.snapshot().loaded_at;
        let on_disk = params_mtime(&cfg.checkpoint_dir);
        if on_disk.is_none() || on_disk == current {
            return Ok(false);
        }
        self.swap(ServerState::load(cfg)?);
        Ok(true)
    }
}

/// PNG of an input image: RGB for three channels, grayscale from the first
/// channel otherwise. Values are clamped to [0, 1].
pub fn image_png(img: &Image) -> Result<Vec<u8>> {
    let px = |c: usize, x: u32, y: u32| (img.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    let mut buf = Cursor::new(Vec::new());
    if img.channels == 3 {
        RgbImage::from_fn(w, h, |x, y| Rgb([px(0, x, y), px(1, x, y), px(2, x, y)]))
            .write_to(&mut buf, ImageFormat::Png)?;
    } else {
        GrayImage::from_fn(w, h, |x, y| Luma([px(0, x, y)])).write_to(&mut buf, ImageFormat::Png)?;
    }
    Ok(buf.into_inner())
}
