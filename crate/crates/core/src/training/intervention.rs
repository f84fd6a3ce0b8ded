use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ConceptSchema, Dataset, Image};
use crate::encoder::{argmax, ForwardOutput, Model};
use crate::error::{Error, Result};

pub const INTERVENTION_FILE: &str = "intervention.csv";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    #[default]
    Individual,
    /// Every requested index pulls its whole schema group to ground truth.
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub example_id: String,
    #[serde(default)]
    pub overrides: BTreeMap<usize, u8>,
    #[serde(default)]
    pub mode: InterventionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub p_hat: Vec<f64>,
    pub logits: Vec<f64>,
    pub predicted_class: usize,
}

/// Substitute probabilities after the scorer, remix, and rerun the head.
pub fn intervene_output(
    model: &Model,
    out: &ForwardOutput,
    overrides: &BTreeMap<usize, f64>,
) -> Result<InterventionOutcome> {
    let k = model.config.k;
    let mut states = out.states.clone();
    for (&i, &v) in overrides {
        let s = states.get_mut(i).ok_or(Error::ConceptIndex { index: i, k })?;
        s.set_probability(v);
    }
    let logits = model.predict_label(&states)?;
    Ok(InterventionOutcome {
        p_hat: states.iter().map(|s| s.p_hat).collect(),
        predicted_class: argmax(&logits),
        logits,
    })
}

/// Expand a request into concrete per-index target values.
pub(crate) fn resolve_overrides(
    schema: &ConceptSchema,
    request: &InterventionRequest,
    truth: Option<&[u8]>,
) -> Result<BTreeMap<usize, f64>> {
    let k = schema.k;
    let mut out = BTreeMap::new();
    for (&i, &v) in &request.overrides {
        if i >= k {
            return Err(Error::ConceptIndex { index: i, k });
        }
        if v > 1 {
            return Err(Error::Config(format!("override value {v} for concept {i} is not 0 or 1")));
        }
        if request.mode == InterventionMode::Group {
            if let Some(t) = truth {
                for j in schema.group_members(schema.group_of(i)) {
                    out.entry(j).or_insert(f64::from(t[j]));
                }
            }
        }
    }
    for (&i, &v) in &request.overrides {
        out.insert(i, f64::from(v));
    }
    Ok(out)
}

pub fn intervene(model: &Model, dataset: &Dataset, request: &InterventionRequest) -> Result<InterventionOutcome> {
    let ex = dataset
        .get(&request.example_id)
        .ok_or_else(|| Error::UnknownExample(request.example_id.clone()))?;
    let overrides = resolve_overrides(&dataset.schema, request, ex.concepts.as_deref())?;
    let out = model.forward(&ex.input)?;
    intervene_output(model, &out, &overrides)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionOrder {
    /// Largest summed `|p_hat - c|` first; ties to the lower index.
    MostErroneous,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub ratio: f64,
    pub task_accuracy: f64,
}

/// Task accuracy when, for each example, `round(r * units)` concepts (or
/// groups) are set to ground truth.
pub fn intervention_sweep(
    model: &Model,
    dataset: &Dataset,
    ratios: &[f64],
    mode: InterventionMode,
    order: SelectionOrder,
) -> Result<Vec<CurvePoint>> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("intervention ratio {r} outside [0, 1]")));
    }
    let units: Vec<Vec<usize>> = match mode {
        InterventionMode::Individual => (0..dataset.schema.k).map(|i| vec![i]).collect(),
        InterventionMode::Group => dataset.schema.partition(),
    };
    let mut hits = vec![0usize; ratios.len()];
    let mut rng = match order {
        SelectionOrder::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        SelectionOrder::MostErroneous => None,
    };
    for chunk in dataset.examples.chunks(128) {
        let inputs: Vec<&Image> = chunk.iter().map(|e| &e.input).collect();
        let outs = model.unbatch(&model.forward_batch(&inputs)?);
        for (ex, out) in chunk.iter().zip(&outs) {
            let truth = ex
                .concepts
                .as_deref()
                .ok_or_else(|| Error::Split(format!("`{}` has no ground-truth concepts", ex.id)))?;
            let mut ranked: Vec<usize> = (0..units.len()).collect();
            match rng.as_mut() {
                Some(r) => ranked.shuffle(r),
                None => {
                    let err: Vec<f64> = units
                        .iter()
                        .map(|u| u.iter().map(|&i| (out.p_hat[i] - f64::from(truth[i])).abs()).sum())
                        .collect();
                    ranked.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
                }
            }
            for (hit, &r) in hits.iter_mut().zip(ratios) {
                let n = (r * units.len() as f64).round() as usize;
                let overrides: BTreeMap<usize, f64> = ranked[..n]
                    .iter()
                    .flat_map(|&u| units[u].iter().map(|&i| (i, f64::from(truth[i]))))
                    .collect();
                let o = intervene_output(model, out, &overrides)?;
                *hit += usize::from(o.predicted_class == ex.class_label);
            }
        }
    }
    let n = dataset.len().max(1) as f64;
    Ok(ratios
        .iter()
        .zip(hits)
        .map(|(&ratio, h)| CurvePoint {
            ratio,
            task_accuracy: h as f64 / n,
        })
        .collect())
}

/// Parse `start:end:step` into an inclusive grid.
pub fn ratio_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("ratio range `{spec}` is not start:end:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || end < start {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

pub fn write_intervention_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

pub fn read_intervention_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
