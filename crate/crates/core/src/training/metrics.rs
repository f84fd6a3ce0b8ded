use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Image};
use crate::encoder::{argmax, Model};
use crate::error::{Error, Result};

/// Stored model output for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub p_hat: Vec<f64>,
    pub logits: Vec<f64>,
    pub predicted_class: usize,
}

impl Prediction {
    pub fn concepts(&self) -> Vec<u8> {
        self.p_hat.iter().map(|&p| u8::from(p >= 0.5)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub concept_accuracy: f64,
    pub task_accuracy: f64,
    pub per_concept_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn predict_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.examples.chunks(128) {
        let inputs: Vec<&Image> = chunk.iter().map(|e| &e.input).collect();
        let fw = model.forward_batch(&inputs)?;
        let (k, l) = (model.config.k, model.config.l);
        for (bi, ex) in chunk.iter().enumerate() {
            let logits = fw.logits[bi * l..][..l].to_vec();
            out.push(Prediction {
                id: ex.id.clone(),
                p_hat: fw.p_hat[bi * k..][..k].to_vec(),
                predicted_class: argmax(&logits),
                logits,
            });
        }
    }
    Ok(out)
}

/// Concept accuracy counts `p_hat >= 0.5` against ground truth over all
/// `N * k` entries; task accuracy compares the lowest-index argmax.
pub fn metrics_from_predictions(preds: &[Prediction], dataset: &Dataset) -> Result<MetricsReport> {
    let k = dataset.schema.k;
    let l = dataset.n_classes;
    let mut per_concept = vec![0usize; k];
    let mut confusion = vec![vec![0usize; l]; l];
    let mut task_hits = 0usize;
    for p in preds {
        let ex = dataset
            .get(&p.id)
            .ok_or_else(|| Error::UnknownExample(p.id.clone()))?;
        let truth = ex
            .concepts
            .as_ref()
            .ok_or_else(|| Error::Split(format!("`{}` has no ground-truth concepts", ex.id)))?;
        for ((hit, c), t) in per_concept.iter_mut().zip(p.concepts()).zip(truth) {
            *hit += usize::from(c == *t);
        }
        task_hits += usize::from(p.predicted_class == ex.class_label);
        confusion[ex.class_label][p.predicted_class.min(l - 1)] += 1;
    }
    let n = preds.len();
    let denom = n.max(1) as f64;
    Ok(MetricsReport {
        n,
        concept_accuracy: per_concept.iter().sum::<usize>() as f64 / (denom * k as f64),
        task_accuracy: task_hits as f64 / denom,
        per_concept_accuracy: per_concept.iter().map(|&h| h as f64 / denom).collect(),
        confusion,
    })
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<MetricsReport> {
    metrics_from_predictions(&predict_dataset(model, dataset)?, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ConceptSchema, Example};

    fn dataset(truth: &[(&[u8], usize)]) -> Dataset {
        let schema = ConceptSchema::ungrouped((0..truth[0].0.len()).map(|i| format!("c{i}")).collect()).unwrap();
        let examples = truth
            .iter()
            .enumerate()
            .map(|(i, (c, y))| Example {
                id: format!("e{i}"),
                input: Image::zeros(1, 4, 4),
                class_label: *y,
                concepts: Some(c.to_vec()),
            })
            .collect();
        Dataset::new(schema, 3, examples).unwrap()
    }

    fn pred(id: &str, p: &[f64], logits: &[f64]) -> Prediction {
        Prediction {
            id: id.into(),
            p_hat: p.to_vec(),
            logits: logits.to_vec(),
            predicted_class: argmax(logits),
        }
    }

    #[test]
    fn perfect_predictions() {
        let d = dataset(&[(&[1, 0], 0), (&[0, 1], 2)]);
        let preds = [pred("e0", &[0.9, 0.1], &[1.0, 0.0, 0.0]), pred("e1", &[0.2, 0.5], &[0.0, 0.0, 3.0])];
        let r = metrics_from_predictions(&preds, &d).unwrap();
        assert_eq!((r.concept_accuracy, r.task_accuracy), (1.0, 1.0));
        assert_eq!(r.confusion[2][2], 1);
    }

    #[test]
    fn three_of_four_concepts() {
        let d = dataset(&[(&[1, 0, 1, 1], 1)]);
        let r = metrics_from_predictions(&[pred("e0", &[0.7, 0.2, 0.6, 0.4], &[0.0, 1.0, 0.0])], &d).unwrap();
        assert_eq!(r.concept_accuracy, 0.75);
        assert_eq!(r.per_concept_accuracy, vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let d = dataset(&[(&[1], 1)]);
        let r = metrics_from_predictions(&[pred("e0", &[0.5], &[2.0, 2.0, 1.0])], &d).unwrap();
        assert_eq!(r.task_accuracy, 0.0);
        assert_eq!(r.confusion[1][0], 1);
    }
}
