use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{objective, BatchRow, LossBreakdown, Supervision, TermWeights};
use super::metrics::evaluate;
use super::TrainConfig;
use crate::dataset::{Dataset, SemiSplit};
use crate::encoder::Model;
use crate::error::{Error, IoContext, Result};
use crate::pseudolabel::PseudoLabel;

pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub concept_accuracy: f64,
    pub task_accuracy: f64,
}

/// One line of `history.jsonl`: step-averaged losses and, when an
/// evaluation set was given, its metrics after the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EpochMetrics>,
}

/// Cycles through a permutation, reshuffling on every wrap.
struct Stream {
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Plain SGD with weight decay over paired labeled/unlabeled sub-batches.
///
/// An epoch walks the longer of the two streams once; the shorter one
/// cycles. `on_epoch` sees every record as it is produced. On a non-finite
/// loss the step is skipped, `model` keeps the last finite parameters, and
/// [`Error::Diverged`] is returned.
pub fn train(
    model: &mut Model,
    split: &SemiSplit,
    pseudo: &BTreeMap<String, PseudoLabel>,
    cfg: &TrainConfig,
    eval_set: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::Split("no labeled examples to train on".into()));
    }
    let mut labeled_concepts = Vec::with_capacity(split.labeled.len());
    for ex in &split.labeled {
        let c = ex
            .concepts
            .as_deref()
            .ok_or_else(|| Error::Split(format!("labeled example `{}` has no concepts", ex.id)))?;
        labeled_concepts.push(c);
    }
    let mut pseudo_rows = Vec::with_capacity(split.unlabeled.len());
    for ex in &split.unlabeled {
        let pl = pseudo
            .get(&ex.id)
            .ok_or_else(|| Error::Split(format!("no pseudo label for `{}`", ex.id)))?;
        if pl.c_img.len() != model.config.k {
            return Err(Error::Shape {
                expected: vec![model.config.k],
                actual: vec![pl.c_img.len()],
            });
        }
        pseudo_rows.push(pl.c_img.as_slice());
    }

    let settings = cfg.loss_settings();
    let weights = TermWeights::from_settings(&settings);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    let (n_l, n_u) = (split.labeled.len(), split.unlabeled.len());
    let mut lab = Stream::new(n_l, &mut rng);
    let mut unl = Stream::new(n_u, &mut rng);
    let bs = cfg.batch_size;
    let steps = n_l.max(n_u).div_ceil(bs);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let labeled_leads = n_l >= n_u;
        let (lead, lead_n) = if labeled_leads { (&mut lab, n_l) } else { (&mut unl, n_u) };
        lead.order.shuffle(&mut rng);
        lead.pos = 0;
        let mut sums = [0.0f64; 4];
        for step in 0..steps {
            let take = bs.min(lead_n - step * bs);
            let (li, ui) = if labeled_leads {
                let li = lab.take(take, &mut rng);
                let ui = if n_u > 0 { unl.take(take, &mut rng) } else { Vec::new() };
                (li, ui)
            } else {
                let ui = unl.take(take, &mut rng);
                (lab.take(take, &mut rng), ui)
            };
            let mut rows: Vec<BatchRow<'_>> = Vec::with_capacity(li.len() + ui.len());
            rows.extend(li.iter().map(|&i| BatchRow {
                input: &split.labeled[i].input,
                class_label: Some(split.labeled[i].class_label),
                supervision: Supervision::Concepts(labeled_concepts[i]),
            }));
            rows.extend(ui.iter().map(|&i| BatchRow {
                input: &split.unlabeled[i].input,
                class_label: split.unlabeled[i].class_label,
                supervision: Supervision::Pseudo(pseudo_rows[i]),
            }));
            let (b, mut grad) = match objective(model, &rows, &settings, weights) {
                Ok(v) if v.0.total.is_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch, step }),
                Err(e) => return Err(e),
            };
            grad.axpy(cfg.weight_decay, &model.params);
            let previous = model.params.clone();
            model.params.axpy(-cfg.lr, &grad);
            if !model.params.all_finite() {
                model.params = previous;
                return Err(Error::Diverged { epoch, step });
            }
            for (s, v) in sums.iter_mut().zip([b.task, b.concept, b.align, b.total]) {
                *s += v;
            }
        }
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            loss: LossBreakdown {
                task: sums[0] / n,
                concept: sums[1] / n,
                align: sums[2] / n,
                total: sums[3] / n,
                lambda1: cfg.lambda1,
                lambda2: cfg.lambda2,
            },
            steps,
            eval: match eval_set {
                Some(d) => {
                    let r = evaluate(model, d)?;
                    Some(EpochMetrics {
                        concept_accuracy: r.concept_accuracy,
                        task_accuracy: r.task_accuracy,
                    })
                }
                None => None,
            },
        };
        log::info!(
            "epoch {epoch}: total {:.4} task {:.4} concept {:.4} align {:.4}",
            record.loss.total,
            record.loss.task,
            record.loss.concept,
            record.loss.align
        );
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
