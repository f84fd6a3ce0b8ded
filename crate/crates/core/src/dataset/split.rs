//! Labeled / unlabeled and train / test partitions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, UnlabeledExample};
use crate::error::{Error, IoContext, Result};

pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum SplitMode {
    /// Fraction of the dataset whose concepts stay visible.
    Ratio(f64),
    /// Exactly this many labeled examples per class.
    PerClassK(usize),
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitMode::Ratio(r) => write!(f, "{r}"),
            SplitMode::PerClassK(k) => write!(f, "K={k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(flatten)]
    pub mode: SplitMode,
    #[serde(default)]
    pub seed: u64,
    /// Hide class labels of the unlabeled part as well.
    #[serde(default)]
    pub strict_unsupervised: bool,
}

impl SplitSpec {
    pub fn ratio(value: f64, seed: u64) -> Self {
        Self {
            mode: SplitMode::Ratio(value),
            seed,
            strict_unsupervised: false,
        }
    }

    pub fn per_class(k: usize, seed: u64) -> Self {
        Self {
            mode: SplitMode::PerClassK(k),
            seed,
            strict_unsupervised: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiSplit {
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<UnlabeledExample>,
}

/// Split membership as persisted by the CLI.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub test: Vec<String>,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    #[serde(default)]
    pub strict_unsupervised: bool,
}

impl SplitManifest {
    /// Hold out a stratified test set, then split the rest semi-supervised.
    pub fn build(dataset: &Dataset, test_fraction: f64, spec: &SplitSpec) -> Result<Self> {
        let (train, test) = train_test_split(&dataset.examples, test_fraction, spec.seed)?;
        let semi = split_semi(&train, spec)?;
        Ok(Self {
            test: test.into_iter().map(|e| e.id).collect(),
            labeled: semi.labeled.into_iter().map(|e| e.id).collect(),
            unlabeled: semi.unlabeled.into_iter().map(|e| e.id).collect(),
            strict_unsupervised: spec.strict_unsupervised,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path).at(path)?)?)
    }

    /// Rebuild the train partition and test set from the full dataset.
    pub fn materialize(&self, dataset: &Dataset) -> Result<(SemiSplit, Dataset)> {
        let lookup = |id: &String| {
            dataset
                .get(id)
                .ok_or_else(|| Error::UnknownExample(id.clone()))
        };
        let labeled = self
            .labeled
            .iter()
            .map(|id| lookup(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = self
            .unlabeled
            .iter()
            .map(|id| lookup(id).map(|e| strip(e, self.strict_unsupervised)))
            .collect::<Result<Vec<_>>>()?;
        let test_ids: BTreeSet<String> = self.test.iter().cloned().collect();
        Ok((SemiSplit { labeled, unlabeled }, dataset.subset(&test_ids)))
    }
}

fn strip(ex: &Example, strict: bool) -> UnlabeledExample {
    UnlabeledExample {
        id: ex.id.clone(),
        input: ex.input.clone(),
        class_label: (!strict).then_some(ex.class_label),
    }
}

fn by_class(examples: &[Example]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        map.entry(ex.class_label).or_default().push(i);
    }
    map
}

/// Per-class quota for a labeled ratio: the total is `round(ratio * N)`,
/// shared out by largest remainder.
fn ratio_quotas(classes: &BTreeMap<usize, Vec<usize>>, ratio: f64, n: usize) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Split(format!("ratio must be in (0, 1], got {ratio}")));
    }
    let total = (ratio * n as f64).round() as usize;
    let exact: Vec<f64> = classes.values().map(|m| ratio * m.len() as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        quotas[c] += 1;
    }
    for (q, (class, members)) in quotas.iter().zip(classes) {
        if *q == 0 {
            return Err(Error::Split(format!(
                "ratio {ratio} leaves class {class} ({} examples) without a labeled example",
                members.len()
            )));
        }
    }
    Ok(quotas)
}

/// Partition `examples` into a labeled part (concepts kept) and an unlabeled
/// part (concepts removed). Within each class the members are shuffled
/// under `spec.seed` and the first ones become labeled.
pub fn split_semi(examples: &[Example], spec: &SplitSpec) -> Result<SemiSplit> {
    let classes = by_class(examples);
    let quotas = match spec.mode {
        SplitMode::PerClassK(k) => {
            if k == 0 {
                return Err(Error::Split("per-class K must be at least 1".into()));
            }
            if let Some((class, members)) = classes.iter().find(|(_, m)| m.len() < k) {
                return Err(Error::Split(format!(
                    "class {class} has {} examples, fewer than K = {k}",
                    members.len()
                )));
            }
            vec![k; classes.len()]
        }
        SplitMode::Ratio(r) => ratio_quotas(&classes, r, examples.len())?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = vec![false; examples.len()];
    for (members, &q) in classes.values().zip(&quotas) {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        for &i in members.iter().take(q) {
            chosen[i] = true;
        }
    }

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (ex, is_labeled) in examples.iter().zip(chosen) {
        if is_labeled {
            if ex.concepts.is_none() {
                return Err(Error::Split(format!(
                    "example `{}` was selected as labeled but has no concepts",
                    ex.id
                )));
            }
            labeled.push(ex.clone());
        } else {
            unlabeled.push(strip(ex, spec.strict_unsupervised));
        }
    }
    Ok(SemiSplit { labeled, unlabeled })
}

/// Class-stratified hold-out: `round(fraction * n_c)` of each class goes to
/// the test side. Both sides keep dataset order.
pub fn train_test_split(
    examples: &[Example],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Split(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; examples.len()];
    for members in by_class(examples).into_values() {
        let mut members = members;
        members.shuffle(&mut rng);
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        for &i in members.iter().take(n_test) {
            is_test[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (ex, t) in examples.iter().zip(is_test) {
        if t {
            test.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Image;

    fn toy(n_classes: usize, per_class: usize) -> Vec<Example> {
        (0..n_classes * per_class)
            .map(|i| Example {
                id: format!("e{i:04}"),
                input: Image::zeros(1, 1, 1),
                class_label: i % n_classes,
                concepts: Some(vec![(i % 2) as u8]),
            })
            .collect()
    }

    #[test]
    fn one_per_class() {
        let ex = toy(5, 20);
        let s = split_semi(&ex, &SplitSpec::per_class(1, 0)).unwrap();
        assert_eq!(s.labeled.len(), 5);
        assert_eq!(s.unlabeled.len(), 95);
        let classes: BTreeSet<_> = s.labeled.iter().map(|e| e.class_label).collect();
        assert_eq!(classes.len(), 5);
    }

    #[test]
    fn ratio_tenth_of_two_hundred() {
        let ex = toy(5, 40);
        let s = split_semi(&ex, &SplitSpec::ratio(0.1, 7)).unwrap();
        assert_eq!(s.labeled.len(), 20);
        assert_eq!(s.unlabeled.len(), 180);
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let ex = toy(4, 13);
        let s = split_semi(&ex, &SplitSpec::ratio(0.3, 1)).unwrap();
        let mut ids: Vec<&str> = s.labeled.iter().map(|e| e.id.as_str()).collect();
        ids.extend(s.unlabeled.iter().map(|e| e.id.as_str()));
        ids.sort();
        let mut all: Vec<&str> = ex.iter().map(|e| e.id.as_str()).collect();
        all.sort();
        assert_eq!(ids, all);
    }

    #[test]
    fn same_seed_same_membership() {
        let ex = toy(3, 30);
        let a = split_semi(&ex, &SplitSpec::per_class(4, 11)).unwrap();
        let b = split_semi(&ex, &SplitSpec::per_class(4, 11)).unwrap();
        assert_eq!(a, b);
        let c = split_semi(&ex, &SplitSpec::per_class(4, 12)).unwrap();
        assert_ne!(a.labeled, c.labeled);
    }

    #[test]
    fn k_larger_than_class_is_an_error() {
        let ex = toy(3, 2);
        assert!(matches!(
            split_semi(&ex, &SplitSpec::per_class(3, 0)),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn tiny_ratio_leaving_a_class_empty_is_an_error() {
        let ex = toy(5, 4);
        assert!(split_semi(&ex, &SplitSpec::ratio(0.05, 0)).is_err());
    }

    #[test]
    fn strict_mode_hides_class_labels() {
        let ex = toy(2, 5);
        let mut spec = SplitSpec::per_class(1, 0);
        spec.strict_unsupervised = true;
        let s = split_semi(&ex, &spec).unwrap();
        assert!(s.unlabeled.iter().all(|u| u.class_label.is_none()));
        let s = split_semi(&ex, &SplitSpec::per_class(1, 0)).unwrap();
        assert!(s.unlabeled.iter().all(|u| u.class_label.is_some()));
    }

    #[test]
    fn test_split_is_stratified() {
        let ex = toy(5, 20);
        let (train, test) = train_test_split(&ex, 0.2, 0).unwrap();
        assert_eq!(test.len(), 20);
        assert_eq!(train.len(), 80);
        for c in 0..5 {
            assert_eq!(test.iter().filter(|e| e.class_label == c).count(), 4);
        }
    }
}
