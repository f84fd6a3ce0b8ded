//! Examples, concept schemas, the built-in attributed-shapes generator,
//! JSON-lines manifests and semi-supervised splits.

mod manifest;
mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_dataset, load_manifest, read_tensor, write_dataset, write_tensor, TensorMeta};
pub use split::{split_semi, train_test_split, SemiSplit, SplitManifest, SplitMode, SplitSpec, SPLIT_FILE};
pub use synthetic::{
    generate_synthetic, load_regions, synthetic_schema, LabelRule, LabelRuleEntry, Region, SyntheticDataset, SyntheticSpec,
    SYNTHETIC_CONCEPTS,
};

/// A dense image tensor in channel-major (C, H, W) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let [channels, height, width] = shape;
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (h, w) = (self.height, self.width);
        self.data[(c * h + y) * w + x] = v;
    }
}

/// One training or evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: Image,
    pub class_label: usize,
    pub concepts: Option<Vec<u8>>,
}

/// An example whose concept annotation has been withheld. The class label
/// is kept unless the split ran in strict-unsupervised mode.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledExample {
    pub id: String,
    pub input: Image,
    pub class_label: Option<usize>,
}

/// Concept names and their intervention groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSchema {
    pub k: usize,
    pub names: Vec<String>,
    /// `groups[i]` is the group id of concept `i`.
    pub groups: Vec<usize>,
}

impl ConceptSchema {
    pub fn new(names: Vec<String>, groups: Vec<usize>) -> Result<Self> {
        let schema = Self {
            k: names.len(),
            names,
            groups,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Every concept in its own group.
    pub fn ungrouped(names: Vec<String>) -> Result<Self> {
        let groups = (0..names.len()).collect();
        Self::new(names, groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.k || self.groups.len() != self.k {
            return Err(Error::Config(format!(
                "schema declares k={} but has {} names and {} group ids",
                self.k,
                self.names.len(),
                self.groups.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for name in &self.names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate concept name `{name}`")));
            }
        }
        Ok(())
    }

    /// Distinct group ids in ascending order.
    pub fn group_ids(&self) -> Vec<usize> {
        self.groups
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn group_of(&self, concept: usize) -> usize {
        self.groups[concept]
    }

    pub fn group_members(&self, group: usize) -> Vec<usize> {
        (0..self.k).filter(|&i| self.groups[i] == group).collect()
    }

    /// Concept indices partitioned by group, ordered by group id.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &g) in self.groups.iter().enumerate() {
            map.entry(g).or_default().push(i);
        }
        map.into_values().collect()
    }
}

/// A set of examples sharing one concept schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: ConceptSchema,
    pub n_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(schema: ConceptSchema, n_classes: usize, examples: Vec<Example>) -> Result<Self> {
        let ds = Self {
            schema,
            n_classes,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let mut ids = BTreeSet::new();
        for ex in &self.examples {
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::Config(format!("duplicate example id `{}`", ex.id)));
            }
            validate_example(ex, self.schema.k, self.n_classes)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Sub-dataset restricted to `ids`, in dataset order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            n_classes: self.n_classes,
            examples: self
                .examples
                .iter()
                .filter(|e| ids.contains(&e.id))
                .cloned()
                .collect(),
        }
    }

    pub fn input_shape(&self) -> Option<[usize; 3]> {
        self.examples.first().map(|e| e.input.shape())
    }
}

pub(crate) fn validate_example(ex: &Example, k: usize, n_classes: usize) -> Result<()> {
    if ex.input.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("example `{}` has non-finite input", ex.id)));
    }
    if ex.class_label >= n_classes {
        return Err(Error::Config(format!(
            "example `{}` has class {} but only {} classes exist",
            ex.id, ex.class_label, n_classes
        )));
    }
    if let Some(c) = &ex.concepts {
        if c.len() != k {
            return Err(Error::Config(format!(
                "example `{}` has {} concepts, schema has {}",
                ex.id,
                c.len(),
                k
            )));
        }
        if c.iter().any(|&v| v > 1) {
            return Err(Error::Config(format!("example `{}` has non-binary concepts", ex.id)));
        }
    }
    Ok(())
}
