//! Attributed-shapes generator: one coloured shape on a noisy background.
//!
//! Concepts are four one-hot groups (shape, colour, size, vertical position)
//! and the class is a fixed lookup over the concept combination.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ConceptSchema, Dataset, Example, Image};
use crate::error::{Error, IoContext, Result};

/// Concept names in index order, with their group ids.
pub const SYNTHETIC_CONCEPTS: [(&str, usize); 10] = [
    ("shape::square", 0),
    ("shape::circle", 0),
    ("shape::triangle", 0),
    ("color::red", 1),
    ("color::green", 1),
    ("color::blue", 1),
    ("size::small", 2),
    ("size::large", 2),
    ("position::top", 3),
    ("position::bottom", 3),
];

const N_SHAPES: usize = 3;
const N_COLORS: usize = 3;
const N_SIZES: usize = 2;
const N_POSITIONS: usize = 2;
const N_COMBOS: usize = N_SHAPES * N_COLORS * N_SIZES * N_POSITIONS;

const PALETTE: [[f32; 3]; N_COLORS] = [[0.9, 0.15, 0.1], [0.1, 0.8, 0.15], [0.15, 0.25, 0.95]];
const BACKGROUND: f32 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_image_size() -> usize {
    32
}
fn default_n_classes() -> usize {
    6
}
fn default_noise_std() -> f64 {
    0.05
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_examples: 2500,
            image_size: default_image_size(),
            n_classes: default_n_classes(),
            noise_std: default_noise_std(),
            seed: 0,
        }
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRuleEntry {
    pub concepts: Vec<u8>,
    pub class_label: usize,
}

/// Lookup table from every realisable concept vector to its class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub n_classes: usize,
    pub entries: Vec<LabelRuleEntry>,
}

impl LabelRule {
    fn build(n_classes: usize) -> Self {
        let mut entries = Vec::with_capacity(N_COMBOS);
        for shape in 0..N_SHAPES {
            for size in 0..N_SIZES {
                for color in 0..N_COLORS {
                    for position in 0..N_POSITIONS {
                        let idx = combo_index(shape, color, size, position);
                        entries.push(LabelRuleEntry {
                            concepts: concept_vector(shape, color, size, position),
                            class_label: idx * n_classes / N_COMBOS,
                        });
                    }
                }
            }
        }
        Self { n_classes, entries }
    }

    pub fn classify(&self, concepts: &[u8]) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.concepts == concepts)
            .map(|e| e.class_label)
    }
}

/// Generator output: the dataset plus per-example concept regions and the
/// label rule that produced every class label.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// For each example id, one entry per concept: the region realising it
    /// when active, `None` when inactive.
    pub regions: BTreeMap<String, Vec<Option<Region>>>,
    pub rule: LabelRule,
}

pub const REGIONS_FILE: &str = "regions.json";
pub const LABEL_RULE_FILE: &str = "label_rule.json";

impl SyntheticDataset {
    /// Write the dataset directory plus `regions.json` and `label_rule.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        super::write_dataset(dir, &self.dataset)?;
        let p = dir.join(REGIONS_FILE);
        fs::write(&p, serde_json::to_vec(&self.regions)?).at(&p)?;
        let p = dir.join(LABEL_RULE_FILE);
        fs::write(&p, serde_json::to_vec_pretty(&self.rule)?).at(&p)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let dataset = super::load_dataset(dir)?;
        let p = dir.join(REGIONS_FILE);
        let regions = serde_json::from_slice(&fs::read(&p).at(&p)?)?;
        let p = dir.join(LABEL_RULE_FILE);
        let rule: LabelRule = serde_json::from_slice(&fs::read(&p).at(&p)?)?;
        let mut dataset = dataset;
        dataset.n_classes = dataset.n_classes.max(rule.n_classes);
        Ok(Self {
            dataset,
            regions,
            rule,
        })
    }
}

/// Concept regions stored next to a dataset, if the generator wrote them.
pub fn load_regions(dir: &Path) -> Result<Option<BTreeMap<String, Vec<Option<Region>>>>> {
    let p = dir.join(REGIONS_FILE);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(&p).at(&p)?)?))
}

fn combo_index(shape: usize, color: usize, size: usize, position: usize) -> usize {
    ((shape * N_SIZES + size) * N_COLORS + color) * N_POSITIONS + position
}

fn concept_vector(shape: usize, color: usize, size: usize, position: usize) -> Vec<u8> {
    let mut c = vec![0u8; SYNTHETIC_CONCEPTS.len()];
    c[shape] = 1;
    c[N_SHAPES + color] = 1;
    c[N_SHAPES + N_COLORS + size] = 1;
    c[N_SHAPES + N_COLORS + N_SIZES + position] = 1;
    c
}

pub fn synthetic_schema() -> ConceptSchema {
    let names = SYNTHETIC_CONCEPTS.iter().map(|(n, _)| n.to_string()).collect();
    let groups = SYNTHETIC_CONCEPTS.iter().map(|&(_, g)| g).collect();
    ConceptSchema::new(names, groups).expect("built-in schema is valid")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    if spec.n_classes == 0 || spec.n_classes > N_COMBOS {
        return Err(Error::Config(format!(
            "n_classes must be in 1..={N_COMBOS} (number of concept combinations), got {}",
            spec.n_classes
        )));
    }
    if spec.image_size < 16 {
        return Err(Error::Config(format!(
            "image_size must be at least 16, got {}",
            spec.image_size
        )));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be >= 0, got {}", spec.noise_std)));
    }

    let rule = LabelRule::build(spec.n_classes);
    let schema = synthetic_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).expect("finite std");
    let s = spec.image_size;
    let radii = [
        ((s as f64) * 0.125).round() as i64,
        ((s as f64) * 0.22).round() as i64,
    ];

    let mut examples = Vec::with_capacity(spec.n_examples);
    let mut regions = BTreeMap::new();
    for i in 0..spec.n_examples {
        let shape = rng.random_range(0..N_SHAPES);
        let color = rng.random_range(0..N_COLORS);
        let size = rng.random_range(0..N_SIZES);
        let position = rng.random_range(0..N_POSITIONS);
        let r = radii[size];
        let half = (s / 2) as i64;
        let cx = rng.random_range(r + 1..=s as i64 - r - 2);
        let cy = if position == 0 {
            rng.random_range(r + 1..=half - 1)
        } else {
            rng.random_range(half..=s as i64 - r - 2)
        };
        let jitter: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.08f32..0.08));

        let mut img = Image::zeros(3, s, s);
        let mut bbox: Option<Region> = None;
        for y in 0..s {
            for x in 0..s {
                let inside = covers(shape, x as i64 - cx, y as i64 - cy, r);
                for ch in 0..3 {
                    let base = if inside {
                        PALETTE[color][ch] + jitter[ch]
                    } else {
                        BACKGROUND
                    };
                    let v = base + noise.sample(&mut rng) as f32;
                    img.set(ch, y, x, v.clamp(0.0, 1.0));
                }
                if inside {
                    bbox = Some(match bbox {
                        None => Region { x0: x, y0: y, x1: x, y1: y },
                        Some(b) => Region {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x),
                            y1: b.y1.max(y),
                        },
                    });
                }
            }
        }
        let bbox = bbox.expect("shapes always cover their centre pixel");
        let concepts = concept_vector(shape, color, size, position);
        let class_label = rule.entries[combo_index(shape, color, size, position)].class_label;
        debug_assert_eq!(rule.classify(&concepts), Some(class_label));
        let id = format!("syn{i:05}");
        regions.insert(
            id.clone(),
            concepts.iter().map(|&c| (c == 1).then_some(bbox)).collect(),
        );
        examples.push(Example {
            id,
            input: img,
            class_label,
            concepts: Some(concepts),
        });
    }

    Ok(SyntheticDataset {
        dataset: Dataset::new(schema, spec.n_classes, examples)?,
        regions,
        rule,
    })
}

fn covers(shape: usize, dx: i64, dy: i64, r: i64) -> bool {
    match shape {
        0 => dx.abs() <= r && dy.abs() <= r,
        1 => dx * dx + dy * dy <= r * r,
        _ => dy.abs() <= r && 2 * dx.abs() <= dy + r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_examples: 60,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        let bytes = |d: &SyntheticDataset| {
            d.dataset
                .examples
                .iter()
                .flat_map(|e| e.input.data.iter().flat_map(|v| v.to_le_bytes()))
                .collect::<Vec<u8>>()
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn every_example_has_an_active_concept_and_matches_rule() {
        let d = generate_synthetic(&small()).unwrap();
        for ex in &d.dataset.examples {
            let c = ex.concepts.as_ref().unwrap();
            assert!(c.iter().any(|&v| v == 1));
            assert_eq!(d.rule.classify(c), Some(ex.class_label));
        }
    }

    #[test]
    fn red_region_contains_red_pixels() {
        let d = generate_synthetic(&small()).unwrap();
        let red = SYNTHETIC_CONCEPTS.iter().position(|(n, _)| *n == "color::red").unwrap();
        let mut checked = 0;
        for ex in &d.dataset.examples {
            if ex.concepts.as_ref().unwrap()[red] != 1 {
                continue;
            }
            let region = d.regions[&ex.id][red].unwrap();
            let mut found = false;
            for y in region.y0..=region.y1 {
                for x in region.x0..=region.x1 {
                    let (r, g, b) = (ex.input.at(0, y, x), ex.input.at(1, y, x), ex.input.at(2, y, x));
                    found |= r > g && r > b;
                }
            }
            assert!(found, "{}", ex.id);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn too_many_classes_is_a_config_error() {
        let spec = SyntheticSpec {
            n_classes: 37,
            ..small()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn six_class_rule_is_shape_by_size() {
        let rule = LabelRule::build(6);
        for e in &rule.entries {
            let shape = e.concepts[..3].iter().position(|&v| v == 1).unwrap();
            let size = e.concepts[6..8].iter().position(|&v| v == 1).unwrap();
            assert_eq!(e.class_label, shape * 2 + size);
        }
    }
}
