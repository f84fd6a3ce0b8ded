//! Soft concept labels for unlabeled examples from their nearest labeled
//! neighbours under cosine distance in a frozen feature space.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Image, SemiSplit};
use crate::encoder::{Model, ModelConfig, Variant};
use crate::error::{Error, IoContext, Result};

pub const DEFAULT_K_NN: usize = 2;
/// Floor on distances before taking reciprocals.
pub const DISTANCE_FLOOR: f64 = 1e-8;
pub const PSEUDO_LABELS_FILE: &str = "pseudo_labels.jsonl";
/// Seed of the frozen reference backbone.
pub const REFERENCE_SEED: u64 = 0x5eed_0fea;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFeature {
    pub id: String,
    pub vec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub c_img: Vec<f64>,
    #[serde(rename = "neighbors")]
    pub neighbor_ids: Vec<String>,
    pub weights: Vec<f64>,
}

/// A frozen convolutional feature extractor. Features are the backbone's
/// raw map average-pooled onto a `grid x grid` lattice and flattened.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    model: Model,
    grid: usize,
}

impl ReferenceEncoder {
    /// Randomly initialised toy backbone with a fixed seed.
    pub fn frozen(input_shape: [usize; 3], grid: usize) -> Result<Self> {
        let model = Model::new(ModelConfig::new(input_shape, 1, 1, Variant::Sscbm), REFERENCE_SEED)?;
        Self::from_model(model, grid)
    }

    /// Use another model's backbone weights, e.g. the trainable model at
    /// initialisation.
    pub fn from_model(model: Model, grid: usize) -> Result<Self> {
        let (h, w) = model.config.feature_hw();
        if grid == 0 || grid > h.min(w) {
            return Err(Error::Config(format!(
                "reference grid {grid} must be in 1..={}",
                h.min(w)
            )));
        }
        Ok(Self { model, grid })
    }

    pub fn dim(&self) -> usize {
        self.grid * self.grid * self.model.config.raw_channels()
    }

    pub fn encode(&self, id: &str, input: &Image) -> Result<ReferenceFeature> {
        Ok(self.encode_batch(&[(id, input)])?.remove(0))
    }

    pub fn encode_batch(&self, items: &[(&str, &Image)]) -> Result<Vec<ReferenceFeature>> {
        let mut out = Vec::with_capacity(items.len());
        let dv = self.model.config.raw_channels();
        let g = self.grid;
        for chunk in items.chunks(64) {
            let imgs: Vec<&Image> = chunk.iter().map(|(_, x)| *x).collect();
            let b = imgs.len();
            let (raw, (h, w)) = self.model.raw_batch(&imgs)?;
            for (bi, (id, _)) in chunk.iter().enumerate() {
                let mut vec = vec![0.0; g * g * dv];
                for c in 0..dv {
                    let plane = &raw[(c * b + bi) * h * w..][..h * w];
                    for gy in 0..g {
                        let ys = gy * h / g..(gy + 1) * h / g;
                        for gx in 0..g {
                            let xs = gx * w / g..(gx + 1) * w / g;
                            let mut acc = 0.0;
                            for y in ys.clone() {
                                for x in xs.clone() {
                                    acc += plane[y * w + x];
                                }
                            }
                            vec[(gy * g + gx) * dv + c] = acc / (ys.len() * xs.len()) as f64;
                        }
                    }
                }
                out.push(guard_zero_norm(ReferenceFeature {
                    id: id.to_string(),
                    vec,
                }));
            }
        }
        Ok(out)
    }
}

fn guard_zero_norm(mut f: ReferenceFeature) -> ReferenceFeature {
    if f.vec.iter().all(|&v| v == 0.0) {
        log::warn!("reference feature for `{}` has zero norm; using a unit basis vector", f.id);
        if let Some(first) = f.vec.first_mut() {
            *first = 1.0;
        }
    }
    f
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - u.v / (|u| |v|)`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(distance_with_norms(u, nu, v, nv))
}

fn distance_with_norms(u: &[f64], nu: f64, v: &[f64], nv: f64) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (1.0 - dot / (nu * nv)).clamp(0.0, 2.0)
}

/// Reciprocal-distance weighted average of the `k_nn` closest labeled
/// concept vectors. Ties at equal distance go to the smaller id.
pub fn knn_pseudo_label(
    target: &ReferenceFeature,
    labeled: &[(ReferenceFeature, Vec<u8>)],
    k_nn: usize,
) -> Result<PseudoLabel> {
    if k_nn == 0 || labeled.len() < k_nn {
        return Err(Error::TooFewNeighbours {
            needed: k_nn.max(1),
            available: labeled.len(),
        });
    }
    let mut dists = labeled
        .iter()
        .enumerate()
        .map(|(j, (f, _))| Ok((cosine_distance(&target.vec, &f.vec)?, j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(from_distances(&target.id, &mut dists, labeled, k_nn))
}

fn from_distances(
    id: &str,
    dists: &mut [(f64, usize)],
    labeled: &[(ReferenceFeature, Vec<u8>)],
    k_nn: usize,
) -> PseudoLabel {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0)
            .then_with(|| labeled[a.1].0.id.cmp(&labeled[b.1].0.id))
    };
    if k_nn < dists.len() {
        dists.select_nth_unstable_by(k_nn - 1, cmp);
    }
    let nearest = &mut dists[..k_nn];
    nearest.sort_by(cmp);
    let inv: Vec<f64> = nearest.iter().map(|(d, _)| 1.0 / d.max(DISTANCE_FLOOR)).collect();
    let total: f64 = inv.iter().sum();
    let weights: Vec<f64> = inv.iter().map(|v| v / total).collect();
    let k = labeled[0].1.len();
    let mut c_img = vec![0.0; k];
    for ((_, j), w) in nearest.iter().zip(&weights) {
        for (c, &bit) in c_img.iter_mut().zip(&labeled[*j].1) {
            *c += w * f64::from(bit);
        }
    }
    for c in &mut c_img {
        *c = c.clamp(0.0, 1.0);
    }
    PseudoLabel {
        id: id.to_string(),
        c_img,
        neighbor_ids: nearest.iter().map(|(_, j)| labeled[*j].0.id.clone()).collect(),
        weights,
    }
}

/// One pseudo label per unlabeled feature, keyed by id.
pub fn build_pseudo_labels(
    labeled: &[(ReferenceFeature, Vec<u8>)],
    unlabeled: &[ReferenceFeature],
    k_nn: usize,
) -> Result<BTreeMap<String, PseudoLabel>> {
    if k_nn == 0 || labeled.len() < k_nn {
        return Err(Error::TooFewNeighbours {
            needed: k_nn.max(1),
            available: labeled.len(),
        });
    }
    let nonzero = |v: &[f64]| -> Result<f64> {
        let n = norm(v);
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(n)
    };
    let lab_norms = labeled
        .iter()
        .map(|(f, _)| nonzero(&f.vec))
        .collect::<Result<Vec<_>>>()?;
    let mut out = BTreeMap::new();
    for target in unlabeled {
        let nu = nonzero(&target.vec)?;
        let mut dists: Vec<(f64, usize)> = labeled
            .iter()
            .zip(&lab_norms)
            .enumerate()
            .map(|(j, ((f, _), &nl))| (distance_with_norms(&target.vec, nu, &f.vec, nl), j))
            .collect();
        let pl = from_distances(&target.id, &mut dists, labeled, k_nn);
        out.insert(target.id.clone(), pl);
    }
    Ok(out)
}

/// Encode both halves of a split and label every unlabeled example.
pub fn pseudo_label_split(
    encoder: &ReferenceEncoder,
    split: &SemiSplit,
    k_nn: usize,
) -> Result<BTreeMap<String, PseudoLabel>> {
    let labeled = labeled_features(encoder, &split.labeled)?;
    let items: Vec<(&str, &Image)> = split
        .unlabeled
        .iter()
        .map(|u| (u.id.as_str(), &u.input))
        .collect();
    let unlabeled = encoder.encode_batch(&items)?;
    build_pseudo_labels(&labeled, &unlabeled, k_nn)
}

fn labeled_features(
    encoder: &ReferenceEncoder,
    labeled: &[Example],
) -> Result<Vec<(ReferenceFeature, Vec<u8>)>> {
    let items: Vec<(&str, &Image)> = labeled.iter().map(|e| (e.id.as_str(), &e.input)).collect();
    let feats = encoder.encode_batch(&items)?;
    feats
        .into_iter()
        .zip(labeled)
        .map(|(f, e)| {
            let c = e
                .concepts
                .clone()
                .ok_or_else(|| Error::Split(format!("labeled example `{}` has no concepts", e.id)))?;
            Ok((f, c))
        })
        .collect()
}

/// Label a split from precomputed features, one JSON object
/// `{"id": .., "vec": [..]}` per line.
pub fn pseudo_label_from_features(
    features: &BTreeMap<String, Vec<f64>>,
    split: &SemiSplit,
    k_nn: usize,
) -> Result<BTreeMap<String, PseudoLabel>> {
    let lookup = |id: &str| -> Result<ReferenceFeature> {
        let vec = features
            .get(id)
            .ok_or_else(|| Error::UnknownExample(id.to_string()))?
            .clone();
        Ok(guard_zero_norm(ReferenceFeature { id: id.to_string(), vec }))
    };
    let labeled = split
        .labeled
        .iter()
        .map(|e| {
            let c = e
                .concepts
                .clone()
                .ok_or_else(|| Error::Split(format!("labeled example `{}` has no concepts", e.id)))?;
            Ok((lookup(&e.id)?, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = split
        .unlabeled
        .iter()
        .map(|u| lookup(&u.id))
        .collect::<Result<Vec<_>>>()?;
    build_pseudo_labels(&labeled, &unlabeled, k_nn)
}

pub fn read_feature_file(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let file = fs::File::open(path).at(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let f: ReferenceFeature = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if f.vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "non-finite feature value".into(),
            });
        }
        out.insert(f.id, f.vec);
    }
    Ok(out)
}

pub fn write_pseudo_labels(path: &Path, labels: &BTreeMap<String, PseudoLabel>) -> Result<()> {
    let mut buf = Vec::new();
    for pl in labels.values() {
        serde_json::to_writer(&mut buf, pl)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&buf).at(path)?;
    Ok(())
}

pub fn read_pseudo_labels(path: &Path) -> Result<BTreeMap<String, PseudoLabel>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pl: PseudoLabel = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(pl.id.clone(), pl);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(id: &str, v: &[f64]) -> ReferenceFeature {
        ReferenceFeature {
            id: id.into(),
            vec: v.to_vec(),
        }
    }

    #[test]
    fn cosine_distance_basics() {
        assert!(cosine_distance(&[0.3, 0.4], &[0.3, 0.4]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn single_neighbour_copies_concepts() {
        let labeled = vec![
            (feat("a", &[1.0, 0.0]), vec![1, 0, 1]),
            (feat("b", &[0.0, 1.0]), vec![0, 1, 0]),
        ];
        let pl = knn_pseudo_label(&feat("u", &[0.9, 0.2]), &labeled, 1).unwrap();
        assert_eq!(pl.c_img, vec![1.0, 0.0, 1.0]);
        assert_eq!(pl.neighbor_ids, vec!["a"]);
        assert_eq!(pl.weights, vec![1.0]);
    }

    #[test]
    fn reciprocal_weights_two_thirds_one_third() {
        // target at angle with cos = 0.8 to a (d = 0.2) and 0.6 to b (d = 0.4)
        let labeled = vec![
            (feat("a", &[1.0, 0.0]), vec![1, 0]),
            (feat("b", &[0.0, 1.0]), vec![0, 1]),
        ];
        let pl = knn_pseudo_label(&feat("u", &[0.8, 0.6]), &labeled, 2).unwrap();
        assert!((pl.weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((pl.weights[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((pl.c_img[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((pl.c_img[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_dominates_through_distance_floor() {
        let labeled = vec![
            (feat("a", &[1.0, 2.0]), vec![1, 0]),
            (feat("b", &[2.0, 1.0]), vec![0, 1]),
        ];
        let pl = knn_pseudo_label(&feat("u", &[1.0, 2.0]), &labeled, 2).unwrap();
        assert!((pl.c_img[0] - 1.0).abs() < 1e-6);
        assert!(pl.c_img[1] < 1e-6);
    }

    #[test]
    fn too_few_neighbours() {
        let labeled = vec![(feat("a", &[1.0]), vec![1])];
        assert!(matches!(
            knn_pseudo_label(&feat("u", &[1.0]), &labeled, 2),
            Err(Error::TooFewNeighbours { needed: 2, available: 1 })
        ));
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let labeled = vec![
            (feat("z", &[1.0, 0.0]), vec![0]),
            (feat("a", &[1.0, 0.0]), vec![1]),
        ];
        let pl = knn_pseudo_label(&feat("u", &[1.0, 1.0]), &labeled, 1).unwrap();
        assert_eq!(pl.neighbor_ids, vec!["a"]);
    }

    #[test]
    fn batch_build_agrees_with_single() {
        let labeled: Vec<_> = (0..6)
            .map(|i| {
                let x = i as f64;
                (feat(&format!("l{i}"), &[x.sin() + 1.1, x.cos(), 0.5]), vec![(i % 2) as u8, (i % 3 == 0) as u8])
            })
            .collect();
        let unlabeled: Vec<_> = (0..5)
            .map(|i| feat(&format!("u{i}"), &[1.0, (i as f64) * 0.3 - 0.6, 0.2]))
            .collect();
        let built = build_pseudo_labels(&labeled, &unlabeled, 3).unwrap();
        assert_eq!(built.len(), 5);
        for u in &unlabeled {
            let single = knn_pseudo_label(u, &labeled, 3).unwrap();
            let b = &built[&u.id];
            assert_eq!(single.neighbor_ids, b.neighbor_ids);
            assert_eq!(&single, b);
        }
    }

    #[test]
    fn frozen_encoder_is_deterministic_with_configured_dim() {
        let enc = ReferenceEncoder::frozen([3, 16, 16], 2).unwrap();
        let img = Image::from_vec([3, 16, 16], (0..768).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let a = enc.encode("x", &img).unwrap();
        let b = enc.encode("y", &img.clone()).unwrap();
        assert_eq!(a.vec, b.vec);
        assert_eq!(a.vec.len(), enc.dim());
        assert_eq!(enc.dim(), 4 * 16);
        assert!(cosine_distance(&a.vec, &b.vec).unwrap().abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(PSEUDO_LABELS_FILE);
        let mut labels = BTreeMap::new();
        labels.insert(
            "u1".to_string(),
            PseudoLabel {
                id: "u1".into(),
                c_img: vec![0.25, 1.0],
                neighbor_ids: vec!["a".into(), "b".into()],
                weights: vec![0.75, 0.25],
            },
        );
        write_pseudo_labels(&path, &labels).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"id\":\"u1\",\"c_img\":[0.25,1.0],\"neighbors\":[\"a\",\"b\"],\"weights\":[0.75,0.25]}\n"
        );
        assert_eq!(read_pseudo_labels(&path).unwrap(), labels);
    }
}
