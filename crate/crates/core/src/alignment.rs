//! Concept heatmaps: cosine similarity between every projected feature-map
//! position and each concept embedding, average-pooled into concept scores,
//! thresholded into alignment labels and upsampled into saliency maps.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::dataset::write_tensor;
use crate::encoder::{logistic, SpatialFeatureMap};
use crate::error::{Error, IoContext, Result};

/// Added to every cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.6;
pub const DEFAULT_BETA: f64 = 10.0;

/// Per-concept similarity maps, stored (H, W, k).
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl HeatmapStack {
    #[inline]
    pub fn at(&self, p: usize, q: usize, i: usize) -> f64 {
        self.values[(p * self.width + q) * self.k + i]
    }

    /// Row-major (H, W) slice for one concept.
    pub fn slice(&self, i: usize) -> Vec<f64> {
        (0..self.height * self.width)
            .map(|pos| self.values[pos * self.k + i])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub s: Vec<f64>,
    pub soft: Vec<f64>,
    pub hard: Vec<u8>,
}

/// Cosine heatmap for one example. `v` is (positions, m), `emb` is (k, m),
/// `out` is (positions, k).
pub(crate) fn cosine_heatmap_into(v: &[f64], m: usize, emb: &[f64], k: usize, out: &mut [f64]) {
    let positions = v.len() / m;
    let emb_norm: Vec<f64> = emb.chunks(m).map(norm).collect();
    for pos in 0..positions {
        let vp = &v[pos * m..][..m];
        let nv = norm(vp);
        for i in 0..k {
            let e = &emb[i * m..][..m];
            out[pos * k + i] = dot(e, vp) / (emb_norm[i] * nv + COSINE_EPS);
        }
    }
}

/// Backpropagate `d_heat` (positions, k) through [`cosine_heatmap_into`],
/// accumulating into `d_v` and `d_emb`.
pub(crate) fn cosine_heatmap_backward(
    v: &[f64],
    m: usize,
    emb: &[f64],
    k: usize,
    d_heat: &[f64],
    d_v: &mut [f64],
    d_emb: &mut [f64],
) {
    let positions = v.len() / m;
    let emb_norm: Vec<f64> = emb.chunks(m).map(norm).collect();
    for pos in 0..positions {
        let vp = &v[pos * m..][..m];
        let nv = norm(vp);
        for i in 0..k {
            let g = d_heat[pos * k + i];
            if g == 0.0 {
                continue;
            }
            let e = &emb[i * m..][..m];
            let ne = emb_norm[i];
            let d = dot(e, vp);
            let n = ne * nv + COSINE_EPS;
            let inv_n = 1.0 / n;
            let common = d * inv_n * inv_n;
            let ce = if ne > 0.0 { common * nv / ne } else { 0.0 };
            let cv = if nv > 0.0 { common * ne / nv } else { 0.0 };
            let dv = &mut d_v[pos * m..][..m];
            let de = &mut d_emb[i * m..][..m];
            for j in 0..m {
                dv[j] += g * (e[j] * inv_n - cv * vp[j]);
                de[j] += g * (vp[j] * inv_n - ce * e[j]);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity between each projected position and each embedding.
pub fn concept_heatmaps(map: &SpatialFeatureMap, embeddings: &[Vec<f64>]) -> Result<HeatmapStack> {
    let m = map.channels;
    let k = embeddings.len();
    let mut flat = Vec::with_capacity(k * m);
    for e in embeddings {
        if e.len() != m {
            return Err(Error::Shape {
                expected: vec![m],
                actual: vec![e.len()],
            });
        }
        if e.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroNorm);
        }
        flat.extend_from_slice(e);
    }
    let mut values = vec![0.0; map.height * map.width * k];
    cosine_heatmap_into(&map.projected, m, &flat, k, &mut values);
    Ok(HeatmapStack {
        height: map.height,
        width: map.width,
        k,
        values,
    })
}

/// Spatial mean of each concept slice.
pub fn pool_scores(stack: &HeatmapStack) -> Vec<f64> {
    let positions = (stack.height * stack.width) as f64;
    let mut s = vec![0.0; stack.k];
    for cell in stack.values.chunks(stack.k) {
        for (acc, v) in s.iter_mut().zip(cell) {
            *acc += v;
        }
    }
    s.iter_mut().for_each(|v| *v /= positions);
    s
}

/// `1` where the pooled score strictly exceeds `tau`.
pub fn harden(s: &[f64], tau: f64) -> Vec<u8> {
    s.iter().map(|&v| u8::from(v > tau)).collect()
}

/// Differentiable stand-in for [`harden`]: `logistic(beta * (s - tau))`.
pub fn soften(s: &[f64], tau: f64, beta: f64) -> Vec<f64> {
    s.iter().map(|&v| logistic(beta * (v - tau))).collect()
}

pub fn alignment_scores(stack: &HeatmapStack, tau: f64, beta: f64) -> AlignmentScores {
    let s = pool_scores(stack);
    AlignmentScores {
        soft: soften(&s, tau, beta),
        hard: harden(&s, tau),
        s,
    }
}

/// An upsampled, min-max normalised concept heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub concept_index: usize,
    pub height: usize,
    pub width: usize,
    pub map: Vec<f64>,
}

impl SaliencyMap {
    /// First (row-major) location of the maximum, as (y, x).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.map.iter().enumerate() {
            if v > self.map[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// 8-bit grayscale PNG; higher saliency renders darker.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.map[y as usize * self.width + x as usize];
            Luma([(255.0 * (1.0 - v)).round().clamp(0.0, 255.0) as u8])
        });
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn render_saliency(
    stack: &HeatmapStack,
    concept_index: usize,
    out_h: usize,
    out_w: usize,
) -> Result<SaliencyMap> {
    if concept_index >= stack.k {
        return Err(Error::ConceptIndex {
            index: concept_index,
            k: stack.k,
        });
    }
    let up = bilinear_upsample(&stack.slice(concept_index), stack.height, stack.width, out_h, out_w);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let map = if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        vec![0.5; up.len()]
    } else {
        up.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Ok(SaliencyMap {
        concept_index,
        height: out_h,
        width: out_w,
        map,
    })
}

/// Write `<root>/<example_id>/<concept>.f32` (+ sidecar) and, optionally, a
/// PNG next to it. Returns the tensor path.
pub fn export_saliency(root: &Path, example_id: &str, map: &SaliencyMap, png: bool) -> Result<PathBuf> {
    let dir = root.join(example_id);
    fs::create_dir_all(&dir).at(&dir)?;
    let path = dir.join(format!("{}.f32", map.concept_index));
    let data: Vec<f32> = map.map.iter().map(|&v| v as f32).collect();
    write_tensor(&path, &[map.height, map.width], &data)?;
    if png {
        let png_path = dir.join(format!("{}.png", map.concept_index));
        fs::write(&png_path, map.to_png()?).at(&png_path)?;
    }
    Ok(path)
}
