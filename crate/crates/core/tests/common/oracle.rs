//! Slow, obviously-correct reference implementations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// KNN pseudo label by sorting every labeled neighbour.
/// Returns (neighbour ids, weights, c_img).
pub fn knn(target: &[f64], labeled: &[(String, Vec<f64>, Vec<u8>)], k_nn: usize) -> (Vec<String>, Vec<f64>, Vec<f64>) {
    let len = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(f64, &String, &Vec<u8>)> = labeled
        .iter()
        .map(|(id, f, c)| {
            let mut d = 0.0;
            for i in 0..f.len() {
                d += target[i] * f[i];
            }
            let dist = (1.0 - d / (len(target) * len(f))).clamp(0.0, 2.0);
            (dist, id, c)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
    let nearest = &all[..k_nn];
    let inv: Vec<f64> = nearest.iter().map(|n| 1.0 / n.0.max(1e-8)).collect();
    let total: f64 = inv.iter().sum();
    let weights: Vec<f64> = inv.iter().map(|v| v / total).collect();
    let k = labeled[0].2.len();
    let mut c = vec![0.0; k];
    for (n, w) in nearest.iter().zip(&weights) {
        for i in 0..k {
            c[i] += w * n.2[i] as f64;
        }
    }
    for x in &mut c {
        *x = x.clamp(0.0, 1.0);
    }
    (nearest.iter().map(|n| n.1.clone()).collect(), weights, c)
}

/// Heatmap value at every (p, q, i) and the spatial means, by explicit loops.
/// `v` is (h, w, m), `emb` is k rows of m.
pub fn heatmap_and_pool(v: &[f64], h: usize, w: usize, m: usize, emb: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = emb.len();
    let mut heat = vec![0.0; h * w * k];
    let mut s = vec![0.0; k];
    for p in 0..h {
        for q in 0..w {
            for i in 0..k {
                let (mut dot, mut nv, mut ne) = (0.0, 0.0, 0.0);
                for j in 0..m {
                    let x = v[(p * w + q) * m + j];
                    dot += x * emb[i][j];
                    nv += x * x;
                    ne += emb[i][j] * emb[i][j];
                }
                let c = dot / (nv.sqrt() * ne.sqrt() + 1e-12);
                heat[(p * w + q) * k + i] = c;
                s[i] += c;
            }
        }
    }
    for x in &mut s {
        *x /= (h * w) as f64;
    }
    (heat, s)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect()
}
