use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Variant};
use crate::error::{Error, Result};

/// A named, dense, row-major parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| dist.sample(rng))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All trainable weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub latent_w: Tensor,
    pub latent_b: Tensor,
    pub generator_w: Tensor,
    pub generator_b: Tensor,
    pub scorer_w: Tensor,
    pub scorer_b: Tensor,
    pub projection_w: Tensor,
    pub projection_b: Tensor,
    pub predictor_w: Tensor,
    pub predictor_b: Tensor,
}

pub const PARAM_NAMES: [&str; 16] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "latent.weight",
    "latent.bias",
    "generator.weight",
    "generator.bias",
    "scorer.weight",
    "scorer.bias",
    "projection.weight",
    "projection.bias",
    "predictor.weight",
    "predictor.bias",
];

/// Expected shape of every parameter tensor, in `PARAM_NAMES` order.
pub fn param_shapes(cfg: &ModelConfig) -> [Vec<usize>; 16] {
    let [c1, c2, dv] = cfg.conv_channels;
    let cin = cfg.input_shape[0];
    let (k, m, nh, l) = (cfg.k, cfg.m, cfg.n_h, cfg.l);
    let pred_in = match cfg.variant {
        Variant::CbmSsl => k,
        Variant::Sscbm | Variant::CemSsl => k * m,
    };
    [
        vec![c1, cin * 9],
        vec![c1],
        vec![c2, c1 * 9],
        vec![c2],
        vec![dv, c2 * 9],
        vec![dv],
        vec![nh, 4 * dv],
        vec![nh],
        vec![k * 2 * m, nh],
        vec![k * 2 * m],
        vec![2 * m],
        vec![1],
        vec![m, dv],
        vec![m],
        vec![l, pred_in],
        vec![l],
    ]
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let s = param_shapes(cfg);
        Self::from_tensors(s.iter().map(|sh| Tensor::zeros(sh)).collect())
    }

    /// He-normal weights, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = PARAM_NAMES
            .iter()
            .zip(param_shapes(cfg).iter())
            .map(|(name, sh)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(sh);
                }
                let fan_in = *sh.last().expect("weights have a fan-in axis") as f64;
                let gain = match *name {
                    "conv1.weight" | "conv2.weight" | "conv3.weight" | "latent.weight"
                    | "generator.weight" => 2.0,
                    _ => 1.0,
                };
                Tensor::normal(sh, (gain / fan_in).sqrt(), &mut rng)
            })
            .collect();
        Self::from_tensors(tensors)
    }

    fn from_tensors(t: Vec<Tensor>) -> Self {
        let mut it = t.into_iter();
        let mut next = || it.next().expect("16 tensors");
        Self {
            conv1_w: next(),
            conv1_b: next(),
            conv2_w: next(),
            conv2_b: next(),
            conv3_w: next(),
            conv3_b: next(),
            latent_w: next(),
            latent_b: next(),
            generator_w: next(),
            generator_b: next(),
            scorer_w: next(),
            scorer_b: next(),
            projection_w: next(),
            projection_b: next(),
            predictor_w: next(),
            predictor_b: next(),
        }
    }

    /// Build from named tensors, checking every name and shape against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let shapes = param_shapes(cfg);
        let mut out = Vec::with_capacity(16);
        for (name, shape) in PARAM_NAMES.iter().zip(shapes.iter()) {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let (_, t) = named.swap_remove(pos);
            if &t.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape
                )));
            }
            out.push(t);
        }
        if let Some((n, _)) = named.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{n}`")));
        }
        Ok(Self::from_tensors(out))
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
            &self.latent_w,
            &self.latent_b,
            &self.generator_w,
            &self.generator_b,
            &self.scorer_w,
            &self.scorer_b,
            &self.projection_w,
            &self.projection_b,
            &self.predictor_w,
            &self.predictor_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
            &mut self.latent_w,
            &mut self.latent_b,
            &mut self.generator_w,
            &mut self.generator_b,
            &mut self.scorer_w,
            &mut self.scorer_b,
            &mut self.projection_w,
            &mut self.projection_b,
            &mut self.predictor_w,
            &mut self.predictor_b,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }
}
