use super::ops::{gemm, leaky_relu, leaky_relu_grad, logistic, ConvStage};
use super::{
    ConceptEmbeddingState, HeatmapEmbedding, LatentCode, ModelConfig, Params, SpatialFeatureMap,
    Variant,
};
use crate::alignment::{cosine_heatmap_backward, cosine_heatmap_into, HeatmapStack};
use crate::dataset::Image;
use crate::error::{Error, Result};

/// Fixed input normalisation applied before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_SCALE: f64 = 0.25;

/// Model configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Single-example forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub p_hat: Vec<f64>,
    pub states: Vec<ConceptEmbeddingState>,
    pub feature_map: SpatialFeatureMap,
    pub logits: Vec<f64>,
}

impl ForwardOutput {
    /// Predicted binary concepts, `p_hat >= 0.5`.
    pub fn concepts(&self) -> Vec<u8> {
        self.p_hat.iter().map(|&p| u8::from(p >= 0.5)).collect()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Lowest index among the maxima.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Everything a batched forward pass computes, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub batch: usize,
    convs: [ConvStage; 3],
    pooled: Vec<f64>,
    latent_pre: Vec<f64>,
    /// (B, n_h)
    pub latent: Vec<f64>,
    gen_pre: Vec<f64>,
    /// (B, k, 2m): positive then negative embedding per concept.
    pub embeddings: Vec<f64>,
    /// (B, k)
    pub p_hat: Vec<f64>,
    /// (B, k, m)
    pub mixed: Vec<f64>,
    /// (B, l)
    pub logits: Vec<f64>,
    /// (B, H, W, m)
    pub projected: Vec<f64>,
    /// (B, H, W, k)
    pub heatmaps: Vec<f64>,
    /// (B, k) pooled heatmaps.
    pub scores: Vec<f64>,
}

/// Loss gradients with respect to the batch outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    /// (B, l)
    pub d_logits: Vec<f64>,
    /// (B, k)
    pub d_p_hat: Vec<f64>,
    /// (B, k)
    pub d_scores: Vec<f64>,
}

impl OutputGrads {
    pub fn zeros(batch: usize, k: usize, l: usize) -> Self {
        Self {
            d_logits: vec![0.0; batch * l],
            d_p_hat: vec![0.0; batch * k],
            d_scores: vec![0.0; batch * k],
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let named = params
            .named()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let params = Params::from_named(&config, named)?;
        Ok(Self { config, params })
    }

    fn check_input(&self, input: &Image) -> Result<()> {
        if input.shape() != self.config.input_shape {
            return Err(Error::Shape {
                expected: self.config.input_shape.to_vec(),
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn backbone(&self, inputs: &[&Image]) -> Result<([ConvStage; 3], (usize, usize))> {
        for x in inputs {
            self.check_input(x)?;
        }
        let [cin, h, w] = self.config.input_shape;
        let [c1, c2, _] = self.config.conv_channels;
        let b = inputs.len();
        // (C, B, H, W)
        let mut x = vec![0.0; cin * b * h * w];
        for (bi, img) in inputs.iter().enumerate() {
            for c in 0..cin {
                let dst = &mut x[(c * b + bi) * h * w..][..h * w];
                for (d, s) in dst.iter_mut().zip(&img.data[c * h * w..][..h * w]) {
                    *d = (*s as f64 - INPUT_MEAN) / INPUT_SCALE;
                }
            }
        }
        let p = &self.params;
        let s1 = ConvStage::forward(&x, cin, b, (h, w), 2, &p.conv1_w.data, &p.conv1_b.data);
        let s2 = ConvStage::forward(&s1.out, c1, b, s1.out_hw, 2, &p.conv2_w.data, &p.conv2_b.data);
        let s3 = ConvStage::forward(&s2.out, c2, b, s2.out_hw, 1, &p.conv3_w.data, &p.conv3_b.data);
        let hw = s3.out_hw;
        Ok(([s1, s2, s3], hw))
    }

    /// Raw backbone maps for a batch, laid out (d_v, B, H, W).
    pub(crate) fn raw_batch(&self, inputs: &[&Image]) -> Result<(Vec<f64>, (usize, usize))> {
        let ([_, _, s3], hw) = self.backbone(inputs)?;
        Ok((s3.out, hw))
    }

    /// Quadrant means of the raw map: (B, 4 * d_v).
    fn pool_quadrants(&self, raw: &[f64], b: usize) -> Vec<f64> {
        let dv = self.config.raw_channels();
        let (h, w) = self.config.feature_hw();
        let mut out = vec![0.0; b * 4 * dv];
        for c in 0..dv {
            for bi in 0..b {
                let plane = &raw[(c * b + bi) * h * w..][..h * w];
                for (q, (ys, xs)) in quadrants(h, w).into_iter().enumerate() {
                    let mut acc = 0.0;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            acc += plane[y * w + x];
                        }
                    }
                    out[bi * 4 * dv + q * dv + c] = acc / (ys.len() * xs.len()) as f64;
                }
            }
        }
        out
    }

    /// Batched forward pass over any number of images.
    pub fn forward_batch(&self, inputs: &[&Image]) -> Result<BatchForward> {
        let cfg = &self.config;
        let p = &self.params;
        let b = inputs.len();
        let (k, m, nh, l) = (cfg.k, cfg.m, cfg.n_h, cfg.l);
        let dv = cfg.raw_channels();
        let (convs, (fh, fw)) = self.backbone(inputs)?;
        let raw = &convs[2].out;
        let hw = fh * fw;

        let pooled = self.pool_quadrants(raw, b);
        let mut latent_pre = vec![0.0; b * nh];
        for row in latent_pre.chunks_mut(nh) {
            row.copy_from_slice(&p.latent_b.data);
        }
        gemm(b, 4 * dv, nh, 1.0, &pooled, false, &p.latent_w.data, true, 1.0, &mut latent_pre);
        let latent: Vec<f64> = latent_pre.iter().map(|&z| leaky_relu(z)).collect();

        let g = k * 2 * m;
        let mut gen_pre = vec![0.0; b * g];
        for row in gen_pre.chunks_mut(g) {
            row.copy_from_slice(&p.generator_b.data);
        }
        gemm(b, nh, g, 1.0, &latent, false, &p.generator_w.data, true, 1.0, &mut gen_pre);
        let act = cfg.generator_activation;
        let embeddings: Vec<f64> = gen_pre.iter().map(|&z| act.apply(z)).collect();

        let mut p_hat = vec![0.0; b * k];
        let mut mixed = vec![0.0; b * k * m];
        for (pair, (ph, mx)) in embeddings
            .chunks(2 * m)
            .zip(p_hat.iter_mut().zip(mixed.chunks_mut(m)))
        {
            let logit: f64 = pair.iter().zip(&p.scorer_w.data).map(|(a, w)| a * w).sum::<f64>()
                + p.scorer_b.data[0];
            *ph = logistic(logit);
            let (pos, neg) = pair.split_at(m);
            for ((o, a), n) in mx.iter_mut().zip(pos).zip(neg) {
                *o = *ph * a + (1.0 - *ph) * n;
            }
        }

        let mut logits = vec![0.0; b * l];
        for row in logits.chunks_mut(l) {
            row.copy_from_slice(&p.predictor_b.data);
        }
        match cfg.variant {
            Variant::CbmSsl => gemm(b, k, l, 1.0, &p_hat, false, &p.predictor_w.data, true, 1.0, &mut logits),
            Variant::Sscbm | Variant::CemSsl => {
                gemm(b, k * m, l, 1.0, &mixed, false, &p.predictor_w.data, true, 1.0, &mut logits)
            }
        }

        // projected (B*HW, m) = raw^T (B*HW, dv) . W_p^T + b_p
        let mut projected = vec![0.0; b * hw * m];
        for row in projected.chunks_mut(m) {
            row.copy_from_slice(&p.projection_b.data);
        }
        gemm(b * hw, dv, m, 1.0, raw, true, &p.projection_w.data, true, 1.0, &mut projected);

        let mut heatmaps = vec![0.0; b * hw * k];
        let mut scores = vec![0.0; b * k];
        let mut emb = vec![0.0; k * m];
        for bi in 0..b {
            self.heatmap_embeddings(&embeddings, &mixed, bi, &mut emb);
            let heat = &mut heatmaps[bi * hw * k..][..hw * k];
            cosine_heatmap_into(&projected[bi * hw * m..][..hw * m], m, &emb, k, heat);
            let s = &mut scores[bi * k..][..k];
            for cell in heat.chunks(k) {
                for (acc, v) in s.iter_mut().zip(cell) {
                    *acc += v;
                }
            }
            s.iter_mut().for_each(|v| *v /= hw as f64);
        }

        Ok(BatchForward {
            batch: b,
            convs,
            pooled,
            latent_pre,
            latent,
            gen_pre,
            embeddings,
            p_hat,
            mixed,
            logits,
            projected,
            heatmaps,
            scores,
        })
    }

    fn heatmap_embeddings(&self, embeddings: &[f64], mixed: &[f64], bi: usize, out: &mut [f64]) {
        let (k, m) = (self.config.k, self.config.m);
        match self.config.heatmap_embedding {
            HeatmapEmbedding::Mixed => out.copy_from_slice(&mixed[bi * k * m..][..k * m]),
            HeatmapEmbedding::Positive => {
                for i in 0..k {
                    out[i * m..][..m].copy_from_slice(&embeddings[(bi * k + i) * 2 * m..][..m]);
                }
            }
        }
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradients at the batch outputs.
    pub fn backward(&self, fw: &BatchForward, grads: &OutputGrads) -> Params {
        let cfg = &self.config;
        let p = &self.params;
        let b = fw.batch;
        let (k, m, nh, l) = (cfg.k, cfg.m, cfg.n_h, cfg.l);
        let dv = cfg.raw_channels();
        let (fh, fw_) = cfg.feature_hw();
        let hw = fh * fw_;
        let mut g = Params::zeros(cfg);

        let mut d_p = grads.d_p_hat.clone();
        let mut d_mixed = vec![0.0; b * k * m];
        let mut d_emb = vec![0.0; b * k * 2 * m];
        let mut d_proj = vec![0.0; b * hw * m];

        // heatmaps -> embeddings, projected map
        let mut emb = vec![0.0; k * m];
        let mut d_e = vec![0.0; k * m];
        let mut d_heat = vec![0.0; hw * k];
        for bi in 0..b {
            let ds = &grads.d_scores[bi * k..][..k];
            if ds.iter().all(|&v| v == 0.0) {
                continue;
            }
            for cell in d_heat.chunks_mut(k) {
                for (c, s) in cell.iter_mut().zip(ds) {
                    *c = s / hw as f64;
                }
            }
            self.heatmap_embeddings(&fw.embeddings, &fw.mixed, bi, &mut emb);
            d_e.fill(0.0);
            cosine_heatmap_backward(
                &fw.projected[bi * hw * m..][..hw * m],
                m,
                &emb,
                k,
                &d_heat,
                &mut d_proj[bi * hw * m..][..hw * m],
                &mut d_e,
            );
            match cfg.heatmap_embedding {
                HeatmapEmbedding::Mixed => {
                    for (a, v) in d_mixed[bi * k * m..][..k * m].iter_mut().zip(&d_e) {
                        *a += v;
                    }
                }
                HeatmapEmbedding::Positive => {
                    for i in 0..k {
                        let dst = &mut d_emb[(bi * k + i) * 2 * m..][..m];
                        for (a, v) in dst.iter_mut().zip(&d_e[i * m..][..m]) {
                            *a += v;
                        }
                    }
                }
            }
        }

        // predictor
        for row in grads.d_logits.chunks(l) {
            for (a, v) in g.predictor_b.data.iter_mut().zip(row) {
                *a += v;
            }
        }
        match cfg.variant {
            Variant::CbmSsl => {
                gemm(l, b, k, 1.0, &grads.d_logits, true, &fw.p_hat, false, 1.0, &mut g.predictor_w.data);
                gemm(b, l, k, 1.0, &grads.d_logits, false, &p.predictor_w.data, false, 1.0, &mut d_p);
            }
            Variant::Sscbm | Variant::CemSsl => {
                gemm(l, b, k * m, 1.0, &grads.d_logits, true, &fw.mixed, false, 1.0, &mut g.predictor_w.data);
                gemm(b, l, k * m, 1.0, &grads.d_logits, false, &p.predictor_w.data, false, 1.0, &mut d_mixed);
            }
        }

        // mixture and scorer
        let mut d_score_logit = vec![0.0; b * k];
        for idx in 0..b * k {
            let ph = fw.p_hat[idx];
            let pair = &fw.embeddings[idx * 2 * m..][..2 * m];
            let (pos, neg) = pair.split_at(m);
            let dm = &d_mixed[idx * m..][..m];
            let dpair = &mut d_emb[idx * 2 * m..][..2 * m];
            let mut dp = d_p[idx];
            for j in 0..m {
                dpair[j] += ph * dm[j];
                dpair[m + j] += (1.0 - ph) * dm[j];
                dp += dm[j] * (pos[j] - neg[j]);
            }
            d_p[idx] = dp;
            let dz = dp * ph * (1.0 - ph);
            d_score_logit[idx] = dz;
            g.scorer_b.data[0] += dz;
            for j in 0..2 * m {
                g.scorer_w.data[j] += dz * pair[j];
                dpair[j] += dz * p.scorer_w.data[j];
            }
        }

        // generator
        let gw = k * 2 * m;
        let act = cfg.generator_activation;
        let d_gen: Vec<f64> = d_emb
            .iter()
            .zip(&fw.gen_pre)
            .map(|(d, &z)| d * act.grad(z))
            .collect();
        for row in d_gen.chunks(gw) {
            for (a, v) in g.generator_b.data.iter_mut().zip(row) {
                *a += v;
            }
        }
        gemm(gw, b, nh, 1.0, &d_gen, true, &fw.latent, false, 1.0, &mut g.generator_w.data);
        let mut d_latent = vec![0.0; b * nh];
        gemm(b, gw, nh, 1.0, &d_gen, false, &p.generator_w.data, false, 0.0, &mut d_latent);

        // latent layer
        let d_lat_pre: Vec<f64> = d_latent
            .iter()
            .zip(&fw.latent_pre)
            .map(|(d, &z)| d * leaky_relu_grad(z))
            .collect();
        for row in d_lat_pre.chunks(nh) {
            for (a, v) in g.latent_b.data.iter_mut().zip(row) {
                *a += v;
            }
        }
        gemm(nh, b, 4 * dv, 1.0, &d_lat_pre, true, &fw.pooled, false, 1.0, &mut g.latent_w.data);
        let mut d_pooled = vec![0.0; b * 4 * dv];
        gemm(b, nh, 4 * dv, 1.0, &d_lat_pre, false, &p.latent_w.data, false, 0.0, &mut d_pooled);

        // raw map gradient: from quadrant pooling and from the projection
        let raw = &fw.convs[2].out;
        let mut d_raw = vec![0.0; dv * b * hw];
        for c in 0..dv {
            for bi in 0..b {
                let plane = &mut d_raw[(c * b + bi) * hw..][..hw];
                for (q, (ys, xs)) in quadrants(fh, fw_).into_iter().enumerate() {
                    let v = d_pooled[bi * 4 * dv + q * dv + c] / (ys.len() * xs.len()) as f64;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            plane[y * fw_ + x] += v;
                        }
                    }
                }
            }
        }
        for row in d_proj.chunks(m) {
            for (a, v) in g.projection_b.data.iter_mut().zip(row) {
                *a += v;
            }
        }
        gemm(m, b * hw, dv, 1.0, &d_proj, true, raw, true, 1.0, &mut g.projection_w.data);
        gemm(dv, m, b * hw, 1.0, &p.projection_w.data, true, &d_proj, true, 1.0, &mut d_raw);

        // conv stages
        let [s1, s2, s3] = &fw.convs;
        let d_a2 = s3
            .backward(&d_raw, b, &p.conv3_w.data, &mut g.conv3_w.data, &mut g.conv3_b.data, true)
            .expect("input gradient requested");
        let d_a1 = s2
            .backward(&d_a2, b, &p.conv2_w.data, &mut g.conv2_w.data, &mut g.conv2_b.data, true)
            .expect("input gradient requested");
        s1.backward(&d_a1, b, &p.conv1_w.data, &mut g.conv1_w.data, &mut g.conv1_b.data, false);
        g
    }

    pub fn extract_latent(&self, input: &Image) -> Result<LatentCode> {
        let fw = self.forward_batch(&[input])?;
        Ok(LatentCode(fw.latent))
    }

    pub fn extract_feature_map(&self, input: &Image) -> Result<SpatialFeatureMap> {
        let fw = self.forward_batch(&[input])?;
        Ok(self.feature_map_of(&fw, 0))
    }

    fn feature_map_of(&self, fw: &BatchForward, bi: usize) -> SpatialFeatureMap {
        let (h, w) = self.config.feature_hw();
        let (dv, m, b) = (self.config.raw_channels(), self.config.m, fw.batch);
        let raw_cbhw = &fw.convs[2].out;
        let mut raw = vec![0.0; h * w * dv];
        for c in 0..dv {
            for pos in 0..h * w {
                raw[pos * dv + c] = raw_cbhw[(c * b + bi) * h * w + pos];
            }
        }
        SpatialFeatureMap {
            height: h,
            width: w,
            raw_channels: dv,
            raw,
            channels: m,
            projected: fw.projected[bi * h * w * m..][..h * w * m].to_vec(),
        }
    }

    /// Per-position projection of a raw (H, W, d_v) map.
    pub fn project(&self, raw: &[f64], height: usize, width: usize) -> Result<SpatialFeatureMap> {
        let (dv, m) = (self.config.raw_channels(), self.config.m);
        if raw.len() != height * width * dv {
            return Err(Error::Shape {
                expected: vec![height, width, dv],
                actual: vec![raw.len()],
            });
        }
        let mut projected = vec![0.0; height * width * m];
        for row in projected.chunks_mut(m) {
            row.copy_from_slice(&self.params.projection_b.data);
        }
        gemm(height * width, dv, m, 1.0, raw, false, &self.params.projection_w.data, true, 1.0, &mut projected);
        Ok(SpatialFeatureMap {
            height,
            width,
            raw_channels: dv,
            raw: raw.to_vec(),
            channels: m,
            projected,
        })
    }

    /// `(pos, neg)` embedding pair for every concept.
    pub fn generate_embeddings(&self, h: &LatentCode) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let (k, m, nh) = (self.config.k, self.config.m, self.config.n_h);
        if h.0.len() != nh {
            return Err(Error::Shape {
                expected: vec![nh],
                actual: vec![h.0.len()],
            });
        }
        let mut z = self.params.generator_b.data.clone();
        gemm(1, nh, k * 2 * m, 1.0, &h.0, false, &self.params.generator_w.data, true, 1.0, &mut z);
        let act = self.config.generator_activation;
        Ok(z.chunks(2 * m)
            .map(|pair| {
                let e: Vec<f64> = pair.iter().map(|&v| act.apply(v)).collect();
                (e[..m].to_vec(), e[m..].to_vec())
            })
            .collect())
    }

    pub fn score_concept(&self, pos: &[f64], neg: &[f64]) -> f64 {
        let w = &self.params.scorer_w.data;
        let m = pos.len();
        let z: f64 = pos.iter().zip(&w[..m]).map(|(a, b)| a * b).sum::<f64>()
            + neg.iter().zip(&w[m..]).map(|(a, b)| a * b).sum::<f64>()
            + self.params.scorer_b.data[0];
        logistic(z)
    }

    /// Class logits from concept states: over the concatenated mixed
    /// embeddings, or over the probabilities for the CBM variant.
    pub fn predict_label(&self, states: &[ConceptEmbeddingState]) -> Result<Vec<f64>> {
        let (k, m, l) = (self.config.k, self.config.m, self.config.l);
        if states.len() != k {
            return Err(Error::Shape {
                expected: vec![k],
                actual: vec![states.len()],
            });
        }
        let features: Vec<f64> = match self.config.variant {
            Variant::CbmSsl => states.iter().map(|s| s.p_hat).collect(),
            Variant::Sscbm | Variant::CemSsl => {
                if let Some(bad) = states.iter().find(|s| s.mixed.len() != m) {
                    return Err(Error::Shape {
                        expected: vec![m],
                        actual: vec![bad.mixed.len()],
                    });
                }
                states.iter().flat_map(|s| s.mixed.iter().copied()).collect()
            }
        };
        let mut logits = self.params.predictor_b.data.clone();
        gemm(1, features.len(), l, 1.0, &features, false, &self.params.predictor_w.data, true, 1.0, &mut logits);
        Ok(logits)
    }

    pub fn forward(&self, input: &Image) -> Result<ForwardOutput> {
        let fw = self.forward_batch(&[input])?;
        Ok(self.unbatch(&fw).remove(0))
    }

    /// Split a batched result into per-example outputs.
    pub fn unbatch(&self, fw: &BatchForward) -> Vec<ForwardOutput> {
        let (k, m, l) = (self.config.k, self.config.m, self.config.l);
        (0..fw.batch)
            .map(|bi| {
                let states = (0..k)
                    .map(|i| {
                        let idx = bi * k + i;
                        let pair = &fw.embeddings[idx * 2 * m..][..2 * m];
                        ConceptEmbeddingState {
                            pos: pair[..m].to_vec(),
                            neg: pair[m..].to_vec(),
                            p_hat: fw.p_hat[idx],
                            mixed: fw.mixed[idx * m..][..m].to_vec(),
                        }
                    })
                    .collect();
                ForwardOutput {
                    p_hat: fw.p_hat[bi * k..][..k].to_vec(),
                    states,
                    feature_map: self.feature_map_of(fw, bi),
                    logits: fw.logits[bi * l..][..l].to_vec(),
                }
            })
            .collect()
    }

    /// Heatmap stack of one example from a batched pass.
    pub fn heatmaps_of(&self, fw: &BatchForward, bi: usize) -> HeatmapStack {
        let (h, w) = self.config.feature_hw();
        let k = self.config.k;
        HeatmapStack {
            height: h,
            width: w,
            k,
            values: fw.heatmaps[bi * h * w * k..][..h * w * k].to_vec(),
        }
    }

    /// The embeddings the heatmaps use, one per concept.
    pub fn heatmap_vectors(&self, out: &ForwardOutput) -> Vec<Vec<f64>> {
        out.states
            .iter()
            .map(|s| match self.config.heatmap_embedding {
                HeatmapEmbedding::Mixed => s.mixed.clone(),
                HeatmapEmbedding::Positive => s.pos.clone(),
            })
            .collect()
    }
}

fn quadrants(h: usize, w: usize) -> [(std::ops::Range<usize>, std::ops::Range<usize>); 4] {
    let (hy, hx) = (h / 2, w / 2);
    [
        (0..hy, 0..hx),
        (0..hy, hx..w),
        (hy..h, 0..hx),
        (hy..h, hx..w),
    ]
}
