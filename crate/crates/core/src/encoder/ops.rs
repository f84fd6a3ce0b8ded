//! Dense kernels for the toy backbone: GEMM, im2col/col2im, activations.
//!
//! Activations are laid out channel-major over the whole batch, (C, B, H, W),
//! so a 3x3 convolution is a single GEMM against the im2col matrix.

pub(crate) const LEAKY_SLOPE: f64 = 0.01;

/// `c = alpha * op(a) * op(b) + beta * c`, all row-major. `op(a)` is m x k,
/// `op(b)` is k x n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above bound every access made through
    // these strides; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub(crate) fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

/// 3x3, padding 1. Returns the (C*9, B*Ho*Wo) column matrix.
pub(crate) fn im2col(
    input: &[f64],
    channels: usize,
    batch: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let ncols = batch * ho * wo;
    let mut cols = vec![0.0; channels * 9 * ncols];
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * ncols..][..ncols];
                for b in 0..batch {
                    let plane = &input[(c * batch + b) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[(b * ho + oy) * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im(
    cols: &[f64],
    channels: usize,
    batch: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let ncols = batch * ho * wo;
    let mut out = vec![0.0; channels * batch * h * w];
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * ncols..][..ncols];
                for b in 0..batch {
                    let plane = &mut out[(c * batch + b) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[(b * ho + oy) * wo..][..wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cached state of one convolution + leaky-rectifier stage.
#[derive(Debug, Clone)]
pub(crate) struct ConvStage {
    pub cols: Vec<f64>,
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
    pub in_channels: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub stride: usize,
}

impl ConvStage {
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        input: &[f64],
        in_channels: usize,
        batch: usize,
        in_hw: (usize, usize),
        stride: usize,
        weight: &[f64],
        bias: &[f64],
    ) -> Self {
        let out_channels = bias.len();
        let out_hw = (conv_out(in_hw.0, stride), conv_out(in_hw.1, stride));
        let ncols = batch * out_hw.0 * out_hw.1;
        let cols = im2col(input, in_channels, batch, in_hw.0, in_hw.1, stride);
        let mut pre = vec![0.0; out_channels * ncols];
        for (o, row) in pre.chunks_mut(ncols).enumerate() {
            row.fill(bias[o]);
        }
        gemm(out_channels, in_channels * 9, ncols, 1.0, weight, false, &cols, false, 1.0, &mut pre);
        let out = pre.iter().map(|&z| leaky_relu(z)).collect();
        Self {
            cols,
            pre,
            out,
            in_channels,
            in_hw,
            out_hw,
            stride,
        }
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `want_input` is set.
    pub fn backward(
        &self,
        d_out: &[f64],
        batch: usize,
        weight: &[f64],
        d_weight: &mut [f64],
        d_bias: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let out_channels = d_bias.len();
        let ncols = batch * self.out_hw.0 * self.out_hw.1;
        let d_pre: Vec<f64> = d_out
            .iter()
            .zip(&self.pre)
            .map(|(g, &z)| g * leaky_relu_grad(z))
            .collect();
        for (o, row) in d_pre.chunks(ncols).enumerate() {
            d_bias[o] += row.iter().sum::<f64>();
        }
        let kdim = self.in_channels * 9;
        gemm(out_channels, ncols, kdim, 1.0, &d_pre, false, &self.cols, true, 1.0, d_weight);
        if !want_input {
            return None;
        }
        let mut d_cols = vec![0.0; kdim * ncols];
        gemm(kdim, out_channels, ncols, 1.0, weight, true, &d_pre, false, 0.0, &mut d_cols);
        Some(col2im(
            &d_cols,
            self.in_channels,
            batch,
            self.in_hw.0,
            self.in_hw.1,
            self.stride,
        ))
    }
}
