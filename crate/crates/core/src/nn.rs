//! Layer kernels with explicit backward passes.
//!
//! Convolutions lower to a single GEMM through an im2col buffer. The buffer is
//! kept by the caller so the backward pass can form the weight gradient without
//! re-gathering the input.

use crate::tensor::Tensor;

/// Geometry of a 2-D convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Output spatial size for an `h × w` input.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Length of one output filter (`in_channels · kernel²`).
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    /// Weight shape as `[out, in, k, k]`.
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Saved state of one convolution call.
#[derive(Clone, Debug)]
pub struct ConvCache {
    /// im2col buffer `[fan_in, oh*ow]`; empty for pointwise convolutions, where
    /// the input itself is the column matrix.
    cols: Vec<f64>,
    input: Option<Tensor>,
    in_dims: (usize, usize),
}

fn im2col(spec: &ConvSpec, input: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let k = spec.kernel;
    let (h, w) = (input.height as isize, input.width as isize);
    let n = oh * ow;
    let mut cols = vec![0.0; spec.fan_in() * n];
    for c in 0..spec.in_channels {
        let plane = input.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(spec: &ConvSpec, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let k = spec.kernel;
    let n = oh * ow;
    let mut out = Tensor::zeros(spec.in_channels, h, w);
    for c in 0..spec.in_channels {
        let plane = out.plane_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c[m×n] = beta·c + a[m×k] · b[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every caller passes buffers sized for the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Convolution forward pass. `weight` is `[out, in, k, k]` row-major.
pub fn conv_forward(spec: &ConvSpec, weight: &[f64], bias: &[f64], input: &Tensor) -> (Tensor, ConvCache) {
    assert_eq!(input.channels, spec.in_channels, "conv input channels");
    assert_eq!(weight.len(), spec.weight_len());
    assert_eq!(bias.len(), spec.out_channels);
    let (oh, ow) = spec.out_dims(input.height, input.width);
    let n = oh * ow;
    let mut out = Tensor::zeros(spec.out_channels, oh, ow);
    for (o, &b) in bias.iter().enumerate() {
        out.plane_mut(o).fill(b);
    }
    let kk = spec.fan_in();
    let cache = if spec.is_pointwise() {
        gemm(
            spec.out_channels,
            kk,
            n,
            weight,
            (kk as isize, 1),
            &input.data,
            (n as isize, 1),
            1.0,
            &mut out.data,
        );
        ConvCache {
            cols: Vec::new(),
            input: Some(input.clone()),
            in_dims: (input.height, input.width),
        }
    } else {
        let cols = im2col(spec, input, oh, ow);
        gemm(
            spec.out_channels,
            kk,
            n,
            weight,
            (kk as isize, 1),
            &cols,
            (n as isize, 1),
            1.0,
            &mut out.data,
        );
        ConvCache {
            cols,
            input: None,
            in_dims: (input.height, input.width),
        }
    };
    (out, cache)
}

/// Convolution backward pass. Accumulates into `grad_w` / `grad_b` and
/// returns the input gradient when `need_input` is set.
pub fn conv_backward(
    spec: &ConvSpec,
    weight: &[f64],
    cache: &ConvCache,
    grad_out: &Tensor,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input: bool,
) -> Option<Tensor> {
    let kk = spec.fan_in();
    let n = grad_out.plane_len();
    let cols: &[f64] = match &cache.input {
        Some(t) => &t.data,
        None => &cache.cols,
    };
    for (o, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out.plane(o).iter().sum::<f64>();
    }
    // dW[out×kk] += dY[out×n] · colsᵀ[n×kk]
    gemm(
        spec.out_channels,
        n,
        kk,
        &grad_out.data,
        (n as isize, 1),
        cols,
        (1, n as isize),
        1.0,
        grad_w,
    );
    if !need_input {
        return None;
    }
    // dcols[kk×n] = Wᵀ[kk×out] · dY[out×n]
    let mut dcols = vec![0.0; kk * n];
    gemm(
        kk,
        spec.out_channels,
        n,
        weight,
        (1, kk as isize),
        &grad_out.data,
        (n as isize, 1),
        0.0,
        &mut dcols,
    );
    let (h, w) = cache.in_dims;
    if spec.is_pointwise() {
        Some(Tensor {
            channels: spec.in_channels,
            height: h,
            width: w,
            data: dcols,
        })
    } else {
        Some(col2im(spec, &dcols, h, w, grad_out.height, grad_out.width))
    }
}

/// In-place leaky rectifier (`slope = 0` gives a plain ReLU).
pub fn leaky_relu_inplace(t: &mut Tensor, slope: f64) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu_inplace`] given the activation's output.
pub fn leaky_relu_backward(grad: &mut Tensor, output: &Tensor, slope: f64) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y <= 0.0 {
            *g *= slope;
        }
    }
}

/// Nearest-neighbour upsampling to an explicit output size.
pub fn upsample_nearest(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let mut out = Tensor::zeros(input.channels, out_h, out_w);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..out_h {
            let sy = (y * input.height / out_h).min(input.height - 1);
            for x in 0..out_w {
                let sx = (x * input.width / out_w).min(input.width - 1);
                dst[y * out_w + x] = src[sy * input.width + sx];
            }
        }
    }
    out
}

/// Transpose of [`upsample_nearest`].
pub fn upsample_nearest_backward(grad: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let mut out = Tensor::zeros(grad.channels, in_h, in_w);
    for c in 0..grad.channels {
        let src = grad.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..grad.height {
            let sy = (y * in_h / grad.height).min(in_h - 1);
            for x in 0..grad.width {
                let sx = (x * in_w / grad.width).min(in_w - 1);
                dst[sy * in_w + sx] += src[y * grad.width + x];
            }
        }
    }
    out
}

/// Per-pixel softmax across channels.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let n = logits.plane_len();
    let c = logits.channels;
    let mut out = Tensor::zeros(c, logits.height, logits.width);
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(logits.data[ch * n + i]);
        }
        let mut s = 0.0;
        for ch in 0..c {
            let e = (logits.data[ch * n + i] - m).exp();
            out.data[ch * n + i] = e;
            s += e;
        }
        for ch in 0..c {
            out.data[ch * n + i] /= s;
        }
    }
    out
}

/// Maps `dL/dp` to `dL/dlogits` through a per-pixel softmax with output `p`.
pub fn softmax_backward(p: &Tensor, grad_p: &Tensor) -> Tensor {
    let n = p.plane_len();
    let c = p.channels;
    let mut out = Tensor::zeros(c, p.height, p.width);
    for i in 0..n {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += p.data[ch * n + i] * grad_p.data[ch * n + i];
        }
        for ch in 0..c {
            out.data[ch * n + i] = p.data[ch * n + i] * (grad_p.data[ch * n + i] - dot);
        }
    }
    out
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(spec: &ConvSpec, w: &[f64], b: &[f64], x: &Tensor) -> Tensor {
        let (oh, ow) = spec.out_dims(x.height, x.width);
        Tensor::from_fn(spec.out_channels, oh, ow, |o, oy, ox| {
            let mut s = b[o];
            for c in 0..spec.in_channels {
                for ky in 0..spec.kernel {
                    for kx in 0..spec.kernel {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                            let wi = ((o * spec.in_channels + c) * spec.kernel + ky) * spec.kernel + kx;
                            s += w[wi] * x.at(c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            s
        })
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for spec in [
            ConvSpec::new(3, 4, 3, 1, 1),
            ConvSpec::new(2, 5, 3, 2, 1),
            ConvSpec::new(4, 3, 1, 1, 0),
            ConvSpec::new(2, 2, 4, 2, 1),
        ] {
            let x = Tensor::from_vec(spec.in_channels, 7, 9, pseudo(spec.in_channels * 63, 1)).unwrap();
            let w = pseudo(spec.weight_len(), 2);
            let b = pseudo(spec.out_channels, 3);
            let (y, _) = conv_forward(&spec, &w, &b, &x);
            let yr = naive_conv(&spec, &w, &b, &x);
            assert_eq!(y.shape(), yr.shape());
            for (a, r) in y.data.iter().zip(&yr.data) {
                assert!((a - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w, so the adjoint identities hold exactly up to rounding.
        let spec = ConvSpec::new(2, 3, 3, 2, 1);
        let x = Tensor::from_vec(2, 6, 5, pseudo(60, 4)).unwrap();
        let w = pseudo(spec.weight_len(), 5);
        let zb = vec![0.0; 3];
        let (y, cache) = conv_forward(&spec, &w, &zb, &x);
        let g = Tensor::from_vec(y.channels, y.height, y.width, pseudo(y.data.len(), 6)).unwrap();
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv_backward(&spec, &w, &cache, &g, &mut gw, &mut gb, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_vec(2, 3, 5, pseudo(30, 7)).unwrap();
        let y = upsample_nearest(&x, 6, 9);
        let g = Tensor::from_vec(2, 6, 9, pseudo(108, 8)).unwrap();
        let gx = upsample_nearest_backward(&g, 3, 5);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(4, 2, 3, pseudo(24, 9).iter().map(|v| v * 30.0).collect()).unwrap();
        let p = softmax_channels(&x);
        for i in 0..6 {
            let s: f64 = (0..4).map(|c| p.data[c * 6 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
