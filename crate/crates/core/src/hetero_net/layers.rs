//! Convolution and friends with hand-written backward passes.
//!
//! Feature maps are `(C, H, W)` arrays in standard layout.

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

/// `C[m x n] = A[m x k] * B[k x n] + beta * C`, with arbitrary strides on A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_channels, in_channels * kernel * kernel]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// What the backward pass needs from a convolution's forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights, zero bias.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride);
        let fan_in = (in_channels * kernel * kernel) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut conv.weight {
            *w = normal.sample(rng);
        }
        conv
    }

    /// Small uniform weights for output layers.
    pub fn init_small(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        scale: f32,
        rng: &mut Rng,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, 1);
        for w in &mut conv.weight {
            *w = rng.random_range(-scale..=scale);
        }
        conv
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f32>) -> (Vec<f32>, (usize, usize)) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let src = x.as_slice().expect("standard layout");
        let plen = oh * ow;
        let mut cols = vec![0.0f32; c * k * k * plen];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let dst = &mut cols[row * plen..(row + 1) * plen];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[oi * ow + oj] = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    fn col2im(
        &self,
        cols: &[f32],
        in_dim: (usize, usize, usize),
        out_hw: (usize, usize),
    ) -> Array3<f32> {
        let (c, h, w) = in_dim;
        let (oh, ow) = out_hw;
        let k = self.kernel;
        let plen = oh * ow;
        let mut dx = Array3::<f32>::zeros((c, h, w));
        let dst = dx.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let src = &cols[row * plen..(row + 1) * plen];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = ch * h * w + ii as usize * w;
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[base + jj as usize] += src[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, ConvCache) {
        assert_eq!(x.dim().0, self.in_channels, "conv input channels");
        let (cols, (oh, ow)) = self.im2col(x);
        let plen = oh * ow;
        let mut out = vec![0.0f32; self.out_channels * plen];
        for (o, chunk) in out.chunks_mut(plen).enumerate() {
            chunk.fill(self.bias[o]);
        }
        let kk = self.patch_len();
        gemm(
            self.out_channels,
            kk,
            plen,
            &self.weight,
            (kk, 1),
            &cols,
            (plen, 1),
            1.0,
            &mut out,
        );
        let out = Array3::from_shape_vec((self.out_channels, oh, ow), out).expect("shape");
        let cache = ConvCache {
            cols,
            in_dim: x.dim(),
            out_hw: (oh, ow),
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dout: &Array3<f32>,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Array3<f32>> {
        let (oh, ow) = cache.out_hw;
        let plen = oh * ow;
        let kk = self.patch_len();
        let dy = dout.as_slice().expect("standard layout");
        debug_assert_eq!(dy.len(), self.out_channels * plen);
        for (o, chunk) in dy.chunks(plen).enumerate() {
            grad.bias[o] += chunk.iter().sum::<f32>();
        }
        // dW += dY * cols^T
        gemm(
            self.out_channels,
            plen,
            kk,
            dy,
            (plen, 1),
            &cache.cols,
            (1, plen),
            1.0,
            &mut grad.weight,
        );
        if !need_input_grad {
            return None;
        }
        // dcols = W^T * dY
        let mut dcols = vec![0.0f32; kk * plen];
        gemm(
            kk,
            self.out_channels,
            plen,
            &self.weight,
            (1, kk),
            dy,
            (plen, 1),
            0.0,
            &mut dcols,
        );
        Some(self.col2im(&dcols, cache.in_dim, cache.out_hw))
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the post-activation value was not positive.
pub fn relu_backward_inplace(grad: &mut Array3<f32>, activated: &Array3<f32>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

pub fn upsample2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, i, j)| x[[ch, i / 2, j / 2]])
}

pub fn upsample2_backward(grad: &Array3<f32>) -> Array3<f32> {
    let (c, h2, w2) = grad.dim();
    let mut out = Array3::<f32>::zeros((c, h2 / 2, w2 / 2));
    for ((ch, i, j), g) in grad.indexed_iter() {
        out[[ch, i / 2, j / 2]] += g;
    }
    out
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn naive_conv(conv: &Conv2d, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let (oh, ow) = conv.out_hw(h, w);
        let k = conv.kernel;
        Array3::from_shape_fn((conv.out_channels, oh, ow), |(o, oi, oj)| {
            let mut acc = conv.bias[o];
            for ch in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let ii = (oi * conv.stride + ki) as isize - conv.padding as isize;
                        let jj = (oj * conv.stride + kj) as isize - conv.padding as isize;
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            acc += conv.weight[((o * c + ch) * k + ki) * k + kj]
                                * x[[ch, ii as usize, jj as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_map(rng: &mut Rng, dim: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(dim, |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let mut rng = stream(1, Stream::Init);
        for &(stride, kernel) in &[(1, 3), (2, 3), (1, 1)] {
            let mut conv = Conv2d::init(3, 4, kernel, stride, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_map(&mut rng, (3, 8, 6));
            let (y, _) = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(y.dim(), want.dim());
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = stream(2, Stream::Init);
        let conv = Conv2d::init(2, 3, 3, 2, &mut rng);
        let x = random_map(&mut rng, (2, 6, 6));
        let (y, cache) = conv.forward(&x);
        let upstream = random_map(&mut rng, y.dim());
        let objective = |c: &Conv2d, x: &Array3<f32>| -> f64 {
            let (y, _) = c.forward(x);
            y.iter()
                .zip(upstream.iter())
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum()
        };
        let mut grad = Conv2d::zeros(2, 3, 3, 2);
        let dx = conv.backward(&cache, &upstream, &mut grad, true).unwrap();
        let eps = 1e-2f32;
        for idx in [0usize, 5, 17, 40, 53] {
            let mut plus = conv.clone();
            plus.weight[idx] += eps;
            let mut minus = conv.clone();
            minus.weight[idx] -= eps;
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * f64::from(eps));
            assert!((fd - f64::from(grad.weight[idx])).abs() < 1e-3, "w[{idx}]");
        }
        for (idx, _) in x.indexed_iter().step_by(7) {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * f64::from(eps));
            assert!((fd - f64::from(dx[idx])).abs() < 1e-3, "x{idx:?}");
        }
        let bias_fd: f32 = upstream.slice(ndarray::s![1, .., ..]).sum();
        assert!((grad.bias[1] - bias_fd).abs() < 1e-4);
    }

    #[test]
    fn upsample_roundtrip_sums_blocks() {
        let x = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i * 2 + j) as f32);
        let up = upsample2(&x);
        assert_eq!(up[[0, 3, 3]], 3.0);
        assert_eq!(upsample2_backward(&up), x.mapv(|v| 4.0 * v));
    }
}
