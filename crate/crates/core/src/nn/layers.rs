//! Dense kernels for the small encoder: strided convolution via im2col,
//! fully connected layers, ReLU and global average pooling. Tensors are flat
//! `f64` slices in channel-major (CHW) order.

/// Geometry of one square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix: one per (input channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }
}

/// Unrolls input patches into a `patch_len × (out_h·out_w)` matrix,
/// zero-filling the padding.
pub fn im2col(input: &[f64], s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let p = oh * ow;
    let mut cols = vec![0.0; s.patch_len() * p];
    let pad = s.padding as isize;
    for c in 0..s.in_channels {
        let plane = &input[c * s.in_h * s.in_w..(c + 1) * s.in_h * s.in_w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (c * s.kernel + ky) * s.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - pad;
                    if iy < 0 || iy >= s.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * s.in_w..(iy as usize + 1) * s.in_w];
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx) as isize - pad;
                        if ix >= 0 && ix < s.in_w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds an im2col-shaped gradient back onto the input layout.
pub fn col2im(cols: &[f64], s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let p = oh * ow;
    let mut out = vec![0.0; s.in_channels * s.in_h * s.in_w];
    let pad = s.padding as isize;
    for c in 0..s.in_channels {
        let plane = &mut out[c * s.in_h * s.in_w..(c + 1) * s.in_h * s.in_w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (c * s.kernel + ky) * s.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - pad;
                    if iy < 0 || iy >= s.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx) as isize - pad;
                        if ix >= 0 && ix < s.in_w as isize {
                            plane[iy as usize * s.in_w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out[o, p] = bias[o] + Σ_k weight[o, k] · cols[k, p]`.
pub fn conv_forward(cols: &[f64], weight: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
    let p = s.out_h() * s.out_w();
    let k = s.patch_len();
    let mut out = vec![0.0; s.out_channels * p];
    for o in 0..s.out_channels {
        let dst = &mut out[o * p..(o + 1) * p];
        dst.fill(bias[o]);
        let w = &weight[o * k..(o + 1) * k];
        for (r, &wk) in w.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let src = &cols[r * p..(r + 1) * p];
            for (d, &x) in dst.iter_mut().zip(src) {
                *d += wk * x;
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the im2col-shaped
/// input gradient (skipped when `need_input` is false).
pub fn conv_backward(
    cols: &[f64],
    weight: &[f64],
    dout: &[f64],
    s: &ConvShape,
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let p = s.out_h() * s.out_w();
    let k = s.patch_len();
    for o in 0..s.out_channels {
        let g = &dout[o * p..(o + 1) * p];
        dbias[o] += g.iter().sum::<f64>();
        let dw = &mut dweight[o * k..(o + 1) * k];
        for (r, d) in dw.iter_mut().enumerate() {
            let src = &cols[r * p..(r + 1) * p];
            *d += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if !need_input {
        return None;
    }
    let mut dcols = vec![0.0; k * p];
    for o in 0..s.out_channels {
        let g = &dout[o * p..(o + 1) * p];
        let w = &weight[o * k..(o + 1) * k];
        for (r, &wk) in w.iter().enumerate() {
            let dst = &mut dcols[r * p..(r + 1) * p];
            for (d, &x) in dst.iter_mut().zip(g) {
                *d += wk * x;
            }
        }
    }
    Some(dcols)
}

/// `y = W x + b` with `W` stored row-major as `out × in`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + weight[o * n..(o + 1) * n].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Accumulates parameter gradients and returns `∂L/∂x`.
pub fn linear_backward(x: &[f64], weight: &[f64], dy: &[f64], dweight: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    for (o, &g) in dy.iter().enumerate() {
        dbias[o] += g;
        if g == 0.0 {
            continue;
        }
        let w = &weight[o * n..(o + 1) * n];
        let dw = &mut dweight[o * n..(o + 1) * n];
        for i in 0..n {
            dw[i] += g * x[i];
            dx[i] += g * w[i];
        }
    }
    dx
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries whose activation was clipped.
pub fn relu_backward_in_place(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn global_avg_pool(x: &[f64], channels: usize) -> Vec<f64> {
    let p = x.len() / channels;
    x.chunks_exact(p).map(|c| c.iter().sum::<f64>() / p as f64).collect()
}

pub fn global_avg_pool_backward(dpooled: &[f64], spatial: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dpooled.len() * spatial);
    for &g in dpooled {
        out.extend(std::iter::repeat_n(g / spatial as f64, spatial));
    }
    out
}
