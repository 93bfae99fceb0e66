//! Raw array kernels shared by the forward and backward passes.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        conv_out_extent(self.height, self.kernel_h, self.stride, self.padding).unwrap_or(0)
    }

    pub fn out_w(&self) -> usize {
        conv_out_extent(self.width, self.kernel_w, self.stride, self.padding).unwrap_or(0)
    }
}

/// `floor((size + 2*padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit in the padded input.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` whose input coordinate
/// `o*stride + k - padding` lands inside `[0, size)`.
#[inline]
fn valid_range(k: usize, size: usize, out: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let top = size + padding;
    let hi = if top <= k {
        0
    } else {
        ((top - k - 1) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Real>(g: &ConvGeometry, x: &[T], k: &[T], out: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (h, w) = (g.height, g.width);
    let pointwise = g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let o = &mut out[(n * g.out_channels + co) * ho * wo..][..ho * wo];
            o.iter_mut().for_each(|v| *v = T::zero());
            for ci in 0..g.in_channels {
                let xp = &x[(n * g.in_channels + ci) * h * w..][..h * w];
                let kp = &k[(co * g.in_channels + ci) * g.kernel_h * g.kernel_w..];
                if pointwise {
                    axpy(o, xp, kp[0]);
                    continue;
                }
                for ky in 0..g.kernel_h {
                    let (oy0, oy1) = valid_range(ky, h, ho, g.stride, g.padding);
                    for kx in 0..g.kernel_w {
                        let wv = kp[ky * g.kernel_w + kx];
                        let (ox0, ox1) = valid_range(kx, w, wo, g.stride, g.padding);
                        if ox0 == ox1 {
                            continue;
                        }
                        let ix0 = ox0 * g.stride + kx - g.padding;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let orow = &mut o[oy * wo + ox0..oy * wo + ox1];
                            let xrow = &xp[iy * w + ix0..(iy + 1) * w];
                            if g.stride == 1 {
                                axpy(orow, xrow, wv);
                            } else {
                                for (o, &v) in orow.iter_mut().zip(xrow.iter().step_by(g.stride)) {
                                    *o = *o + wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out += a * x`, elementwise over the shorter of the two.
#[inline]
fn axpy<T: Real>(out: &mut [T], x: &[T], a: T) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

const LANES: usize = 8;

/// Adds `Σ a[i] b[i]` into `lanes`, element `i` going to lane `i % 8`.
/// A fixed lane split keeps the sum vectorizable and its rounding the
/// same on every run.
#[inline]
fn dot_lanes<T: Real>(lanes: &mut [T; LANES], a: &[T], b: &[T]) {
    let n = a.len().min(b.len());
    let (ca, cb) = (a[..n].chunks_exact(LANES), b[..n].chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    for (i, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        lanes[i] = lanes[i] + x * y;
    }
}

/// Accumulates input and kernel gradients for a convolution.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    k: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (h, w) = (g.height, g.width);
    let khw = g.kernel_h * g.kernel_w;
    let pointwise = g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
    if let Some(dx) = dx {
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                let d = &dout[(n * g.out_channels + co) * ho * wo..][..ho * wo];
                for ci in 0..g.in_channels {
                    let dxp = &mut dx[(n * g.in_channels + ci) * h * w..][..h * w];
                    let kp = &k[(co * g.in_channels + ci) * khw..];
                    if pointwise {
                        axpy(dxp, d, kp[0]);
                        continue;
                    }
                    for ky in 0..g.kernel_h {
                        let (oy0, oy1) = valid_range(ky, h, ho, g.stride, g.padding);
                        for kx in 0..g.kernel_w {
                            let wv = kp[ky * g.kernel_w + kx];
                            let (ox0, ox1) = valid_range(kx, w, wo, g.stride, g.padding);
                            if ox0 == ox1 {
                                continue;
                            }
                            let ix0 = ox0 * g.stride + kx - g.padding;
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.padding;
                                let drow = &d[oy * wo + ox0..oy * wo + ox1];
                                let dxrow = &mut dxp[iy * w + ix0..(iy + 1) * w];
                                if g.stride == 1 {
                                    axpy(dxrow, drow, wv);
                                } else {
                                    for (t, &v) in dxrow.iter_mut().step_by(g.stride).zip(drow) {
                                        *t = *t + wv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dk) = dk {
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                let d = &dout[(n * g.out_channels + co) * ho * wo..][..ho * wo];
                for ci in 0..g.in_channels {
                    let xp = &x[(n * g.in_channels + ci) * h * w..][..h * w];
                    let dkp = &mut dk[(co * g.in_channels + ci) * khw..][..khw];
                    if pointwise {
                        let mut lanes = [T::zero(); LANES];
                        dot_lanes(&mut lanes, xp, d);
                        dkp[0] = dkp[0] + lanes.iter().fold(T::zero(), |a, &b| a + b);
                        continue;
                    }
                    for ky in 0..g.kernel_h {
                        let (oy0, oy1) = valid_range(ky, h, ho, g.stride, g.padding);
                        for kx in 0..g.kernel_w {
                            let (ox0, ox1) = valid_range(kx, w, wo, g.stride, g.padding);
                            let mut lanes = [T::zero(); LANES];
                            if ox0 < ox1 {
                                let ix0 = ox0 * g.stride + kx - g.padding;
                                for oy in oy0..oy1 {
                                    let iy = oy * g.stride + ky - g.padding;
                                    let drow = &d[oy * wo + ox0..oy * wo + ox1];
                                    let xrow = &xp[iy * w + ix0..(iy + 1) * w];
                                    if g.stride == 1 {
                                        dot_lanes(&mut lanes, xrow, drow);
                                    } else {
                                        for (i, (&a, &b)) in xrow.iter().step_by(g.stride).zip(drow).enumerate() {
                                            lanes[i % LANES] = lanes[i % LANES] + a * b;
                                        }
                                    }
                                }
                            }
                            let acc = lanes.iter().fold(T::zero(), |a, &b| a + b);
                            dkp[ky * g.kernel_w + kx] = dkp[ky * g.kernel_w + kx] + acc;
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = a[b] · (b[b] or b[b]ᵀ)` with `a: [B,M,K]`.
pub fn bmm<T: Real>(
    batch: usize,
    m: usize,
    kdim: usize,
    n: usize,
    a: &[T],
    b: &[T],
    trans_b: bool,
    out: &mut [T],
) {
    for bi in 0..batch {
        let ab = &a[bi * m * kdim..][..m * kdim];
        let bb = &b[bi * kdim * n..][..kdim * n];
        let ob = &mut out[bi * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..kdim {
                    let bv = if trans_b { bb[j * kdim + p] } else { bb[p * n + j] };
                    acc = acc + ab[i * kdim + p] * bv;
                }
                ob[i * n + j] = acc;
            }
        }
    }
}

/// Per-channel batch statistics of `[N, C, rest...]` data laid out as
/// `outer x channels x inner`. Returns biased mean and variance.
pub fn channel_moments<T: Real>(x: &[T], outer: usize, channels: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((outer * inner) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for o in 0..outer {
            for &v in &x[(o * channels + c) * inner..][..inner] {
                s = s + v;
            }
        }
        let mu = s / count;
        let mut q = T::zero();
        for o in 0..outer {
            for &v in &x[(o * channels + c) * inner..][..inner] {
                let d = v - mu;
                q = q + d * d;
            }
        }
        mean[c] = mu;
        var[c] = q / count;
    }
    (mean, var)
}
