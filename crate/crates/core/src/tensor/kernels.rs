use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Geometry of a `k×k` convolution over an `[H, W, Cin]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (h, w, cin) = match *input.shape() {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::dim("conv2d", format!("input must be [H, W, Cin], got {s:?}"))),
        };
        let (k, kcin, cout) = match *kernel.shape() {
            [k0, k1, ci, co] if k0 == k1 => (k0, ci, co),
            ref s => return Err(Error::dim("conv2d", format!("kernel must be [k, k, Cin, Cout], got {s:?}"))),
        };
        if kcin != cin {
            return Err(Error::dim("conv2d", format!("input channels {cin} vs kernel Cin {kcin}")));
        }
        if k % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {k}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }
}

/// Direct 2-D cross-correlation with zero padding.
///
/// Each output element accumulates its terms in `(ky, kx, ci)` order starting
/// from zero.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    let out = conv2d_forward(input.data(), kernel.data(), &g);
    Tensor::new([g.oh, g.ow, g.cout], out)
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let mut out = vec![T::zero(); g.oh * g.ow * cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * cout..][..cout];
            for ky in 0..k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * cin..][..cin];
                    let wk = &wt[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        let wrow = &wk[ci * cout..][..cout];
                        for (acc, &wv) in o.iter_mut().zip(wrow) {
                            *acc += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input<T: Scalar>(grad_out: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let mut gx = vec![T::zero(); g.h * g.w * cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &grad_out[(oy * g.ow + ox) * cout..][..cout];
            for ky in 0..k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let gxi = &mut gx[(iy * g.w + ix) * cin..][..cin];
                    let wk = &wt[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, acc) in gxi.iter_mut().enumerate() {
                        let wrow = &wk[ci * cout..][..cout];
                        let mut s = T::zero();
                        for (&wv, &gv) in wrow.iter().zip(go) {
                            s += wv * gv;
                        }
                        *acc += s;
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn conv2d_backward_kernel<T: Scalar>(grad_out: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let mut gw = vec![T::zero(); k * k * cin * cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &grad_out[(oy * g.ow + ox) * cout..][..cout];
            for ky in 0..k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * cin..][..cin];
                    let gwk = &mut gw[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        let row = &mut gwk[ci * cout..][..cout];
                        for (acc, &gv) in row.iter_mut().zip(go) {
                            *acc += xv * gv;
                        }
                    }
                }
            }
        }
    }
    gw
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    #[default]
    Eval,
}

/// Saved state of a batch-norm forward pass.
pub(crate) struct BnForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Per-channel normalization over the spatial positions of an `[H, W, C]`
/// map. With `stats = None` the biased batch statistics are used.
pub(crate) fn bn_forward<T: Scalar>(
    x: &[T],
    c: usize,
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> BnForward<T> {
    let n = x.len() / c;
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mut mean = vec![T::zero(); c];
            for px in x.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(px) {
                    *m += v;
                }
            }
            let inv_n = T::one() / T::of(n as f64);
            mean.iter_mut().for_each(|m| *m *= inv_n);
            let mut var = vec![T::zero(); c];
            for px in x.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_n);
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ((px, xh), o) in x.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
        for ch in 0..c {
            let v = (px[ch] - mean[ch]) * inv_std[ch];
            xh[ch] = v;
            o[ch] = gamma[ch] * v + beta[ch];
        }
    }
    BnForward {
        out,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    }
}

/// Returns `(d input, d gamma, d beta)`.
pub(crate) fn bn_backward<T: Scalar>(
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    c: usize,
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = grad_out.len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g, xh) in grad_out.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += g[ch] * xh[ch];
            dbeta[ch] += g[ch];
        }
    }
    let mut dx = vec![T::zero(); grad_out.len()];
    if train {
        let nf = T::of(n as f64);
        for ((d, g), xh) in dx.chunks_exact_mut(c).zip(grad_out.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
            for ch in 0..c {
                let scale = gamma[ch] * inv_std[ch] / nf;
                d[ch] = scale * (nf * g[ch] - dbeta[ch] - xh[ch] * dgamma[ch]);
            }
        }
    } else {
        for (d, g) in dx.chunks_exact_mut(c).zip(grad_out.chunks_exact(c)) {
            for ch in 0..c {
                d[ch] = g[ch] * gamma[ch] * inv_std[ch];
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization over the last axis of `input`.
///
/// In [`BnMode::Train`] the running statistics are blended with the batch
/// statistics: `running = (1 - momentum) * running + momentum * batch`, using
/// the unbiased batch variance.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    eps: T,
    momentum: T,
    mode: BnMode,
) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Parameter(format!("batch_norm eps must be positive, got {eps}")));
    }
    let c = *input
        .shape()
        .last()
        .ok_or_else(|| Error::dim("batch_norm", "input has no channel axis"))?;
    for (name, t) in [
        ("gamma", &*gamma),
        ("beta", &*beta),
        ("running_mean", &*running_mean),
        ("running_var", &*running_var),
    ] {
        if t.numel() != c {
            return Err(Error::dim("batch_norm", format!("{name} has {} values for {c} channels", t.numel())));
        }
    }
    let fwd = match mode {
        BnMode::Eval => bn_forward(
            input.data(),
            c,
            gamma.data(),
            beta.data(),
            Some((running_mean.data(), running_var.data())),
            eps,
        ),
        BnMode::Train => {
            let fwd = bn_forward(input.data(), c, gamma.data(), beta.data(), None, eps);
            update_running_stats(
                running_mean.data_mut(),
                running_var.data_mut(),
                &fwd.batch_mean,
                &fwd.batch_var,
                input.numel() / c,
                momentum,
            );
            fwd
        }
    };
    Tensor::new(input.shape().to_vec(), fwd.out)
}

pub(crate) fn update_running_stats<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    batch_mean: &[T],
    batch_var: &[T],
    n: usize,
    momentum: T,
) {
    let unbias = if n > 1 { T::of(n as f64 / (n - 1) as f64) } else { T::one() };
    let keep = T::one() - momentum;
    for (r, &m) in running_mean.iter_mut().zip(batch_mean) {
        *r = keep * *r + momentum * m;
    }
    for (r, &v) in running_var.iter_mut().zip(batch_var) {
        *r = keep * *r + momentum * v * unbias;
    }
}

/// Source taps `(i0, i1, w1)` for one axis of half-pixel-centred bilinear
/// upsampling: `out[o] = (1 - w1) * in[i0] + w1 * in[i1]`.
fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of an `[H, W, C]` map by an integer factor, with
/// align-corners-false sampling and edge clamping.
pub fn upsample_bilinear<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::Parameter("upsample factor must be >= 1".into()));
    }
    let (h, w, c) = match *input.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::dim("upsample_bilinear", format!("expected [H, W, C], got {s:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(Error::dim("upsample_bilinear", "empty spatial extent"));
    }
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let x = input.data();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); oh * ow * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        let (wy1, wy0) = (T::of(wy), T::of(1.0 - wy));
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let (wx1, wx0) = (T::of(wx), T::of(1.0 - wx));
            let o = &mut out[(oy * ow + ox) * c..][..c];
            let p00 = &x[(y0 * w + x0) * c..][..c];
            let p01 = &x[(y0 * w + x1) * c..][..c];
            let p10 = &x[(y1 * w + x0) * c..][..c];
            let p11 = &x[(y1 * w + x1) * c..][..c];
            for ch in 0..c {
                o[ch] = wy0 * (wx0 * p00[ch] + wx1 * p01[ch]) + wy1 * (wx0 * p10[ch] + wx1 * p11[ch]);
            }
        }
    }
    Tensor::new([oh, ow, c], out)
}

pub(crate) fn upsample_backward<T: Scalar>(grad_out: &[T], h: usize, w: usize, c: usize, factor: usize) -> Vec<T> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let ow = w * factor;
    let mut gx = vec![T::zero(); h * w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        let (wy1, wy0) = (T::of(wy), T::of(1.0 - wy));
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let (wx1, wx0) = (T::of(wx), T::of(1.0 - wx));
            let g = &grad_out[(oy * ow + ox) * c..][..c];
            for (idx, wgt) in [
                (y0 * w + x0, wy0 * wx0),
                (y0 * w + x1, wy0 * wx1),
                (y1 * w + x0, wy1 * wx0),
                (y1 * w + x1, wy1 * wx1),
            ] {
                let dst = &mut gx[idx * c..][..c];
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d += wgt * gv;
                }
            }
        }
    }
    gx
}

/// Signed 4-neighbour Laplacian of a single-channel map with replicated
/// borders: neighbour indices are clamped into `[0, H-1] × [0, W-1]`.
pub fn laplacian<T: Scalar>(field: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = field.hw()?;
    Tensor::new([h, w], laplacian_forward(field.data(), h, w))
}

#[inline]
fn neighbours(y: usize, x: usize, h: usize, w: usize) -> [usize; 4] {
    [
        (y + 1).min(h - 1) * w + x,
        y.saturating_sub(1) * w + x,
        y * w + (x + 1).min(w - 1),
        y * w + x.saturating_sub(1),
    ]
}

pub(crate) fn laplacian_forward<T: Scalar>(f: &[T], h: usize, w: usize) -> Vec<T> {
    let four = T::of(4.0);
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let [a, b, c, d] = neighbours(y, x, h, w);
            out[y * w + x] = f[a] + f[b] + f[c] + f[d] - four * f[y * w + x];
        }
    }
    out
}

pub(crate) fn laplacian_backward<T: Scalar>(g: &[T], h: usize, w: usize) -> Vec<T> {
    let four = T::of(4.0);
    let mut gf = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for n in neighbours(y, x, h, w) {
                gf[n] += gv;
            }
            gf[y * w + x] -= four * gv;
        }
    }
    gf
}
