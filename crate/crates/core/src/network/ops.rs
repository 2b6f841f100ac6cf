//! Layer primitives with explicit forward and backward passes.
//!
//! All feature maps are channel-major ([`Feat`]). Weight layouts:
//! 3x3 conv `[co][ci][3][3]`, 2x2 transposed conv `[ci][co][2][2]`,
//! 1x1 conv `[co][ci]`, linear `[out][in]`.

use super::tensor::{gemm, Feat, Scalar, Strides};
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per GEMM chunk.
const COL_BUDGET: usize = 1 << 22;

fn rows_per_chunk(ci: usize, w: usize) -> usize {
    (COL_BUDGET / (ci * 9 * w).max(1)).max(1)
}

/// Fills `col[(ci*9 + ky*3 + kx)][(r - r0)*w + x]` for rows `r0..r1` of the
/// stacked (image, y) row index, zero outside each image.
fn im2col<T: Scalar>(x: &Feat<T>, r0: usize, r1: usize, col: &mut [T]) {
    let (h, w) = (x.h, x.w);
    let cols = (r1 - r0) * w;
    let plane = x.plane();
    for ci in 0..x.c {
        let src = &x.data[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * cols..][..cols];
                for r in r0..r1 {
                    let (img, y) = (r / h, r % h);
                    let dst = &mut row[(r - r0) * w..(r - r0 + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[(img * h + sy as usize) * w..][..w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im<T: Scalar>(col: &[T], r0: usize, r1: usize, dx: &mut Feat<T>) {
    let (h, w) = (dx.h, dx.w);
    let cols = (r1 - r0) * w;
    let plane = dx.plane();
    for ci in 0..dx.c {
        let dst = &mut dx.data[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * cols..][..cols];
                for r in r0..r1 {
                    let (img, y) = (r / h, r % h);
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[(r - r0) * w..(r - r0 + 1) * w];
                    let drow = &mut dst[(img * h + sy as usize) * w..][..w];
                    match kx {
                        0 => {
                            for i in 1..w {
                                drow[i - 1] = drow[i - 1] + src[i];
                            }
                        }
                        1 => {
                            for i in 0..w {
                                drow[i] = drow[i] + src[i];
                            }
                        }
                        _ => {
                            for i in 0..w - 1 {
                                drow[i + 1] = drow[i + 1] + src[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
pub fn conv3x3_forward<T: Scalar>(x: &Feat<T>, weight: &[T], bias: &[T], co: usize) -> Feat<T> {
    let k = x.c * 9;
    assert_eq!(weight.len(), co * k);
    let mut out = Feat::zeros(co, x.n, x.h, x.w);
    let plane = out.plane();
    let rows = x.n * x.h;
    let step = rows_per_chunk(x.c, x.w);
    let mut col = vec![T::zero(); k * step.min(rows) * x.w];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + step).min(rows);
        let cols = (r1 - r0) * x.w;
        im2col(x, r0, r1, &mut col[..k * cols]);
        gemm(
            co,
            k,
            cols,
            T::one(),
            weight,
            Strides::rm(k),
            &col[..k * cols],
            Strides::rm(cols),
            T::zero(),
            &mut out.data[r0 * x.w..],
            Strides::rm(plane),
        );
        r0 = r1;
    }
    add_bias(&mut out, bias);
    out
}

/// Gradients of [`conv3x3_forward`] w.r.t. input, weight and bias.
pub fn conv3x3_backward<T: Scalar>(
    x: &Feat<T>,
    weight: &[T],
    dy: &Feat<T>,
    need_dx: bool,
) -> (Option<Feat<T>>, Vec<T>, Vec<T>) {
    let co = dy.c;
    let k = x.c * 9;
    let plane = dy.plane();
    let rows = x.n * x.h;
    let step = rows_per_chunk(x.c, x.w);
    let mut col = vec![T::zero(); k * step.min(rows) * x.w];
    let mut dcol = if need_dx {
        vec![T::zero(); k * step.min(rows) * x.w]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); co * k];
    let mut dx = need_dx.then(|| Feat::zeros(x.c, x.n, x.h, x.w));
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + step).min(rows);
        let cols = (r1 - r0) * x.w;
        im2col(x, r0, r1, &mut col[..k * cols]);
        let dys = &dy.data[r0 * x.w..];
        // dW += dY * col^T
        gemm(
            co,
            cols,
            k,
            T::one(),
            dys,
            Strides::rm(plane),
            &col[..k * cols],
            Strides::tr(cols),
            T::one(),
            &mut dw,
            Strides::rm(k),
        );
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T * dY
            gemm(
                k,
                co,
                cols,
                T::one(),
                weight,
                Strides::tr(k),
                dys,
                Strides::rm(plane),
                T::zero(),
                &mut dcol[..k * cols],
                Strides::rm(cols),
            );
            col2im(&dcol[..k * cols], r0, r1, dx);
        }
        r0 = r1;
    }
    (dx, dw, bias_grad(dy))
}

fn add_bias<T: Scalar>(out: &mut Feat<T>, bias: &[T]) {
    let plane = out.plane();
    for (c, &b) in bias.iter().enumerate() {
        out.data[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Scalar>(dy: &Feat<T>) -> Vec<T> {
    (0..dy.c).map(|c| sum(dy.channel(c))).collect()
}

fn sum<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b)
}

/// 1x1 convolution.
pub fn conv1x1_forward<T: Scalar>(x: &Feat<T>, weight: &[T], bias: &[T], co: usize) -> Feat<T> {
    let plane = x.plane();
    let mut out = Feat::zeros(co, x.n, x.h, x.w);
    gemm(
        co,
        x.c,
        plane,
        T::one(),
        weight,
        Strides::rm(x.c),
        &x.data,
        Strides::rm(plane),
        T::zero(),
        &mut out.data,
        Strides::rm(plane),
    );
    add_bias(&mut out, bias);
    out
}

pub fn conv1x1_backward<T: Scalar>(
    x: &Feat<T>,
    weight: &[T],
    dy: &Feat<T>,
) -> (Feat<T>, Vec<T>, Vec<T>) {
    let plane = x.plane();
    let co = dy.c;
    let mut dw = vec![T::zero(); co * x.c];
    gemm(
        co,
        plane,
        x.c,
        T::one(),
        &dy.data,
        Strides::rm(plane),
        &x.data,
        Strides::tr(plane),
        T::zero(),
        &mut dw,
        Strides::rm(x.c),
    );
    let mut dx = Feat::zeros(x.c, x.n, x.h, x.w);
    gemm(
        x.c,
        co,
        plane,
        T::one(),
        weight,
        Strides::tr(x.c),
        &dy.data,
        Strides::rm(plane),
        T::zero(),
        &mut dx.data,
        Strides::rm(plane),
    );
    (dx, dw, bias_grad(dy))
}

/// 2x2 transposed convolution with stride 2 (doubles the spatial size).
pub fn upconv2x2_forward<T: Scalar>(x: &Feat<T>, weight: &[T], bias: &[T], co: usize) -> Feat<T> {
    let m = x.plane();
    let k4 = co * 4;
    assert_eq!(weight.len(), x.c * k4);
    let mut tmp = vec![T::zero(); k4 * m];
    // tmp[co*4 + d][m] = sum_ci W[ci][co*4 + d] x[ci][m]
    gemm(
        k4,
        x.c,
        m,
        T::one(),
        weight,
        Strides::tr(k4),
        &x.data,
        Strides::rm(m),
        T::zero(),
        &mut tmp,
        Strides::rm(m),
    );
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Feat::zeros(co, x.n, h2, w2);
    let oplane = out.plane();
    for o in 0..co {
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let src = &tmp[(o * 4 + d) * m..][..m];
            let dst = &mut out.data[o * oplane..(o + 1) * oplane];
            for img in 0..x.n {
                for y in 0..x.h {
                    let srow = &src[(img * x.h + y) * x.w..][..x.w];
                    let drow = &mut dst[(img * h2 + 2 * y + dy) * w2..][..w2];
                    for (xx, &v) in srow.iter().enumerate() {
                        drow[2 * xx + dx] = v;
                    }
                }
            }
        }
    }
    add_bias(&mut out, bias);
    out
}

pub fn upconv2x2_backward<T: Scalar>(
    x: &Feat<T>,
    weight: &[T],
    dy: &Feat<T>,
) -> (Feat<T>, Vec<T>, Vec<T>) {
    let m = x.plane();
    let co = dy.c;
    let k4 = co * 4;
    let (h2, w2) = (dy.h, dy.w);
    let oplane = dy.plane();
    let mut dtmp = vec![T::zero(); k4 * m];
    for o in 0..co {
        for d in 0..4 {
            let (oy, ox) = (d / 2, d % 2);
            let src = &dy.data[o * oplane..(o + 1) * oplane];
            let dst = &mut dtmp[(o * 4 + d) * m..][..m];
            for img in 0..x.n {
                for y in 0..x.h {
                    let srow = &src[(img * h2 + 2 * y + oy) * w2..][..w2];
                    let drow = &mut dst[(img * x.h + y) * x.w..][..x.w];
                    for (xx, v) in drow.iter_mut().enumerate() {
                        *v = srow[2 * xx + ox];
                    }
                }
            }
        }
    }
    let mut dw = vec![T::zero(); x.c * k4];
    gemm(
        x.c,
        m,
        k4,
        T::one(),
        &x.data,
        Strides::rm(m),
        &dtmp,
        Strides::tr(m),
        T::zero(),
        &mut dw,
        Strides::rm(k4),
    );
    let mut dx = Feat::zeros(x.c, x.n, x.h, x.w);
    gemm(
        x.c,
        k4,
        m,
        T::one(),
        weight,
        Strides::rm(k4),
        &dtmp,
        Strides::rm(m),
        T::zero(),
        &mut dx.data,
        Strides::rm(m),
    );
    (dx, dw, bias_grad(dy))
}

pub const BN_EPS: f64 = 1e-5;

/// Saved state of a batch-norm forward needed for its backward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Feat<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased variance (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub train: bool,
}

#[inline]
fn f64_of<T: Scalar>(v: T) -> f64 {
    Scalar::to_f64(v)
}

/// Batch norm over (n, h, w) per channel. `stats = None` uses batch
/// statistics; `Some((mean, var))` uses the given running statistics.
/// Reductions accumulate in f64 whatever the storage type.
pub fn batchnorm_forward<T: Scalar>(
    x: Feat<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
) -> (Feat<T>, BnCache<T>) {
    let plane = x.plane();
    let count = plane as f64;
    let mut xhat = x;
    let mut y = Feat::zeros(xhat.c, xhat.n, xhat.h, xhat.w);
    let mut inv_std = Vec::with_capacity(xhat.c);
    let mut batch_mean = Vec::new();
    let mut batch_var = Vec::new();
    for c in 0..xhat.c {
        let xs = &mut xhat.data[c * plane..(c + 1) * plane];
        let (mean, var) = match stats {
            Some((m, v)) => (f64_of(m[c]), f64_of(v[c])),
            None => {
                let mean = xs.iter().map(|&v| f64_of(v)).sum::<f64>() / count;
                let var = xs.iter().map(|&v| (f64_of(v) - mean).powi(2)).sum::<f64>() / count;
                batch_mean.push(T::of(mean));
                batch_var.push(T::of(var));
                (mean, var)
            }
        };
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std.push(T::of(is));
        let (g, b) = (f64_of(gamma[c]), f64_of(beta[c]));
        let ys = &mut y.data[c * plane..(c + 1) * plane];
        for (xv, yv) in xs.iter_mut().zip(ys.iter_mut()) {
            let xh = (f64_of(*xv) - mean) * is;
            *xv = T::of(xh);
            *yv = T::of(g * xh + b);
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
            train: stats.is_none(),
        },
    )
}

/// Returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &Feat<T>,
) -> (Feat<T>, Vec<T>, Vec<T>) {
    let plane = dy.plane();
    let count = plane as f64;
    let mut dx = Feat::zeros(dy.c, dy.n, dy.h, dy.w);
    let mut dgamma = Vec::with_capacity(dy.c);
    let mut dbeta = Vec::with_capacity(dy.c);
    for c in 0..dy.c {
        let dys = dy.channel(c);
        let xh = cache.xhat.channel(c);
        let db = dys.iter().map(|&d| f64_of(d)).sum::<f64>();
        let dg = dys.iter().zip(xh).map(|(&d, &x)| f64_of(d) * f64_of(x)).sum::<f64>();
        dgamma.push(T::of(dg));
        dbeta.push(T::of(db));
        let dxs = &mut dx.data[c * plane..(c + 1) * plane];
        let g = f64_of(gamma[c]) * f64_of(cache.inv_std[c]);
        if cache.train {
            for ((o, &d), &x) in dxs.iter_mut().zip(dys).zip(xh) {
                *o = T::of(g * (count * f64_of(d) - db - f64_of(x) * dg) / count);
            }
        } else {
            for (o, &d) in dxs.iter_mut().zip(dys) {
                *o = T::of(g * f64_of(d));
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub fn relu_backward_in_place<T: Scalar>(out: &[T], dy: &mut [T]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled map and the winning
/// offset (0..4, row-major in the window) per output value.
pub fn maxpool2_forward<T: Scalar>(x: &Feat<T>) -> (Feat<T>, Vec<u8>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Feat::zeros(x.c, x.n, ho, wo);
    let mut arg = vec![0u8; out.data.len()];
    for p in 0..x.c * x.n {
        let src = &x.data[p * x.h * x.w..][..x.h * x.w];
        let base = p * ho * wo;
        for y in 0..ho {
            for xx in 0..wo {
                let i00 = 2 * y * x.w + 2 * xx;
                let cand = [src[i00], src[i00 + 1], src[i00 + x.w], src[i00 + x.w + 1]];
                let mut best = 0;
                for (j, &v) in cand.iter().enumerate().skip(1) {
                    if v > cand[best] {
                        best = j;
                    }
                }
                out.data[base + y * wo + xx] = cand[best];
                arg[base + y * wo + xx] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(
    dy: &Feat<T>,
    arg: &[u8],
    h: usize,
    w: usize,
) -> Feat<T> {
    let mut dx = Feat::zeros(dy.c, dy.n, h, w);
    let (ho, wo) = (dy.h, dy.w);
    for p in 0..dy.c * dy.n {
        let base = p * ho * wo;
        let dst = &mut dx.data[p * h * w..][..h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let a = arg[base + y * wo + xx] as usize;
                let i = (2 * y + a / 2) * w + 2 * xx + a % 2;
                dst[i] = dst[i] + dy.data[base + y * wo + xx];
            }
        }
    }
    dx
}

/// Half-open cell bounds `[floor(i*n/L), ceil((i+1)*n/L))`.
#[inline]
pub fn spp_bounds(i: usize, n: usize, level: usize) -> (usize, usize) {
    (i * n / level, ((i + 1) * n).div_ceil(level))
}

pub fn spp_len(channels: usize, levels: &[usize]) -> usize {
    channels * levels.iter().map(|l| l * l).sum::<usize>()
}

/// Spatial pyramid max pooling. Output is `[n][len]`, ordered level,
/// channel, cell row, cell column; `arg` holds flat indices into `x.data`.
pub fn spp_forward<T: Scalar>(x: &Feat<T>, levels: &[usize]) -> Result<(Vec<T>, Vec<usize>)> {
    if let Some(&bad) = levels.iter().find(|&&l| l == 0 || l > x.h.min(x.w)) {
        return Err(Error::Shape(format!(
            "pyramid level {bad} does not fit a {}x{} feature map",
            x.h, x.w
        )));
    }
    let len = spp_len(x.c, levels);
    let mut out = vec![T::zero(); x.n * len];
    let mut arg = vec![0usize; x.n * len];
    for img in 0..x.n {
        let mut k = img * len;
        for &level in levels {
            for c in 0..x.c {
                let base = (c * x.n + img) * x.h * x.w;
                for cy in 0..level {
                    let (y0, y1) = spp_bounds(cy, x.h, level);
                    for cx in 0..level {
                        let (x0, x1) = spp_bounds(cx, x.w, level);
                        let mut best = base + y0 * x.w + x0;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                let i = base + y * x.w + xx;
                                if x.data[i] > x.data[best] {
                                    best = i;
                                }
                            }
                        }
                        out[k] = x.data[best];
                        arg[k] = best;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn spp_backward<T: Scalar>(dy: &[T], arg: &[usize], like: &Feat<T>) -> Feat<T> {
    let mut dx = Feat::zeros(like.c, like.n, like.h, like.w);
    for (&g, &i) in dy.iter().zip(arg) {
        dx.data[i] = dx.data[i] + g;
    }
    dx
}

/// `y[n][out] = x[n][in] W^T + b`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &[T],
    bias: &[T],
    d_out: usize,
) -> Vec<T> {
    let d_in = x.len() / n;
    let mut y = vec![T::zero(); n * d_out];
    gemm(
        n,
        d_in,
        d_out,
        T::one(),
        x,
        Strides::rm(d_in),
        weight,
        Strides::tr(d_in),
        T::zero(),
        &mut y,
        Strides::rm(d_out),
    );
    for row in y.chunks_exact_mut(d_out) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
    y
}

/// Returns (dx, dW, db).
pub fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &[T],
    dy: &[T],
    d_out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d_in = x.len() / n;
    let mut dx = vec![T::zero(); n * d_in];
    gemm(
        n,
        d_out,
        d_in,
        T::one(),
        dy,
        Strides::rm(d_out),
        weight,
        Strides::rm(d_in),
        T::zero(),
        &mut dx,
        Strides::rm(d_in),
    );
    let mut dw = vec![T::zero(); d_out * d_in];
    gemm(
        d_out,
        n,
        d_in,
        T::one(),
        dy,
        Strides::tr(d_out),
        x,
        Strides::rm(d_in),
        T::zero(),
        &mut dw,
        Strides::rm(d_in),
    );
    let mut db = vec![T::zero(); d_out];
    for row in dy.chunks_exact(d_out) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(c: usize, n: usize, h: usize, w: usize, seed: u64) -> Feat<f64> {
        let mut s = seed;
        let data = (0..c * n * h * w)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Feat { c, n, h, w, data }
    }

    /// Direct nested-loop convolution.
    fn conv_naive(x: &Feat<f64>, wt: &[f64], b: &[f64], co: usize) -> Feat<f64> {
        let mut out = Feat::zeros(co, x.n, x.h, x.w);
        for o in 0..co {
            for img in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = b[o];
                        for ci in 0..x.c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * x.c + ci) * 3 + ky) * 3 + kx]
                                        * x.at(ci, img, sy as usize, sx as usize);
                                }
                            }
                        }
                        out.data[((o * x.n + img) * x.h + y) * x.w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_naive() {
        let x = feat(3, 2, 5, 4, 1);
        let w = feat(1, 1, 1, 4 * 27, 2).data;
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let got = conv3x3_forward(&x, &w, &b, 4);
        let want = conv_naive(&x, &w, &b, 4);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// <dy, conv(x)> is bilinear, so the adjoint identity checks the backward exactly.
    #[test]
    fn conv3x3_backward_adjoint() {
        let x = feat(2, 2, 4, 6, 3);
        let w = feat(1, 1, 1, 3 * 18, 4).data;
        let b = vec![0.0; 3];
        let dy = feat(3, 2, 4, 6, 5);
        let y = conv3x3_forward(&x, &w, &b, 3);
        let (dx, dw, db) = conv3x3_backward(&x, &w, &dy, true);
        let dx = dx.unwrap();
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        let dysum: f64 = dy.channel(1).iter().sum();
        assert!((db[1] - dysum).abs() < 1e-12);
    }

    #[test]
    fn upconv_adjoint_and_placement() {
        let x = feat(2, 2, 3, 2, 7);
        let w = feat(1, 1, 1, 2 * 3 * 4, 8).data;
        let b = vec![0.0; 3];
        let y = upconv2x2_forward(&x, &w, &b, 3);
        assert_eq!((y.h, y.w), (6, 4));
        // output (o, img, 2y+dy, 2x+dx) = sum_ci x[ci,img,y,x] W[ci][o][dy][dx]
        let v = y.at(1, 1, 3, 2);
        let want: f64 = (0..2).map(|ci| x.at(ci, 1, 1, 1) * w[(ci * 3 + 1) * 4 + 2]).sum();
        assert!((v - want).abs() < 1e-12);
        let dy = feat(3, 2, 6, 4, 9);
        let (dx, dw, _) = upconv2x2_backward(&x, &w, &dy);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10 && (lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn conv1x1_and_linear_adjoint() {
        let x = feat(4, 2, 3, 3, 10);
        let w = feat(1, 1, 1, 8, 11).data;
        let y = conv1x1_forward(&x, &w, &[0.0, 0.0], 2);
        let dy = feat(2, 2, 3, 3, 12);
        let (dx, dw, _) = conv1x1_backward(&x, &w, &dy);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10 && (lhs - via_w).abs() < 1e-10);

        let xs = feat(1, 1, 3, 5, 13).data;
        let wl = feat(1, 1, 1, 20, 14).data;
        let yl = linear_forward(&xs, 3, &wl, &[0.0; 4], 4);
        let dyl = feat(1, 1, 3, 4, 15).data;
        let (dxl, dwl, _) = linear_backward(&xs, 3, &wl, &dyl, 4);
        let lhs: f64 = yl.iter().zip(&dyl).map(|(a, b)| a * b).sum();
        let via_x: f64 = dxl.iter().zip(&xs).map(|(a, b)| a * b).sum();
        let via_w: f64 = dwl.iter().zip(&wl).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10 && (lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = Feat::<f64> {
            c: 1,
            n: 1,
            h: 2,
            w: 4,
            data: vec![1.0, 5.0, 0.0, -1.0, 2.0, 3.0, -3.0, -2.0],
        };
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data, vec![5.0, 0.0]);
        assert_eq!(arg, vec![1, 0]);
        let dx = maxpool2_backward(&Feat { data: vec![1.0, 2.0], ..y }, &arg, 2, 4);
        assert_eq!(dx.data, vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn spp_lengths_and_global_max() {
        let x = feat(3, 2, 8, 8, 20);
        let (v, _) = spp_forward(&x, &[1, 2, 4]).unwrap();
        assert_eq!(v.len(), 2 * 21 * 3);
        let (g, _) = spp_forward(&x, &[1]).unwrap();
        for img in 0..2 {
            for c in 0..3 {
                let m = (0..64)
                    .map(|i| x.at(c, img, i / 8, i % 8))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(g[img * 3 + c], m);
            }
        }
        assert!(spp_forward(&x, &[16]).is_err());
    }

    #[test]
    fn spp_bounds_cover_axis() {
        for n in 1..20 {
            for l in 1..=n {
                let mut covered = vec![false; n];
                for i in 0..l {
                    let (a, b) = spp_bounds(i, n, l);
                    assert!(a < b && b <= n);
                    covered[a..b].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }
}
