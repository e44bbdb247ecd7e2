//! Forward and adjoint kernels. These are plain functions on tensors; the
//! tape wires them together and does the MAC bookkeeping.

use super::Tensor;
use crate::error::{Error, Result};

fn matrix_dims(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    t.expect_rank(2, op)?;
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a · b` for `a: [m×k]`, `b: [k×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, p) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: inner extents differ, lhs {:?} rhs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &aik) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(Tensor::raw(vec![m, p], out))
}

/// `a · bᵀ` for `a: [m×k]`, `b: [p×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul_nt")?;
    let (p, k2) = matrix_dims(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_nt: inner extents differ, lhs {:?} rhs {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &bd[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * p + j] = s;
        }
    }
    Ok(Tensor::raw(vec![m, p], out))
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×p]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = matrix_dims(a, "matmul_tn")?;
    let (k2, p) = matrix_dims(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_tn: inner extents differ, lhs {:?}ᵀ rhs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * p];
    for kk in 0..k {
        let brow = &bd[kk * p..(kk + 1) * p];
        for i in 0..m {
            let aki = ad[kk * m + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    Ok(Tensor::raw(vec![m, p], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = matrix_dims(a, "transpose")?;
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Ok(Tensor::raw(vec![c, r], out))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = matrix_dims(x, "softmax_rows")?;
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("softmax_rows: NaN input"));
    }
    x.ensure_finite("softmax_rows")?;
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(Tensor::raw(vec![r, c], out))
}

/// Adjoint of [`softmax_rows`] given its output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let c = y.cols();
    let mut out = vec![0.0; y.numel()];
    for ((orow, yrow), grow) in out
        .chunks_mut(c)
        .zip(y.data().chunks(c))
        .zip(dy.data().chunks(c))
    {
        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::raw(y.shape().to_vec(), out)
}

/// Half-open source ranges `[⌊i·src/dst⌋, ⌈(i+1)·src/dst⌉)` for each of the
/// `dst` adaptive-pool bins.
pub fn pool_bins(src: usize, dst: usize) -> Vec<(usize, usize)> {
    (0..dst)
        .map(|i| {
            let start = (i * src) / dst;
            let end = ((i + 1) * src).div_ceil(dst);
            (start, end)
        })
        .collect()
}

/// Number of input additions performed by an adaptive pool from `[H×W×C]` to
/// `[h×w×C]`. Equals `H·W·C` whenever the bins tile the grid exactly.
pub fn pool_add_count(src: (usize, usize), dst: (usize, usize), channels: usize) -> u64 {
    let rows: usize = pool_bins(src.0, dst.0).iter().map(|(a, b)| b - a).sum();
    let cols: usize = pool_bins(src.1, dst.1).iter().map(|(a, b)| b - a).sum();
    (rows * cols * channels) as u64
}

fn grid_dims(x: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    x.expect_rank(3, op)?;
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Adaptive average pooling of an `[H×W×d]` grid to `[h×w×d]`.
pub fn adaptive_avg_pool2d(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (hs, ws, d) = grid_dims(x, "adaptive_avg_pool2d")?;
    let (h, w) = target;
    if h == 0 || w == 0 || h > hs || w > ws {
        return Err(Error::dim(format!(
            "adaptive_avg_pool2d: target {h}×{w} must lie within 1..={hs}×1..={ws}"
        )));
    }
    let rb = pool_bins(hs, h);
    let cb = pool_bins(ws, w);
    let src = x.data();
    let mut out = vec![0.0; h * w * d];
    for (i, &(r0, r1)) in rb.iter().enumerate() {
        for (j, &(c0, c1)) in cb.iter().enumerate() {
            let cell = &mut out[(i * w + j) * d..(i * w + j + 1) * d];
            for r in r0..r1 {
                for c in c0..c1 {
                    let px = &src[(r * ws + c) * d..(r * ws + c + 1) * d];
                    for (o, &v) in cell.iter_mut().zip(px) {
                        *o += v;
                    }
                }
            }
            let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            for o in cell.iter_mut() {
                *o *= inv;
            }
        }
    }
    Ok(Tensor::raw(vec![h, w, d], out))
}

/// Adjoint of [`adaptive_avg_pool2d`] onto an input of extent `src`.
pub fn adaptive_avg_pool2d_backward(dy: &Tensor, src: (usize, usize)) -> Tensor {
    let (h, w, d) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let (hs, ws) = src;
    let rb = pool_bins(hs, h);
    let cb = pool_bins(ws, w);
    let g = dy.data();
    let mut out = vec![0.0; hs * ws * d];
    for (i, &(r0, r1)) in rb.iter().enumerate() {
        for (j, &(c0, c1)) in cb.iter().enumerate() {
            let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            let cell = &g[(i * w + j) * d..(i * w + j + 1) * d];
            for r in r0..r1 {
                for c in c0..c1 {
                    let px = &mut out[(r * ws + c) * d..(r * ws + c + 1) * d];
                    for (o, &v) in px.iter_mut().zip(cell) {
                        *o += v * inv;
                    }
                }
            }
        }
    }
    Tensor::raw(vec![hs, ws, d], out)
}

fn check_kernels(x: &Tensor, kernels: &Tensor) -> Result<(usize, usize, usize)> {
    let (h, w, d) = grid_dims(x, "depthwise_conv3x3")?;
    if kernels.shape() != [3, 3, d] {
        return Err(Error::dim(format!(
            "depthwise_conv3x3: kernels {:?} do not match [3, 3, {d}] for input {:?}",
            kernels.shape(),
            x.shape()
        )));
    }
    Ok((h, w, d))
}

/// Per-channel 3×3 cross-correlation, stride 1, zero padding 1, no bias.
pub fn depthwise_conv3x3(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (h, w, d) = check_kernels(x, kernels)?;
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = vec![0.0; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * d..(i * w + j + 1) * d];
            for a in 0..3 {
                let Some(r) = (i + a).checked_sub(1).filter(|&r| r < h) else {
                    continue;
                };
                for b in 0..3 {
                    let Some(c) = (j + b).checked_sub(1).filter(|&c| c < w) else {
                        continue;
                    };
                    let px = &xd[(r * w + c) * d..(r * w + c + 1) * d];
                    let k = &kd[(a * 3 + b) * d..(a * 3 + b + 1) * d];
                    for ch in 0..d {
                        o[ch] += k[ch] * px[ch];
                    }
                }
            }
        }
    }
    Ok(Tensor::raw(vec![h, w, d], out))
}

/// Adjoint of [`depthwise_conv3x3`]: returns `(d_input, d_kernels)`.
pub fn depthwise_conv3x3_backward(x: &Tensor, kernels: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (xd, kd, g) = (x.data(), kernels.data(), dy.data());
    let mut dx = vec![0.0; h * w * d];
    let mut dk = vec![0.0; 9 * d];
    for i in 0..h {
        for j in 0..w {
            let go = &g[(i * w + j) * d..(i * w + j + 1) * d];
            for a in 0..3 {
                let Some(r) = (i + a).checked_sub(1).filter(|&r| r < h) else {
                    continue;
                };
                for b in 0..3 {
                    let Some(c) = (j + b).checked_sub(1).filter(|&c| c < w) else {
                        continue;
                    };
                    let base = (r * w + c) * d;
                    let kb = (a * 3 + b) * d;
                    for ch in 0..d {
                        dx[base + ch] += kd[kb + ch] * go[ch];
                        dk[kb + ch] += xd[base + ch] * go[ch];
                    }
                }
            }
        }
    }
    (
        Tensor::raw(vec![h, w, d], dx),
        Tensor::raw(vec![3, 3, d], dk),
    )
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise standardization without affine parameters. Returns the output
/// and the per-row reciprocal standard deviations.
pub fn layer_norm_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (r, c) = matrix_dims(x, "layer_norm")?;
    let mut out = vec![0.0; r * c];
    let mut rstd = Vec::with_capacity(r);
    for (orow, xrow) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        let mean = xrow.iter().sum::<f64>() / c as f64;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - mean) * s;
        }
        rstd.push(s);
    }
    Ok((Tensor::raw(vec![r, c], out), rstd))
}

pub fn layer_norm_rows_backward(y: &Tensor, rstd: &[f64], dy: &Tensor) -> Tensor {
    let c = y.cols();
    let mut out = vec![0.0; y.numel()];
    for (((orow, yrow), grow), &s) in out
        .chunks_mut(c)
        .zip(y.data().chunks(c))
        .zip(dy.data().chunks(c))
        .zip(rstd)
    {
        let mean_g = grow.iter().sum::<f64>() / c as f64;
        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
            *o = s * (gv - mean_g - yv * mean_gy);
        }
    }
    Tensor::raw(y.shape().to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Columns `[start, start + len)` of a matrix.
pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = matrix_dims(a, "slice_cols")?;
    if start + len > c {
        return Err(Error::dim(format!(
            "slice_cols: columns {start}..{} out of range for {:?}",
            start + len,
            a.shape()
        )));
    }
    let mut out = Vec::with_capacity(r * len);
    for row in a.data().chunks(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Ok(Tensor::raw(vec![r, len], out))
}

/// Side-by-side concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::dim("concat_cols: no inputs"));
    };
    let r = first.rows();
    for p in parts {
        p.expect_rank(2, "concat_cols")?;
        if p.rows() != r {
            return Err(Error::dim(format!(
                "concat_cols: row counts differ ({:?} vs {:?})",
                first.shape(),
                p.shape()
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::raw(vec![r, total], out))
}
