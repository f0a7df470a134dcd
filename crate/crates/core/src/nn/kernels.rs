//! Slice-level numeric kernels shared by the tape and the tensor-level ops.

use crate::nn::Real;

/// `out += a[m×k] · b[k×n]`
pub(crate) fn mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += aip * bpj;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_t_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a[m×k]ᵀ · b[m×n]`, giving a `k×n` result.
pub(crate) fn t_mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bij) in out_row.iter_mut().zip(b_row) {
                *o += aip * bij;
            }
        }
    }
}

/// Row-wise softmax. Entries with `mask[i] == false` get probability zero;
/// a row with every entry masked is all zeros.
pub(crate) fn softmax_rows<T: Real>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (row, out_row)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let mut max = T::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if keep(c) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for (c, (&v, o)) in row.iter().zip(out_row.iter_mut()).enumerate() {
            if keep(c) {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        out_row.iter_mut().for_each(|o| *o = *o / sum);
    }
    out
}

pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Per-row layer normalization with biased variance.
pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    let rows = x.len() / cols;
    let n = T::lit(cols as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (row, out_row) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mu = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        for (c, (&v, o)) in row.iter().zip(out_row.iter_mut()).enumerate() {
            *o = (v - mu) * rs * gain[c] + bias[c];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, NormStats { mean, rstd })
}

pub(crate) fn log_clamped<T: Real>(p: T, floor: T) -> T {
    if p > floor {
        p.ln()
    } else {
        floor.ln()
    }
}
