//! Generic forward kernels shared by the f32 graph executor and the f64
//! replay path used for finite-difference verification.

use num_traits::Float;

/// `a` is `[m, k]`, `b` is `[k, n]`, output `[m, n]`.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    out
}

/// `a` is `[m, k]`, `b` is `[n, k]`, output `a * b^T` of shape `[m, n]`.
pub fn matmul_nt<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Elementwise binop where `b` may broadcast: `b.len()` must divide `a.len()`
/// and `b` is tiled over the leading dimensions of `a`.
pub fn bcast_binop<T: Float>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for (i, &av) in a.iter().enumerate() {
        out.push(f(av, b[i % b.len()]));
    }
    out
}

/// Softmax over the last axis of size `n` (max-subtracted).
pub fn softmax_last<T: Float>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let sum = exps.iter().cloned().fold(T::zero(), |s, v| s + v);
        out.extend(exps.into_iter().map(|v| v / sum));
    }
    out
}

/// `-log softmax(logits)[target]` for a rank-1 logits vector.
pub fn cross_entropy<T: Float>(logits: &[T], target: usize) -> T {
    let mx = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let lse = logits
        .iter()
        .map(|&v| (v - mx).exp())
        .fold(T::zero(), |s, v| s + v)
        .ln()
        + mx;
    lse - logits[target]
}

/// Layer normalization over the last axis of size `n`.
pub fn layer_norm<T: Float>(x: &[T], gamma: &[T], beta: &[T], n: usize, eps: T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let nt = T::from(n).unwrap();
    for row in x.chunks(n) {
        let mean = row.iter().cloned().fold(T::zero(), |s, v| s + v) / nt;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(T::zero(), |s, v| s + v)
            / nt;
        let inv = T::one() / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out.push(gamma[j] * ((v - mean) * inv) + beta[j]);
        }
    }
    out
}

/// Gathers rows of `table` (row width `d`) at `ids`.
pub fn embedding<T: Float>(table: &[T], d: usize, ids: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        out.extend_from_slice(&table[id * d..(id + 1) * d]);
    }
    out
}
