//! Slice-level kernels shared by the recorded graph and the incremental decoder.
//!
//! Every reduction runs in a fixed order so that a row computed alone and the
//! same row computed inside a larger batch produce identical bits.

use super::tensor::Scalar;

/// `c[m,n] = a[m,k] * b[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `da[m,k] = dc[m,n] * b[k,n]^T`.
pub fn matmul_grad_a<T: Scalar>(dc: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut da = vec![T::zero(); m * k];
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = dot(dcrow, brow);
        }
    }
    da
}

/// `db[k,n] = a[m,k]^T * dc[m,n]`.
pub fn matmul_grad_b<T: Scalar>(a: &[T], dc: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut db = vec![T::zero(); k * n];
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                *d += aip * g;
            }
        }
    }
    db
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Normalizes `x` to unit root-mean-square and applies `gain`. Returns `1/rms`.
pub fn rmsnorm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::of(x.len() as f64);
    let ms = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / n;
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Rotates each head's half-split pairs by the angle for absolute position `pos`.
/// `inverse` applies the transpose rotation (used by the backward pass).
pub fn rope_row<T: Scalar>(row: &mut [T], pos: usize, n_heads: usize, base: f64, inverse: bool) {
    let hd = row.len() / n_heads;
    let half = hd / 2;
    for h in 0..n_heads {
        let head = &mut row[h * hd..(h + 1) * hd];
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / hd as f64);
            let angle = pos as f64 * freq;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::of(if inverse { -s } else { s }), T::of(c));
            let x1 = head[i];
            let x2 = head[i + half];
            head[i] = x1 * c - x2 * s;
            head[i + half] = x1 * s + x2 * c;
        }
    }
}

/// Causal attention for one query row against `keys`/`values` rows `0..=t`.
///
/// `keys` and `values` are row-major with row width `d`; only the first `t + 1`
/// rows are read. Writes attention weights for every head into
/// `probs[h * probs_stride + j]` when `probs` is given.
#[allow(clippy::too_many_arguments)]
pub fn attend_query<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    t: usize,
    n_heads: usize,
    out: &mut [T],
    mut probs: Option<(&mut [T], usize)>,
    scratch: &mut Vec<T>,
) {
    let d = q.len();
    let hd = d / n_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    scratch.clear();
    scratch.resize(t + 1, T::zero());
    for h in 0..n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let mut max = T::neg_infinity();
        for j in 0..=t {
            let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            let s = dot(qh, kh) * scale;
            scratch[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut sum = T::zero();
        for s in scratch.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.iter_mut().for_each(|o| *o = T::zero());
        for j in 0..=t {
            let p = scratch[j] / sum;
            scratch[j] = p;
            let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
        if let Some((buf, stride)) = probs.as_mut() {
            buf[h * *stride..h * *stride + t + 1].copy_from_slice(scratch);
        }
    }
}

/// Log-sum-exp of a row, max-shifted.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if max == T::neg_infinity() {
        return max;
    }
    let s = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rope_inverse_undoes_rotation() {
        let orig: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut row = orig.clone();
        rope_row(&mut row, 7, 2, 10000.0, false);
        assert!(row.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope_row(&mut row, 7, 2, 10000.0, true);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let orig: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let mut row = orig.clone();
        rope_row(&mut row, 0, 1, 10000.0, false);
        assert_eq!(row, orig);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let row = [1.0f64, 2.0, 3.0];
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((log_sum_exp(&row) - direct).abs() < 1e-12);
    }
}
