//! Dense f32 kernels used by the graph ops.
//!
//! Every output element is produced by exactly one thread with a fixed
//! summation order, so results are bit-identical for any thread count.

use rayon::prelude::*;

/// Work (in multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose(a: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0f32; a.len()];
    const T: usize = 32;
    for i0 in (0..r).step_by(T) {
        for j0 in (0..c).step_by(T) {
            for i in i0..(i0 + T).min(r) {
                for j in j0..(j0 + T).min(c) {
                    out[j * r + i] = a[i * c + j];
                }
            }
        }
    }
    out
}

/// Four output rows at once so each row of `b` is loaded once per block.
fn mm_rows4(a: &[f32], b: &[f32], k: usize, n: usize, i0: usize, out: &mut [f32]) {
    let (o0, rest) = out.split_at_mut(n);
    let (o1, rest) = rest.split_at_mut(n);
    let (o2, o3) = rest.split_at_mut(n);
    o0.fill(0.0);
    o1.fill(0.0);
    o2.fill(0.0);
    o3.fill(0.0);
    let (a0, a1, a2, a3) = (
        &a[i0 * k..(i0 + 1) * k],
        &a[(i0 + 1) * k..(i0 + 2) * k],
        &a[(i0 + 2) * k..(i0 + 3) * k],
        &a[(i0 + 3) * k..(i0 + 4) * k],
    );
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
        for ((((y0, y1), y2), y3), &bv) in o0
            .iter_mut()
            .zip(o1.iter_mut())
            .zip(o2.iter_mut())
            .zip(o3.iter_mut())
            .zip(br)
        {
            *y0 += x0 * bv;
            *y1 += x1 * bv;
            *y2 += x2 * bv;
            *y3 += x3 * bv;
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
///
/// Each output element accumulates over `k` in ascending order.
pub fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    if n == 0 {
        return;
    }
    let block = |(bi, o): (usize, &mut [f32])| {
        let i0 = bi * 4;
        if o.len() == 4 * n {
            mm_rows4(a, b, k, n, i0, o);
        } else {
            for (r, orow) in o.chunks_mut(n).enumerate() {
                orow.fill(0.0);
                let ar = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (p, &av) in ar.iter().enumerate() {
                    axpy(av, &b[p * n..(p + 1) * n], orow);
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 4 {
        out.par_chunks_mut(4 * n).enumerate().for_each(block);
    } else {
        out.chunks_mut(4 * n).enumerate().for_each(block);
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    if m < 4 {
        for (i, o) in out.chunks_mut(n.max(1)).enumerate() {
            let ar = &a[i * k..(i + 1) * k];
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(ar, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    mm(a, &transpose(b, n, k), m, k, n, out);
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    mm(&transpose(a, m, k), b, k, m, n, out);
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Row-major permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(src: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if n == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let src: Vec<f32> = (0..24).map(|x| x as f32).collect();
        let (out, os) = permute(&src, &shape, &[2, 0, 1]);
        assert_eq!(os, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(out[a * 6 + b * 3 + c], src[b * 12 + c * 4 + a]);
                }
            }
        }
        let (back, bs) = permute(&out, &os, &inverse_perm(&[2, 0, 1]));
        assert_eq!(bs, shape.to_vec());
        assert_eq!(back, src);
    }

    #[test]
    fn transposed_products_agree() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f32> = (0..m * k)
            .map(|i| ((i * 7 % 13) as f32 - 6.0) / 5.0)
            .collect();
        let b: Vec<f32> = (0..k * n)
            .map(|i| ((i * 5 % 11) as f32 - 5.0) / 3.0)
            .collect();
        let mut c = vec![0.0; m * n];
        mm(&a, &b, m, k, n, &mut c);
        let (bt, _) = permute(&b, &[k, n], &[1, 0]);
        let mut c2 = vec![0.0; m * n];
        mm_nt(&a, &bt, m, k, n, &mut c2);
        let (at, _) = permute(&a, &[m, k], &[1, 0]);
        let mut c3 = vec![0.0; m * n];
        mm_tn(&at, &b, k, m, n, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - c2[i]).abs() < 1e-4);
            assert!((c[i] - c3[i]).abs() < 1e-4);
        }
    }
}
