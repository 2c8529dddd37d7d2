//! Brute-force 2:4 oracle.

use rand::Rng;
use vitprune::sparsity::{apply_2to4, verify_2to4};

pub const KEEP_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// The pair kept in one group of four: the one retaining the most energy,
/// found by trying all six.
pub fn best_pair(g: &[f32]) -> (usize, usize) {
    let energy = |&(a, b): &(usize, usize)| (g[a] as f64).powi(2) + (g[b] as f64).powi(2);
    *KEEP_PAIRS
        .iter()
        .max_by(|x, y| energy(x).total_cmp(&energy(y)))
        .unwrap()
}

pub fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Vec<f32> {
    (0..rows * cols)
        .map(|_| r.random_range(-1.0f32..1.0))
        .collect()
}

/// First way in which `apply_2to4` breaks the 2:4 laws on `w`: exact half
/// zeros, top-2 retention per group against [`best_pair`], idempotence and
/// a clean verification report.
pub fn two_four_violation(w: &[f32], cols: usize) -> Option<String> {
    let (s, keep) = match apply_2to4(w, cols) {
        Ok(x) => x,
        Err(e) => return Some(e.to_string()),
    };
    if keep.len() != w.len() || s.iter().filter(|&&x| x == 0.0).count() * 2 != w.len() {
        return Some("not exactly half zeros".into());
    }
    for (gi, g) in w.chunks(4).enumerate() {
        let (a, b) = best_pair(g);
        for i in 0..4 {
            let kept = i == a || i == b;
            if keep[gi * 4 + i] != kept || s[gi * 4 + i] != if kept { g[i] } else { 0.0 } {
                return Some(format!("group {gi} kept the wrong pair"));
            }
        }
    }
    if apply_2to4(&s, cols).ok() != Some((s.clone(), keep)) {
        return Some("not idempotent".into());
    }
    let rows = w.len() / cols;
    if !verify_2to4(&s, cols, (rows, cols)).ok() {
        return Some("verification failed".into());
    }
    None
}
