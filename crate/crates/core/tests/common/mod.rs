#![allow(dead_code)]

use mvar_core::attention::AttnParams;
use mvar_core::{Mat, Scalar};

/// Dense attention in `f64` over the full sequence with an explicit boolean
/// mask, written independently of the range-based kernel.
pub fn masked_attention<T: Scalar>(
    x: &Mat<T>,
    p: &AttnParams<T>,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let l = x.rows();
    let d = x.cols();
    let hd = d / p.n_heads;
    let proj = |w: &Mat<T>| -> Vec<Vec<f64>> {
        (0..l)
            .map(|i| {
                (0..d)
                    .map(|c| (0..d).map(|k| x.get(i, k).f64() * w.get(k, c).f64()).sum())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (proj(&p.w_q), proj(&p.w_k), proj(&p.w_v));
    let mut ctx = vec![vec![0.0; d]; l];
    for h in 0..p.n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| {
                    if allowed(i, j) {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..l).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    (0..l)
        .map(|i| {
            (0..d)
                .map(|c| (0..d).map(|k| ctx[i][k] * p.w_o.get(k, c).f64()).sum())
                .collect()
        })
        .collect()
}

/// Strictly increasing sides starting at 1 built from positive steps.
pub fn sides_from_steps(steps: &[usize]) -> Vec<usize> {
    let mut sides = vec![1];
    for s in steps {
        let last = *sides.last().unwrap();
        sides.push(last + s);
    }
    sides
}
