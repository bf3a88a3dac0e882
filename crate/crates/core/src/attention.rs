//! Multi-head scaled-dot-product attention over contiguous key ranges.
//!
//! Every query attends to a contiguous range of keys. Block-diagonal masking
//! (each scale attends only to itself) and the scale-causal mask of the
//! global baseline are both expressed as per-query ranges, so one kernel and
//! one backward pass serve both.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::SequenceLayout;
use crate::tensor::{axpy, dot, matmul_tn_acc, Mat};

/// Order-independent multiply-accumulate counter.
#[derive(Debug, Default)]
pub struct OpCounter(AtomicU64);

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    pub w_q: Mat<T>,
    pub w_k: Mat<T>,
    pub w_v: Mat<T>,
    pub w_o: Mat<T>,
    pub n_heads: usize,
}

impl<T: Scalar> AttnParams<T> {
    pub fn new(w_q: Mat<T>, w_k: Mat<T>, w_v: Mat<T>, w_o: Mat<T>, n_heads: usize) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.shape() != (d, d) {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected ({d}, {d})",
                    w.shape()
                )));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{n_heads} heads do not divide width {d}"
            )));
        }
        Ok(AttnParams {
            w_q,
            w_k,
            w_v,
            w_o,
            n_heads,
        })
    }

    /// Gaussian init with std `1/√d`.
    pub fn init<R: Rng + ?Sized>(d: usize, n_heads: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        AttnParams {
            w_q: Mat::randn(d, d, std, rng),
            w_k: Mat::randn(d, d, std, rng),
            w_v: Mat::randn(d, d, std, rng),
            w_o: Mat::randn(d, d, std, rng),
            n_heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        AttnParams {
            w_q: Mat::zeros(d, d),
            w_k: Mat::zeros(d, d),
            w_v: Mat::zeros(d, d),
            w_o: Mat::zeros(d, d),
            n_heads: self.n_heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.n_heads
    }
}

/// Saved activations from a forward call.
#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    x: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    ctx: Mat<T>,
    ranges: Vec<Range<usize>>,
    /// Softmax rows, query-major then head-major, each of its range's length.
    probs: Vec<T>,
    prob_offsets: Vec<usize>,
}

impl<T: Scalar> AttnCache<T> {
    /// Softmax row of `query` for `head`, over keys `range(query)`.
    pub fn probs(&self, query: usize, head: usize) -> (&[T], Range<usize>) {
        let r = self.ranges[query].clone();
        let o = self.prob_offsets[query] + head * r.len();
        (&self.probs[o..o + r.len()], r)
    }

    pub fn n_queries(&self) -> usize {
        self.ranges.len()
    }
}

fn check_input<T: Scalar>(x: &Mat<T>, params: &AttnParams<T>) -> Result<()> {
    if x.cols() != params.dim() {
        return Err(Error::Shape(format!(
            "input width {} against attention width {}",
            x.cols(),
            params.dim()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::Shape("attention over an empty block".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("attention input".into()));
    }
    Ok(())
}

/// The score/mix core: per query and head, `softmax(q·kᵀ/√dₕ)·v` over the
/// query's key range. Counts `2·|range|·dₕ` multiply-accumulates per
/// (query, head) into `counter`.
pub fn score_kernel<T: Scalar>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    n_heads: usize,
    ranges: &[Range<usize>],
    counter: Option<&OpCounter>,
) -> (Mat<T>, Vec<T>, Vec<usize>) {
    let d = q.cols();
    let hd = d / n_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut prob_offsets = Vec::with_capacity(ranges.len());
    let mut total = 0;
    for r in ranges {
        prob_offsets.push(total);
        total += r.len() * n_heads;
    }
    let mut probs = vec![T::zero(); total];
    let mut ctx = Mat::zeros(q.rows(), d);
    let mut macs = 0u64;
    for (i, r) in ranges.iter().enumerate() {
        let qi = q.row(i);
        let ci = ctx.row_mut(i);
        for h in 0..n_heads {
            let cols = h * hd..(h + 1) * hd;
            let o = prob_offsets[i] + h * r.len();
            let p = &mut probs[o..o + r.len()];
            let qh = &qi[cols.clone()];
            let mut max = T::neg_infinity();
            for (pj, j) in p.iter_mut().zip(r.clone()) {
                let s = dot(qh, &k.row(j)[cols.clone()]) * scale;
                *pj = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = T::zero();
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                sum = sum + *pj;
            }
            let inv = T::one() / sum;
            let ch = &mut ci[cols.clone()];
            for (pj, j) in p.iter_mut().zip(r.clone()) {
                *pj = *pj * inv;
                axpy(*pj, &v.row(j)[cols.clone()], ch);
            }
            macs += 2 * (r.len() * hd) as u64;
        }
    }
    if let Some(c) = counter {
        c.add(macs);
    }
    (ctx, probs, prob_offsets)
}

/// Attention with per-query key ranges. `ranges[i]` lists the keys query `i`
/// may see.
pub fn attention_forward<T: Scalar>(
    x: &Mat<T>,
    params: &AttnParams<T>,
    ranges: &[Range<usize>],
    counter: Option<&OpCounter>,
) -> Result<(Mat<T>, AttnCache<T>)> {
    check_input(x, params)?;
    if ranges.len() != x.rows() || ranges.iter().any(|r| r.is_empty() || r.end > x.rows()) {
        return Err(Error::Shape("key ranges do not match the input".into()));
    }
    let q = x.matmul(&params.w_q);
    let k = x.matmul(&params.w_k);
    let v = x.matmul(&params.w_v);
    let (ctx, probs, prob_offsets) = score_kernel(&q, &k, &v, params.n_heads, ranges, counter);
    let out = ctx.matmul(&params.w_o);
    Ok((
        out,
        AttnCache {
            x: x.clone(),
            q,
            k,
            v,
            ctx,
            ranges: ranges.to_vec(),
            probs,
            prob_offsets,
        },
    ))
}

/// Gradients of [`attention_forward`]: returns `∂/∂x` and accumulates
/// parameter gradients into `grads`.
pub fn attention_backward<T: Scalar>(
    cache: &AttnCache<T>,
    params: &AttnParams<T>,
    upstream: &Mat<T>,
    grads: &mut AttnParams<T>,
) -> Result<Mat<T>> {
    if upstream.shape() != cache.x.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} against input {:?}",
            upstream.shape(),
            cache.x.shape()
        )));
    }
    let d = params.dim();
    let hd = params.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    matmul_tn_acc(&cache.ctx, upstream, &mut grads.w_o);
    let dctx = upstream.matmul_t(&params.w_o);
    let n = cache.x.rows();
    let mut dq = Mat::zeros(n, d);
    let mut dk = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    let mut dp = Vec::new();
    for i in 0..n {
        for h in 0..params.n_heads {
            let cols = h * hd..(h + 1) * hd;
            let (p, r) = cache.probs(i, h);
            let g = &dctx.row(i)[cols.clone()];
            dp.clear();
            let mut inner = T::zero();
            for (&pj, j) in p.iter().zip(r.clone()) {
                let v = dot(g, &cache.v.row(j)[cols.clone()]);
                dp.push(v);
                inner = inner + pj * v;
                axpy(pj, g, &mut dv.row_mut(j)[cols.clone()]);
            }
            let qi = cache.q.row(i)[cols.clone()].to_vec();
            for ((&pj, &dpj), j) in p.iter().zip(&dp).zip(r.clone()) {
                let ds = pj * (dpj - inner) * scale;
                if ds == T::zero() {
                    continue;
                }
                axpy(ds, &cache.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                axpy(ds, &qi, &mut dk.row_mut(j)[cols.clone()]);
            }
        }
    }
    matmul_tn_acc(&cache.x, &dq, &mut grads.w_q);
    matmul_tn_acc(&cache.x, &dk, &mut grads.w_k);
    matmul_tn_acc(&cache.x, &dv, &mut grads.w_v);
    let mut dx = dq.matmul_t(&params.w_q);
    dx.add_assign(&dk.matmul_t(&params.w_k));
    dx.add_assign(&dv.matmul_t(&params.w_v));
    Ok(dx)
}

/// Full bidirectional attention inside one block.
pub fn attend_block<T: Scalar>(x: &Mat<T>, params: &AttnParams<T>) -> Result<Mat<T>> {
    let ranges = vec![0..x.rows(); x.rows()];
    attention_forward(x, params, &ranges, None).map(|(out, _)| out)
}

/// [`attend_block`] applied to every block of `layout` independently.
pub fn attend_sequence<T: Scalar>(
    x: &Mat<T>,
    layout: &SequenceLayout,
    params: &AttnParams<T>,
) -> Result<Mat<T>> {
    if x.rows() != layout.total_len {
        return Err(Error::Shape(format!(
            "sequence of {} rows against a {}-token layout",
            x.rows(),
            layout.total_len
        )));
    }
    let blocks = (0..layout.n_blocks())
        .into_par_iter()
        .map(|i| {
            let r = layout.block_range(i);
            attend_block(&x.slice_rows(r.start, r.end), params)
        })
        .collect::<Result<Vec<_>>>()?;
    Mat::vstack(&blocks)
}

/// Returns `(∂/∂x, parameter gradients)` of [`attend_block`].
pub fn attend_block_backward<T: Scalar>(
    x: &Mat<T>,
    params: &AttnParams<T>,
    upstream: &Mat<T>,
) -> Result<(Mat<T>, AttnParams<T>)> {
    let ranges = vec![0..x.rows(); x.rows()];
    let (_, cache) = attention_forward(x, params, &ranges, None)?;
    let mut grads = params.zeros_like();
    let dx = attention_backward(&cache, params, upstream, &mut grads)?;
    Ok((dx, grads))
}
