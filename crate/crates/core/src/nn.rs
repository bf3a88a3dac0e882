//! Layer normalization, the optional feed-forward sublayer, and softmax
//! cross-entropy.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{matmul_tn_acc, Mat};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    /// `1 × d`.
    pub gain: Mat<T>,
    /// `1 × d`.
    pub bias: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn new(d: usize) -> Self {
        Norm {
            gain: Mat::filled(1, d, T::one()),
            bias: Mat::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Norm {
            gain: Mat::zeros(1, self.gain.cols()),
            bias: Mat::zeros(1, self.bias.cols()),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, NormCache<T>) {
        let d = x.cols();
        let mut xhat = Mat::zeros(x.rows(), d);
        let mut out = Mat::zeros(x.rows(), d);
        let mut rstd = Vec::with_capacity(x.rows());
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let g = self.gain.data();
            let b = self.bias.data();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xhat.get(r, c) * g[c] + b[c];
            }
        }
        (out, NormCache { xhat, rstd })
    }

    /// Returns `∂/∂x` and accumulates gain/bias gradients into `grads`.
    pub fn backward(&self, cache: &NormCache<T>, upstream: &Mat<T>, grads: &mut Norm<T>) -> Mat<T> {
        let d = upstream.cols();
        let inv_d = T::one() / T::of(d as f64);
        let mut dx = Mat::zeros(upstream.rows(), d);
        let mut dxh = vec![T::zero(); d];
        for r in 0..upstream.rows() {
            let g = upstream.row(r);
            let xh = cache.xhat.row(r);
            let gg = grads.gain.data_mut();
            for c in 0..d {
                gg[c] = gg[c] + g[c] * xh[c];
            }
            let gb = grads.bias.data_mut();
            for c in 0..d {
                gb[c] = gb[c] + g[c];
            }
            let gain = self.gain.data();
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for c in 0..d {
                dxh[c] = g[c] * gain[c];
                m1 = m1 + dxh[c];
                m2 = m2 + dxh[c] * xh[c];
            }
            m1 = m1 * inv_d;
            m2 = m2 * inv_d;
            let rs = cache.rstd[r];
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = rs * (dxh[c] - m1 - xh[c] * m2);
            }
        }
        dx
    }
}

/// Position-wise two-layer perceptron with tanh-approximated GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<T> {
    pub norm: Norm<T>,
    pub w1: Mat<T>,
    pub b1: Mat<T>,
    pub w2: Mat<T>,
    pub b2: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct FfnCache<T> {
    norm: NormCache<T>,
    xn: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

impl<T: Scalar> Ffn<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, mult: usize, rng: &mut R) -> Self {
        let h = d * mult;
        Ffn {
            norm: Norm::new(d),
            w1: Mat::randn(d, h, 1.0 / (d as f64).sqrt(), rng),
            b1: Mat::zeros(1, h),
            w2: Mat::randn(h, d, 1.0 / (h as f64).sqrt(), rng),
            b2: Mat::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat<T>| Mat::zeros(m.rows(), m.cols());
        Ffn {
            norm: self.norm.zeros_like(),
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
        }
    }

    /// `ffn(norm(x))`, without the residual.
    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, FfnCache<T>) {
        let (xn, norm) = self.norm.forward(x);
        let mut pre = xn.matmul(&self.w1);
        for r in 0..pre.rows() {
            for (v, &b) in pre.row_mut(r).iter_mut().zip(self.b1.data()) {
                *v = *v + b;
            }
        }
        let act = Mat::from_fn(pre.rows(), pre.cols(), |r, c| gelu(pre.get(r, c)).0);
        let mut out = act.matmul(&self.w2);
        for r in 0..out.rows() {
            for (v, &b) in out.row_mut(r).iter_mut().zip(self.b2.data()) {
                *v = *v + b;
            }
        }
        (out, FfnCache { norm, xn, pre, act })
    }

    pub fn backward(&self, cache: &FfnCache<T>, upstream: &Mat<T>, grads: &mut Ffn<T>) -> Mat<T> {
        matmul_tn_acc(&cache.act, upstream, &mut grads.w2);
        for r in 0..upstream.rows() {
            for (b, &g) in grads.b2.data_mut().iter_mut().zip(upstream.row(r)) {
                *b = *b + g;
            }
        }
        let mut dpre = upstream.matmul_t(&self.w2);
        for r in 0..dpre.rows() {
            for (c, v) in dpre.row_mut(r).iter_mut().enumerate() {
                *v = *v * gelu(cache.pre.get(r, c)).1;
            }
            for (b, &g) in grads.b1.data_mut().iter_mut().zip(dpre.row(r)) {
                *b = *b + g;
            }
        }
        matmul_tn_acc(&cache.xn, &dpre, &mut grads.w1);
        let dxn = dpre.matmul_t(&self.w1);
        self.norm.backward(&cache.norm, &dxn, &mut grads.norm)
    }
}

/// Mean cross-entropy (nats) of `logits` against `targets`, and its gradient.
pub fn cross_entropy<T: Scalar>(logits: &Mat<T>, targets: &[u32]) -> (f64, Mat<T>) {
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut grad = Mat::zeros(n, logits.cols());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t as usize].f64();
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[c].f64() - lse).exp();
            let ind = if c == t as usize { 1.0 } else { 0.0 };
            *g = T::of((p - ind) * inv_n);
        }
    }
    (total * inv_n, grad)
}
