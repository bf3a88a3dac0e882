//! Selective state-space scan over the concatenated multi-scale sequence.
//!
//! Per position `t` with input `u` (width `d`):
//!
//! ```text
//! [v, z] = u · W_in                       value and gate paths, width d_inner each
//! v      = conv(v)                        optional causal depthwise conv
//! Δ_c    = softplus(v · w_Δ + bias_c)
//! B, C   = v · W_B, v · W_C               width N
//! h'_cj  = exp(Δ_c·A_cj)·h_cj + Δ_c·B_j·v_c,   A = −exp(A_log)
//! y_c    = Σ_j C_j·h'_cj
//! out    = (y ⊙ silu(z)) · W_out
//! ```
//!
//! [`scan_sequence`] folds the step left to right. [`scan_sequence_parallel`]
//! computes the same states with an associative prefix scan over the affine
//! maps `h ↦ Ā·h + b`.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::OpCounter;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, silu, silu_grad, softplus, Scalar};
use crate::tensor::{axpy, dot, matmul_tn_acc, vecmat, Mat};

/// Causal depthwise convolution on the value path.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `d_inner × kernel`; column `k` multiplies the input `k` steps back.
    pub weight: Mat<T>,
    /// `1 × d_inner`.
    pub bias: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    /// `d × 2·d_inner`: value path then gate path.
    pub w_in: Mat<T>,
    /// `d_inner × N`, log of the negated diagonal state matrix.
    pub a_log: Mat<T>,
    pub w_b: Mat<T>,
    pub w_c: Mat<T>,
    /// `d_inner × 1` step projection.
    pub w_dt: Mat<T>,
    /// `1 × d_inner` per-channel step bias.
    pub dt_bias: Mat<T>,
    /// `d_inner × d`.
    pub w_out: Mat<T>,
    pub conv: Option<ConvParams<T>>,
}

impl<T: Scalar> SsmParams<T> {
    /// Standard initialization: `A = −(1..=N)` per channel and step biases
    /// giving `Δ` log-uniform in `[0.01, 0.1]`.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        d_inner: usize,
        state_dim: usize,
        conv_kernel: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let a_log = Mat::from_fn(d_inner, state_dim, |_, j| T::of(((j + 1) as f64).ln()));
        let dt_bias = Mat::from_fn(1, d_inner, |_, _| {
            let u: f64 = rng.random();
            let dt = (0.01f64.ln() + u * (0.1f64.ln() - 0.01f64.ln())).exp();
            // inverse softplus
            T::of(dt.exp_m1().ln())
        });
        let sd = 1.0 / (d as f64).sqrt();
        let si = 1.0 / (d_inner as f64).sqrt();
        SsmParams {
            w_in: Mat::randn(d, 2 * d_inner, sd, rng),
            a_log,
            w_b: Mat::randn(d_inner, state_dim, si, rng),
            w_c: Mat::randn(d_inner, state_dim, si, rng),
            w_dt: Mat::randn(d_inner, 1, 0.1 * si, rng),
            dt_bias,
            w_out: Mat::randn(d_inner, d, si, rng),
            conv: conv_kernel.map(|k| ConvParams {
                weight: Mat::randn(d_inner, k, 1.0 / (k as f64).sqrt(), rng),
                bias: Mat::zeros(1, d_inner),
            }),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat<T>| Mat::zeros(m.rows(), m.cols());
        SsmParams {
            w_in: z(&self.w_in),
            a_log: z(&self.a_log),
            w_b: z(&self.w_b),
            w_c: z(&self.w_c),
            w_dt: z(&self.w_dt),
            dt_bias: z(&self.dt_bias),
            w_out: z(&self.w_out),
            conv: self.conv.as_ref().map(|c| ConvParams {
                weight: z(&c.weight),
                bias: z(&c.bias),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let di = self.d_inner();
        let n = self.state_dim();
        let checks = [
            ("w_in", &self.w_in, (d, 2 * di)),
            ("a_log", &self.a_log, (di, n)),
            ("w_b", &self.w_b, (di, n)),
            ("w_c", &self.w_c, (di, n)),
            ("w_dt", &self.w_dt, (di, 1)),
            ("dt_bias", &self.dt_bias, (1, di)),
            ("w_out", &self.w_out, (di, d)),
        ];
        for (name, m, shape) in checks {
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if let Some(c) = &self.conv {
            if c.weight.rows() != di || c.weight.cols() == 0 || c.bias.shape() != (1, di) {
                return Err(Error::Shape("conv parameters do not match d_inner".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn d_inner(&self) -> usize {
        self.a_log.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.cols()
    }

    fn conv_kernel(&self) -> usize {
        self.conv.as_ref().map_or(0, |c| c.weight.cols())
    }

    /// Multiply-accumulates performed per scanned position.
    pub fn macs_per_step(&self) -> u64 {
        let (d, di, n) = (self.dim(), self.d_inner(), self.state_dim());
        let k = self.conv_kernel();
        // in-proj, conv, step proj, B and C, state update, readout, out-proj
        (2 * d * di + di * k + di + 2 * di * n + di * n + di * n + di * d) as u64
    }

    /// `A = −exp(A_log)`.
    fn a_matrix(&self) -> Vec<T> {
        self.a_log.data().iter().map(|&v| -v.exp()).collect()
    }
}

/// Recurrent state carried between positions; replaces a KV cache.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<T> {
    /// `d_inner × N`.
    pub h: Mat<T>,
    pub pos: usize,
    /// Pre-conv value vectors of the last `kernel − 1` positions, oldest first.
    conv_history: Vec<Vec<T>>,
}

impl<T: Scalar> ScanState<T> {
    pub fn zeros(params: &SsmParams<T>) -> Self {
        let k = params.conv_kernel();
        ScanState {
            h: Mat::zeros(params.d_inner(), params.state_dim()),
            pos: 0,
            conv_history: vec![vec![T::zero(); params.d_inner()]; k.saturating_sub(1)],
        }
    }
}

/// Input-dependent quantities of one position.
struct StepInputs<T> {
    v: Vec<T>,
    vc: Vec<T>,
    z: Vec<T>,
    pre: Vec<T>,
    delta: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
}

fn project_in<T: Scalar>(u: &[T], params: &SsmParams<T>) -> (Vec<T>, Vec<T>) {
    let di = params.d_inner();
    let mut vz = vec![T::zero(); 2 * di];
    vecmat(u, &params.w_in, &mut vz);
    let z = vz.split_off(di);
    (vz, z)
}

/// `history` holds the `kernel − 1` previous pre-conv values, oldest first.
fn apply_conv<T: Scalar>(v: &[T], history: &[Vec<T>], conv: &ConvParams<T>) -> Vec<T> {
    let k = conv.weight.cols();
    let mut out = conv.bias.data().to_vec();
    for (c, o) in out.iter_mut().enumerate() {
        let w = conv.weight.row(c);
        *o = *o + w[0] * v[c];
        for lag in 1..k {
            *o = *o + w[lag] * history[history.len() - lag][c];
        }
    }
    out
}

fn finish_inputs<T: Scalar>(v: Vec<T>, vc: Vec<T>, z: Vec<T>, params: &SsmParams<T>) -> StepInputs<T> {
    let n = params.state_dim();
    let s = dot(&vc, params.w_dt.data());
    let pre: Vec<T> = params.dt_bias.data().iter().map(|&b| s + b).collect();
    let delta = pre.iter().map(|&p| softplus(p)).collect();
    let mut b = vec![T::zero(); n];
    let mut c = vec![T::zero(); n];
    vecmat(&vc, &params.w_b, &mut b);
    vecmat(&vc, &params.w_c, &mut c);
    StepInputs {
        v,
        vc,
        z,
        pre,
        delta,
        b,
        c,
    }
}

/// `h ← Ā ⊙ h + Δ·B·v`, then the readout `y_c = Σ_j C_j h_cj`.
fn recur<T: Scalar>(inp: &StepInputs<T>, a: &[T], h: &mut [T], n: usize) -> Vec<T> {
    let di = inp.delta.len();
    let mut y = vec![T::zero(); di];
    for ch in 0..di {
        let dt = inp.delta[ch];
        let dv = dt * inp.vc[ch];
        let hrow = &mut h[ch * n..(ch + 1) * n];
        let arow = &a[ch * n..(ch + 1) * n];
        for j in 0..n {
            hrow[j] = (dt * arow[j]).exp() * hrow[j] + dv * inp.b[j];
        }
        y[ch] = dot(hrow, &inp.c);
    }
    y
}

fn gate_out<T: Scalar>(y: &[T], z: &[T], params: &SsmParams<T>, out: &mut [T]) {
    let gated: Vec<T> = y.iter().zip(z).map(|(&yc, &zc)| yc * silu(zc)).collect();
    vecmat(&gated, &params.w_out, out);
}

fn check_row<T: Scalar>(row: &[T], what: &str, pos: usize) -> Result<()> {
    if row.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at position {pos}")))
    }
}

/// Advances `state` by one position and returns the output vector.
pub fn scan_step<T: Scalar>(
    u: &[T],
    state: &ScanState<T>,
    params: &SsmParams<T>,
) -> Result<(Vec<T>, ScanState<T>)> {
    let mut next = state.clone();
    let y = scan_step_in_place(u, &mut next, params, &params.a_matrix(), None)?;
    Ok((y, next))
}

fn scan_step_in_place<T: Scalar>(
    u: &[T],
    state: &mut ScanState<T>,
    params: &SsmParams<T>,
    a: &[T],
    counter: Option<&OpCounter>,
) -> Result<Vec<T>> {
    if u.len() != params.dim() {
        return Err(Error::Shape(format!(
            "scan input of width {} against width {}",
            u.len(),
            params.dim()
        )));
    }
    check_row(u, "scan input", state.pos)?;
    let (v, z) = project_in(u, params);
    let vc = match &params.conv {
        Some(conv) => {
            let vc = apply_conv(&v, &state.conv_history, conv);
            if !state.conv_history.is_empty() {
                state.conv_history.remove(0);
                state.conv_history.push(v.clone());
            }
            vc
        }
        None => v.clone(),
    };
    let inp = finish_inputs(v, vc, z, params);
    let y = recur(&inp, a, state.h.data_mut(), params.state_dim());
    let mut out = vec![T::zero(); params.dim()];
    gate_out(&y, &inp.z, params, &mut out);
    check_row(state.h.data(), "scan state", state.pos)?;
    check_row(&out, "scan output", state.pos)?;
    if let Some(c) = counter {
        c.add(params.macs_per_step());
    }
    state.pos += 1;
    Ok(out)
}

/// Runs `x` through the scan starting from `state`, updating it in place.
pub fn scan_continue<T: Scalar>(
    x: &Mat<T>,
    state: &mut ScanState<T>,
    params: &SsmParams<T>,
    counter: Option<&OpCounter>,
) -> Result<Mat<T>> {
    let a = params.a_matrix();
    let mut out = Mat::zeros(x.rows(), params.dim());
    for t in 0..x.rows() {
        let y = scan_step_in_place(x.row(t), state, params, &a, counter)?;
        out.row_mut(t).copy_from_slice(&y);
    }
    Ok(out)
}

/// Sequential left-to-right scan from the zero state.
pub fn scan_sequence<T: Scalar>(x: &Mat<T>, params: &SsmParams<T>) -> Result<Mat<T>> {
    scan_sequence_counted(x, params, None)
}

pub fn scan_sequence_counted<T: Scalar>(
    x: &Mat<T>,
    params: &SsmParams<T>,
    counter: Option<&OpCounter>,
) -> Result<Mat<T>> {
    check_sequence(x, params)?;
    let mut state = ScanState::zeros(params);
    scan_continue(x, &mut state, params, counter)
}

fn check_sequence<T: Scalar>(x: &Mat<T>, params: &SsmParams<T>) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Shape("scan over an empty sequence".into()));
    }
    if x.cols() != params.dim() {
        return Err(Error::Shape(format!(
            "scan input of width {} against width {}",
            x.cols(),
            params.dim()
        )));
    }
    Ok(())
}

/// Step inputs for every position of `x` from the zero state.
fn all_inputs<T: Scalar>(x: &Mat<T>, params: &SsmParams<T>) -> Vec<StepInputs<T>> {
    let proj: Vec<(Vec<T>, Vec<T>)> = (0..x.rows())
        .into_par_iter()
        .map(|t| project_in(x.row(t), params))
        .collect();
    let di = params.d_inner();
    (0..x.rows())
        .into_par_iter()
        .map(|t| {
            let (v, z) = &proj[t];
            let vc = match &params.conv {
                Some(conv) => {
                    let k = conv.weight.cols();
                    let history: Vec<Vec<T>> = (1..k)
                        .rev()
                        .map(|lag| {
                            if t >= lag {
                                proj[t - lag].0.clone()
                            } else {
                                vec![T::zero(); di]
                            }
                        })
                        .collect();
                    apply_conv(v, &history, conv)
                }
                None => v.clone(),
            };
            finish_inputs(v.clone(), vc, z.clone(), params)
        })
        .collect()
}

/// Inclusive prefix scan of affine maps `h ↦ a⊙h + b`, each of width `width`,
/// stored back to back in `a` and `b`. Afterwards element `t` holds the
/// composition of elements `0..=t`.
pub fn affine_prefix_scan<T: Scalar>(a: &mut [T], b: &mut [T], width: usize) {
    let n = a.len() / width;
    if n <= 1 {
        return;
    }
    let half = n / 2;
    // combine neighbours: (a1,b1) then (a2,b2) is (a2·a1, a2·b1 + b2)
    let mut pa = vec![T::zero(); half * width];
    let mut pb = vec![T::zero(); half * width];
    pa.par_chunks_mut(width)
        .zip(pb.par_chunks_mut(width))
        .enumerate()
        .for_each(|(i, (ra, rb))| {
            let (l, r) = (2 * i * width, (2 * i + 1) * width);
            for k in 0..width {
                ra[k] = a[r + k] * a[l + k];
                rb[k] = a[r + k] * b[l + k] + b[r + k];
            }
        });
    affine_prefix_scan(&mut pa, &mut pb, width);
    // odd positions take the pair prefixes; even positions > 0 extend the
    // previous pair prefix by their own element
    a.par_chunks_mut(2 * width)
        .zip(b.par_chunks_mut(2 * width))
        .enumerate()
        .for_each(|(i, (ca, cb))| {
            if i > 0 {
                let p = (i - 1) * width;
                for k in 0..width {
                    let ea = ca[k];
                    cb[k] = ea * pb[p + k] + cb[k];
                    ca[k] = ea * pa[p + k];
                }
            }
            if ca.len() == 2 * width {
                let p = i * width;
                ca[width..].copy_from_slice(&pa[p..p + width]);
                cb[width..].copy_from_slice(&pb[p..p + width]);
            }
        });
}

/// Same contract as [`scan_sequence`], evaluated with [`affine_prefix_scan`].
pub fn scan_sequence_parallel<T: Scalar>(x: &Mat<T>, params: &SsmParams<T>) -> Result<Mat<T>> {
    check_sequence(x, params)?;
    for t in 0..x.rows() {
        check_row(x.row(t), "scan input", t)?;
    }
    let (di, n) = (params.d_inner(), params.state_dim());
    let width = di * n;
    let a_cont = params.a_matrix();
    let inputs = all_inputs(x, params);
    let l = x.rows();
    let mut a = vec![T::zero(); l * width];
    let mut b = vec![T::zero(); l * width];
    a.par_chunks_mut(width)
        .zip(b.par_chunks_mut(width))
        .zip(&inputs)
        .for_each(|((ra, rb), inp)| {
            for ch in 0..di {
                let dt = inp.delta[ch];
                let dv = dt * inp.vc[ch];
                for j in 0..n {
                    ra[ch * n + j] = (dt * a_cont[ch * n + j]).exp();
                    rb[ch * n + j] = dv * inp.b[j];
                }
            }
        });
    affine_prefix_scan(&mut a, &mut b, width);
    // from the zero state, h_t is the additive part of the prefix
    let rows: Vec<Vec<T>> = b
        .par_chunks(width)
        .zip(&inputs)
        .map(|(h, inp)| {
            let y: Vec<T> = (0..di).map(|ch| dot(&h[ch * n..(ch + 1) * n], &inp.c)).collect();
            let mut out = vec![T::zero(); params.dim()];
            gate_out(&y, &inp.z, params, &mut out);
            out
        })
        .collect();
    let mut out = Mat::zeros(l, params.dim());
    for (t, r) in rows.iter().enumerate() {
        check_row(r, "scan output", t)?;
        out.row_mut(t).copy_from_slice(r);
    }
    Ok(out)
}

/// Activations saved by [`scan_forward_cached`].
#[derive(Clone, Debug)]
pub struct ScanCache<T> {
    x: Mat<T>,
    v: Mat<T>,
    vc: Mat<T>,
    z: Mat<T>,
    pre: Mat<T>,
    delta: Mat<T>,
    b: Mat<T>,
    c: Mat<T>,
    /// States after each step, `L × (d_inner·N)`.
    h: Mat<T>,
    y: Mat<T>,
}

pub fn scan_forward_cached<T: Scalar>(
    x: &Mat<T>,
    params: &SsmParams<T>,
) -> Result<(Mat<T>, ScanCache<T>)> {
    check_sequence(x, params)?;
    let (di, n, l) = (params.d_inner(), params.state_dim(), x.rows());
    let a = params.a_matrix();
    let mut state = ScanState::zeros(params);
    let mut cache = ScanCache {
        x: x.clone(),
        v: Mat::zeros(l, di),
        vc: Mat::zeros(l, di),
        z: Mat::zeros(l, di),
        pre: Mat::zeros(l, di),
        delta: Mat::zeros(l, di),
        b: Mat::zeros(l, n),
        c: Mat::zeros(l, n),
        h: Mat::zeros(l, di * n),
        y: Mat::zeros(l, di),
    };
    let mut out = Mat::zeros(l, params.dim());
    for t in 0..l {
        let u = x.row(t);
        check_row(u, "scan input", t)?;
        let (v, z) = project_in(u, params);
        let vc = match &params.conv {
            Some(conv) => {
                let vc = apply_conv(&v, &state.conv_history, conv);
                if !state.conv_history.is_empty() {
                    state.conv_history.remove(0);
                    state.conv_history.push(v.clone());
                }
                vc
            }
            None => v.clone(),
        };
        let inp = finish_inputs(v, vc, z, params);
        let y = recur(&inp, &a, state.h.data_mut(), n);
        gate_out(&y, &inp.z, params, out.row_mut(t));
        check_row(out.row(t), "scan output", t)?;
        cache.v.row_mut(t).copy_from_slice(&inp.v);
        cache.vc.row_mut(t).copy_from_slice(&inp.vc);
        cache.z.row_mut(t).copy_from_slice(&inp.z);
        cache.pre.row_mut(t).copy_from_slice(&inp.pre);
        cache.delta.row_mut(t).copy_from_slice(&inp.delta);
        cache.b.row_mut(t).copy_from_slice(&inp.b);
        cache.c.row_mut(t).copy_from_slice(&inp.c);
        cache.h.row_mut(t).copy_from_slice(state.h.data());
        cache.y.row_mut(t).copy_from_slice(&y);
    }
    Ok((out, cache))
}

/// Reverse-time gradient of the scan. Returns `∂/∂x`; parameter gradients
/// are accumulated into `grads`.
pub fn scan_backward_cached<T: Scalar>(
    cache: &ScanCache<T>,
    params: &SsmParams<T>,
    upstream: &Mat<T>,
    grads: &mut SsmParams<T>,
) -> Result<Mat<T>> {
    let (di, n, l) = (params.d_inner(), params.state_dim(), cache.x.rows());
    if upstream.shape() != (l, params.dim()) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} against output ({l}, {})",
            upstream.shape(),
            params.dim()
        )));
    }
    let a = params.a_matrix();
    let mut d_a = vec![T::zero(); di * n];
    let mut dh_carry = vec![T::zero(); di * n];
    let mut dvc_all = Mat::zeros(l, di);
    let mut dz_all = Mat::zeros(l, di);
    let mut d_gated = vec![T::zero(); di];
    let mut gated = vec![T::zero(); di];
    let mut d_b = vec![T::zero(); n];
    let mut d_c = vec![T::zero(); n];
    let mut d_delta = vec![T::zero(); di];
    let zero_state = vec![T::zero(); di * n];
    for t in (0..l).rev() {
        let g = upstream.row(t);
        let z = cache.z.row(t);
        let y = cache.y.row(t);
        for ch in 0..di {
            gated[ch] = y[ch] * silu(z[ch]);
        }
        // out = gated · W_out
        for ch in 0..di {
            axpy(gated[ch], g, grads.w_out.row_mut(ch));
            d_gated[ch] = dot(g, params.w_out.row(ch));
        }
        let dz = dz_all.row_mut(t);
        let mut dy = vec![T::zero(); di];
        for ch in 0..di {
            dy[ch] = d_gated[ch] * silu(z[ch]);
            dz[ch] = d_gated[ch] * y[ch] * silu_grad(z[ch]);
        }
        let h = cache.h.row(t);
        let h_prev = if t > 0 { cache.h.row(t - 1) } else { &zero_state[..] };
        let b = cache.b.row(t);
        let c = cache.c.row(t);
        let delta = cache.delta.row(t);
        let vc = cache.vc.row(t);
        d_b.iter_mut().for_each(|v| *v = T::zero());
        d_c.iter_mut().for_each(|v| *v = T::zero());
        let dvc = dvc_all.row_mut(t);
        for ch in 0..di {
            let dt = delta[ch];
            let mut dd = T::zero();
            let mut dv = T::zero();
            for j in 0..n {
                let idx = ch * n + j;
                d_c[j] = d_c[j] + dy[ch] * h[idx];
                let dh = dy[ch] * c[j] + dh_carry[idx];
                let abar = (dt * a[idx]).exp();
                let dabar = dh * h_prev[idx] * abar;
                dd = dd + dabar * a[idx] + dh * b[j] * vc[ch];
                d_a[idx] = d_a[idx] + dabar * dt;
                d_b[j] = d_b[j] + dh * dt * vc[ch];
                dv = dv + dh * dt * b[j];
                dh_carry[idx] = dh * abar;
            }
            d_delta[ch] = dd;
            dvc[ch] = dv;
        }
        // Δ_c = softplus(vc·w_dt + bias_c)
        let pre = cache.pre.row(t);
        let mut ds = T::zero();
        for ch in 0..di {
            let dp = d_delta[ch] * sigmoid(pre[ch]);
            let bias = grads.dt_bias.data_mut();
            bias[ch] = bias[ch] + dp;
            ds = ds + dp;
        }
        axpy(ds, vc, grads.w_dt.data_mut());
        axpy(ds, params.w_dt.data(), dvc);
        // B = vc·W_B, C = vc·W_C
        for ch in 0..di {
            axpy(vc[ch], &d_b, grads.w_b.row_mut(ch));
            axpy(vc[ch], &d_c, grads.w_c.row_mut(ch));
            dvc[ch] = dvc[ch] + dot(params.w_b.row(ch), &d_b) + dot(params.w_c.row(ch), &d_c);
        }
    }
    // A = −exp(A_log), so ∂A/∂A_log = A
    for (g, (&da, &av)) in grads.a_log.data_mut().iter_mut().zip(d_a.iter().zip(&a)) {
        *g = *g + da * av;
    }
    let dv_all = match (&params.conv, grads.conv.as_mut()) {
        (Some(conv), Some(gconv)) => {
            let k = conv.weight.cols();
            let mut dv = Mat::zeros(l, di);
            for t in 0..l {
                let dvc = dvc_all.row(t);
                let gb = gconv.bias.data_mut();
                for ch in 0..di {
                    gb[ch] = gb[ch] + dvc[ch];
                }
                for lag in 0..k.min(t + 1) {
                    let src = t - lag;
                    for ch in 0..di {
                        let w = conv.weight.get(ch, lag);
                        let old = gconv.weight.get(ch, lag);
                        gconv.weight.set(ch, lag, old + dvc[ch] * cache.v.get(src, ch));
                        let cur = dv.get(src, ch);
                        dv.set(src, ch, cur + w * dvc[ch]);
                    }
                }
            }
            dv
        }
        _ => dvc_all,
    };
    let mut dvz = Mat::zeros(l, 2 * di);
    for t in 0..l {
        let row = dvz.row_mut(t);
        row[..di].copy_from_slice(dv_all.row(t));
        row[di..].copy_from_slice(dz_all.row(t));
    }
    matmul_tn_acc(&cache.x, &dvz, &mut grads.w_in);
    Ok(dvz.matmul_t(&params.w_in))
}

/// Returns `(∂/∂x, parameter gradients)` of [`scan_sequence`].
pub fn scan_backward<T: Scalar>(
    x: &Mat<T>,
    params: &SsmParams<T>,
    upstream: &Mat<T>,
) -> Result<(Mat<T>, SsmParams<T>)> {
    let (_, cache) = scan_forward_cached(x, params)?;
    let mut grads = params.zeros_like();
    let dx = scan_backward_cached(&cache, params, upstream, &mut grads)?;
    Ok((dx, grads))
}
