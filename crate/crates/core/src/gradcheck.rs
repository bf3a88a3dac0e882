//! Central finite-difference checks of every hand-written backward pass.
//!
//! The numeric side only ever calls forward functions, so it stays
//! independent of the analytic gradients it is compared against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_block, attend_block_backward, AttnParams};
use crate::error::Result;
use crate::model::{self, LayerMode, ModelConfig, ModelParams};
use crate::scan::{scan_backward, scan_sequence, SsmParams};
use crate::schedule::ScaleSchedule;
use crate::tensor::Mat;
use crate::tokenizer::TokenMapPyramid;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub suite: String,
    pub tensor: String,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.sum_sq().sqrt().max(b.sum_sq().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `tensor(p)`.
pub fn numeric_grad<P: Clone>(
    base: &P,
    tensor: impl Fn(&mut P) -> &mut Mat<f64>,
    f: impl Fn(&P) -> Result<f64>,
    step: f64,
) -> Result<Mat<f64>> {
    let mut p = base.clone();
    let (rows, cols) = tensor(&mut p).shape();
    let mut out = Mat::zeros(rows, cols);
    for i in 0..rows * cols {
        let orig = tensor(&mut p).data()[i];
        tensor(&mut p).data_mut()[i] = orig + step;
        let up = f(&p)?;
        tensor(&mut p).data_mut()[i] = orig - step;
        let down = f(&p)?;
        tensor(&mut p).data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

fn weighted_sum(out: &Mat<f64>, weights: &Mat<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Attention block, `m = 3`, `d = 4`, two heads; step `1e-4`, tolerance `1e-4`.
pub fn attention_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat::randn(3, 4, 1.0, &mut rng);
    let params = AttnParams::<f64>::init(4, 2, &mut rng);
    let g = Mat::randn(3, 4, 1.0, &mut rng);
    let (dx, grads) = attend_block_backward(&x, &params, &g)?;
    let (step, tol) = (1e-4, 1e-4);
    let suite = "attention_block";
    let mut reports = Vec::new();
    let loss = |x: &Mat<f64>, p: &AttnParams<f64>| Ok(weighted_sum(&attend_block(x, p)?, &g));
    let num = numeric_grad(&x, |x| x, |x| loss(x, &params), step)?;
    reports.push(report(suite, "x", &dx, &num, tol));
    type Pick = fn(&mut AttnParams<f64>) -> &mut Mat<f64>;
    let picks: [(&str, Pick, &Mat<f64>); 4] = [
        ("w_q", |p| &mut p.w_q, &grads.w_q),
        ("w_k", |p| &mut p.w_k, &grads.w_k),
        ("w_v", |p| &mut p.w_v, &grads.w_v),
        ("w_o", |p| &mut p.w_o, &grads.w_o),
    ];
    for (name, pick, analytic) in picks {
        let num = numeric_grad(&params, pick, |p| loss(&x, p), step)?;
        reports.push(report(suite, name, analytic, &num, tol));
    }
    Ok(reports)
}

/// Selective scan, `L = 4`, `d = 3`, `d_inner = 4`, `N = 2`; step `1e-5`,
/// tolerance `1e-4`.
pub fn scan_suite(seed: u64, conv_kernel: Option<usize>) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat::randn(4, 3, 1.0, &mut rng);
    let mut params = SsmParams::<f64>::init(3, 4, 2, conv_kernel, &mut rng);
    // larger step sizes than the default init so Δ-paths carry signal
    params.dt_bias = Mat::randn(1, 4, 0.5, &mut rng);
    params.w_dt = Mat::randn(4, 1, 0.5, &mut rng);
    let g = Mat::randn(4, 3, 1.0, &mut rng);
    let (dx, grads) = scan_backward(&x, &params, &g)?;
    let (step, tol) = (1e-5, 1e-4);
    let suite = if conv_kernel.is_some() { "scan_conv" } else { "scan" };
    let loss = |x: &Mat<f64>, p: &SsmParams<f64>| Ok(weighted_sum(&scan_sequence(x, p)?, &g));
    let mut reports = vec![report(
        suite,
        "x",
        &dx,
        &numeric_grad(&x, |x| x, |x| loss(x, &params), step)?,
        tol,
    )];
    type Pick = fn(&mut SsmParams<f64>) -> &mut Mat<f64>;
    let mut picks: Vec<(&str, Pick, &Mat<f64>)> = vec![
        ("w_in", |p| &mut p.w_in, &grads.w_in),
        ("a_log", |p| &mut p.a_log, &grads.a_log),
        ("w_b", |p| &mut p.w_b, &grads.w_b),
        ("w_c", |p| &mut p.w_c, &grads.w_c),
        ("w_dt", |p| &mut p.w_dt, &grads.w_dt),
        ("dt_bias", |p| &mut p.dt_bias, &grads.dt_bias),
        ("w_out", |p| &mut p.w_out, &grads.w_out),
    ];
    if let Some(c) = &grads.conv {
        picks.push(("conv.weight", |p| &mut p.conv.as_mut().unwrap().weight, &c.weight));
        picks.push(("conv.bias", |p| &mut p.conv.as_mut().unwrap().bias, &c.bias));
    }
    for (name, pick, analytic) in picks {
        let num = numeric_grad(&params, pick, |p| loss(&x, p), step)?;
        reports.push(report(suite, name, analytic, &num, tol));
    }
    Ok(reports)
}

/// The small model used by the model-level check: schedule `[1, 2]`, width 8,
/// one layer.
pub fn tiny_check_config(mode: LayerMode, conv_kernel: usize, ffn_mult: usize) -> ModelConfig {
    let mut c = ModelConfig::with_shape(ScaleSchedule::new(vec![1, 2]).unwrap(), 8, 1, 6, 3);
    c.n_heads = 2;
    c.d_inner = 8;
    c.state_dim = 3;
    c.layer_modes = vec![mode];
    c.conv_kernel = conv_kernel;
    c.ffn_mult = ffn_mult;
    c.seed = 11;
    c
}

/// Every parameter tensor of a model against central differences at `f64`;
/// step `1e-5`, tolerance `1e-5`.
pub fn model_suite(config: &ModelConfig, label: &str) -> Result<Vec<CheckReport>> {
    let mut params = ModelParams::<f64>::init(config)?;
    // move the step biases up so the Δ paths are well conditioned
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    for l in &mut params.layers {
        l.ssm.dt_bias = Mat::randn(1, config.d_inner, 0.5, &mut rng);
        l.ssm.w_dt = Mat::randn(config.d_inner, 1, 0.3, &mut rng);
    }
    params.head = Mat::randn(config.d, config.vocab, 0.5, &mut rng);
    let maps = config
        .schedule
        .sides()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            (0..s * s)
                .map(|k| ((3 * i + 5 * k + 1) % config.vocab) as u32)
                .collect()
        })
        .collect();
    let pyramid = TokenMapPyramid::new(config.schedule.clone(), maps)?;
    let class_id = config.n_classes - 1;
    let analytic = model::loss(&pyramid, class_id, &params, config)?.grads;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Mat<f64>> = analytic.tensors().into_iter().map(|(_, m)| m.clone()).collect();
    let f = |p: &ModelParams<f64>| model::eval_loss(&pyramid, class_id, p, config).map(|(l, _)| l);
    let mut reports = Vec::new();
    for (k, (name, a)) in names.iter().zip(&analytic).enumerate() {
        let num = numeric_grad(&params, |p| p.tensors_mut().swap_remove(k), f, 1e-5)?;
        reports.push(report(label, name, a, &num, 1e-5));
    }
    Ok(reports)
}

fn report(suite: &str, tensor: &str, analytic: &Mat<f64>, numeric: &Mat<f64>, tol: f64) -> CheckReport {
    CheckReport {
        suite: suite.to_string(),
        tensor: tensor.to_string(),
        rel_error: relative_error(analytic, numeric),
        tolerance: tol,
    }
}

/// Every suite: kernels plus the small model in each layer mode, with the
/// optional conv and feed-forward sublayers, and with cumulative inputs.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = attention_suite(seed)?;
    out.extend(scan_suite(seed, None)?);
    out.extend(scan_suite(seed, Some(3))?);
    out.extend(model_suite(&tiny_check_config(LayerMode::Decoupled, 0, 0), "model_decoupled")?);
    out.extend(model_suite(&tiny_check_config(LayerMode::GlobalAttention, 0, 0), "model_global")?);
    out.extend(model_suite(&tiny_check_config(LayerMode::Decoupled, 2, 2), "model_conv_ffn")?);
    let mut cumulative = tiny_check_config(LayerMode::GlobalAttention, 0, 0);
    cumulative.schedule = ScaleSchedule::new(vec![1, 2, 3]).unwrap();
    cumulative.cumulative_input = true;
    out.extend(model_suite(&cumulative, "model_cumulative")?);
    Ok(out)
}
