//! Attention score mass and compute accounting for the global-attention
//! baseline, plus wall-time measurement of the three kernels.

use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{score_kernel, OpCounter};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::dataset::ToyDataset;
use crate::harness::train::encode_dataset;
use crate::model::{build_input_sequence, forward_cached, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::scan::{scan_sequence_counted, SsmParams};
use crate::schedule::{ScaleSchedule, SequenceLayout};
use crate::tensor::Mat;
use crate::tokenizer::TokenMapPyramid;

/// Intra-scale score mass of the reference 256×256 baseline.
pub const REFERENCE_INTRA_MASS: f64 = 0.796;
/// Intra-scale share of attention compute of the reference baseline.
pub const REFERENCE_INTRA_COMPUTE: f64 = 0.239;

#[derive(Clone, Debug, PartialEq)]
pub struct MassMeasurement {
    pub intra: f64,
    pub inter: f64,
    pub per_layer_intra: Vec<f64>,
}

/// Average share of softmax mass that stays inside the query's own block,
/// over every (example, layer, head, query) row.
pub fn measure_attention_mass<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &[(TokenMapPyramid, usize)],
) -> Result<MassMeasurement> {
    if !config.is_all_global() || config.n_layers == 0 {
        return Err(Error::InvalidArgument(
            "score mass is defined for models whose layers are all global attention".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty measurement batch".into()));
    }
    let layout = config.schedule.layout();
    let per_example: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|(pyr, class_id)| {
            let x = build_input_sequence(pyr, *class_id, params, config)?;
            let (_, cache) = forward_cached(&x, &layout, params, config, None)?;
            (0..config.n_layers)
                .map(|l| {
                    let attn = cache
                        .attention(l)
                        .ok_or_else(|| Error::InvalidArgument(format!("layer {l} ran no attention")))?;
                    layer_intra_mass(attn, &layout, config.n_heads)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let per_layer_intra: Vec<f64> = (0..config.n_layers)
        .map(|l| per_example.iter().map(|e| e[l]).sum::<f64>() / batch.len() as f64)
        .collect();
    let intra = per_layer_intra.iter().sum::<f64>() / config.n_layers as f64;
    Ok(MassMeasurement {
        intra,
        inter: 1.0 - intra,
        per_layer_intra,
    })
}

fn layer_intra_mass<T: Scalar>(
    attn: &crate::attention::AttnCache<T>,
    layout: &SequenceLayout,
    n_heads: usize,
) -> Result<f64> {
    let mut acc = 0.0;
    for q in 0..attn.n_queries() {
        let own = layout.block_range(layout.block_of_position(q)?);
        for h in 0..n_heads {
            let (p, keys) = attn.probs(q, h);
            let (mut intra, mut inter) = (0.0, 0.0);
            for (pv, k) in p.iter().zip(keys) {
                if own.contains(&k) {
                    intra += pv.f64();
                } else {
                    inter += pv.f64();
                }
            }
            let total = intra + inter;
            if (total - 1.0).abs() > 1e-4 {
                return Err(Error::NonFinite(format!("softmax row of query {q} sums to {total}")));
            }
            acc += intra / total;
        }
    }
    Ok(acc / (attn.n_queries() * n_heads) as f64)
}

/// Intra mass of a model whose softmax rows are uniform over their key range:
/// the mean over positions of `k_i / P_i`.
pub fn uniform_chance_intra_mass(layout: &SequenceLayout) -> f64 {
    let mut acc = 0.0;
    let mut seen = 0;
    for &k in &layout.block_lengths {
        seen += k;
        acc += (k * k) as f64 / seen as f64;
    }
    acc / layout.total_len as f64
}

/// Score-matrix multiply-accumulates (`QKᵀ` and `P·V`) of scale-causal
/// attention, split into `(intra, inter)`.
pub fn analytic_attention_flops(schedule: &ScaleSchedule, d: usize) -> (u64, u64) {
    let layout = schedule.layout();
    let (mut intra, mut total, mut prefix) = (0u64, 0u64, 0u64);
    for &k in &layout.block_lengths {
        let k = k as u64;
        prefix += k;
        intra += 2 * k * k * d as u64;
        total += 2 * k * prefix * d as u64;
    }
    (intra, total - intra)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    GlobalAttention,
    IntraAttention,
    InterScan,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::GlobalAttention, Kernel::IntraAttention, Kernel::InterScan];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::GlobalAttention => "global_attention",
            Kernel::IntraAttention => "intra_attention",
            Kernel::InterScan => "inter_scan",
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown kernel `{s}`")))
    }
}

/// Sequence shape a kernel is measured on.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelInput {
    /// One block of length `L` for global attention, 64-token blocks for
    /// intra attention, `L` steps for the scan.
    Length(usize),
    /// The layout of a schedule.
    Schedule(ScaleSchedule),
}

/// Block length used for intra attention on plain lengths.
pub const INTRA_BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelCost {
    pub kernel: Kernel,
    pub len: usize,
    pub ops: u64,
    pub median_ns: u64,
    pub min_ns: u64,
}

impl KernelCost {
    pub const CSV_HEADER: &'static str = "kernel,L,ops,median_ns,min_ns";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.kernel.name(),
            self.len,
            self.ops,
            self.median_ns,
            self.min_ns
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            warmup: 3,
            repeats: 11,
        }
    }
}

fn attention_ranges(kernel: Kernel, input: &KernelInput) -> (usize, Vec<Range<usize>>) {
    match (kernel, input) {
        (Kernel::GlobalAttention, KernelInput::Length(l)) => (*l, vec![0..*l; *l]),
        (Kernel::IntraAttention, KernelInput::Length(l)) => {
            let ranges = (0..*l)
                .map(|p| {
                    let start = p / INTRA_BLOCK * INTRA_BLOCK;
                    start..(start + INTRA_BLOCK).min(*l)
                })
                .collect();
            (*l, ranges)
        }
        (Kernel::GlobalAttention, KernelInput::Schedule(s)) => {
            let layout = s.layout();
            (layout.total_len, layout.scale_causal_ranges())
        }
        (_, KernelInput::Schedule(s)) => {
            let layout = s.layout();
            (layout.total_len, layout.block_diagonal_ranges())
        }
        (Kernel::InterScan, KernelInput::Length(l)) => (*l, Vec::new()),
    }
}

fn time_runs(timing: Timing, mut run: impl FnMut()) -> (u64, u64) {
    for _ in 0..timing.warmup {
        run();
    }
    let mut ns: Vec<u64> = (0..timing.repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            run();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    ns.sort_unstable();
    (ns[ns.len() / 2], ns[0])
}

/// Times `kernel` on seeded random `f32` inputs of width `d` and counts its
/// multiply-accumulates. Attention uses one head; the scan uses
/// `d_inner = 2d`, `N = 16`.
pub fn measured_kernel_cost(
    kernel: Kernel,
    input: &KernelInput,
    d: usize,
    timing: Timing,
    seed: u64,
) -> Result<KernelCost> {
    let (len, ranges) = attention_ranges(kernel, input);
    if len == 0 || d == 0 {
        return Err(Error::InvalidArgument("kernel inputs must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counter = OpCounter::new();
    let (median_ns, min_ns) = match kernel {
        Kernel::InterScan => {
            let params = SsmParams::<f32>::init(d, 2 * d, 16, None, &mut rng);
            let x = Mat::<f32>::randn(len, d, 1.0, &mut rng);
            scan_sequence_counted(&x, &params, Some(&counter))?;
            time_runs(timing, || {
                std::hint::black_box(scan_sequence_counted(&x, &params, None).unwrap());
            })
        }
        _ => {
            let q = Mat::<f32>::randn(len, d, 1.0, &mut rng);
            let k = Mat::<f32>::randn(len, d, 1.0, &mut rng);
            let v = Mat::<f32>::randn(len, d, 1.0, &mut rng);
            score_kernel(&q, &k, &v, 1, &ranges, Some(&counter));
            time_runs(timing, || {
                std::hint::black_box(score_kernel(&q, &k, &v, 1, &ranges, None));
            })
        }
    };
    Ok(KernelCost {
        kernel,
        len,
        ops: counter.get(),
        median_ns,
        min_ns,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    linear_fit(&logs).0
}

/// Least-squares `(slope, intercept, r²)` of `y` against `x`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub schedule: ScaleSchedule,
    pub d: usize,
    pub n_heads: usize,
    pub intra_score_mass: f64,
    pub inter_score_mass: f64,
    pub chance_intra_mass: f64,
    pub per_layer_intra_mass: Vec<f64>,
    pub intra_flops: u64,
    pub inter_flops: u64,
    pub intra_flops_frac: f64,
    pub inter_flops_frac: f64,
    pub reference_intra_mass: f64,
    pub reference_intra_compute: f64,
}

impl CostReport {
    /// Combines a mass measurement on `mass_schedule` with the analytic
    /// compute split of `schedule` at width `d`.
    pub fn new(
        mass: &MassMeasurement,
        mass_schedule: &ScaleSchedule,
        schedule: &ScaleSchedule,
        d: usize,
        n_heads: usize,
    ) -> Self {
        let (intra, inter) = analytic_attention_flops(schedule, d);
        let intra_frac = intra as f64 / (intra + inter) as f64;
        CostReport {
            schedule: schedule.clone(),
            d,
            n_heads,
            intra_score_mass: mass.intra,
            inter_score_mass: mass.inter,
            chance_intra_mass: uniform_chance_intra_mass(&mass_schedule.layout()),
            per_layer_intra_mass: mass.per_layer_intra.clone(),
            intra_flops: intra,
            inter_flops: inter,
            intra_flops_frac: intra_frac,
            inter_flops_frac: 1.0 - intra_frac,
            reference_intra_mass: REFERENCE_INTRA_MASS,
            reference_intra_compute: REFERENCE_INTRA_COMPUTE,
        }
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let layers: Vec<String> = self.per_layer_intra_mass.iter().map(|v| format!("{v:.6}")).collect();
        vec![
            ("schedule", self.schedule.to_string()),
            ("d", self.d.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("intra_score_mass", format!("{:.6}", self.intra_score_mass)),
            ("inter_score_mass", format!("{:.6}", self.inter_score_mass)),
            ("chance_intra_mass", format!("{:.6}", self.chance_intra_mass)),
            ("per_layer_intra_mass", layers.join(" ")),
            ("intra_flops", self.intra_flops.to_string()),
            ("inter_flops", self.inter_flops.to_string()),
            ("intra_flops_frac", format!("{:.6}", self.intra_flops_frac)),
            ("inter_flops_frac", format!("{:.6}", self.inter_flops_frac)),
            ("reference_intra_mass", self.reference_intra_mass.to_string()),
            ("reference_intra_compute", self.reference_intra_compute.to_string()),
        ]
    }

    /// One `key=value` per line.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn csv_header() -> String {
        let dummy = CostReport::new(
            &MassMeasurement {
                intra: 1.0,
                inter: 0.0,
                per_layer_intra: vec![],
            },
            &ScaleSchedule::tiny(),
            &ScaleSchedule::tiny(),
            1,
            1,
        );
        dummy.fields().iter().map(|(k, _)| *k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(_, v)| if v.contains(',') { format!("\"{v}\"") } else { v })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Measures score mass of a global-attention checkpoint on up to `max_batch`
/// images of `ds` and pairs it with the analytic split of `schedule`.
pub fn emit_cost_report(
    checkpoint: &Checkpoint,
    ds: &ToyDataset,
    schedule: &ScaleSchedule,
    max_batch: usize,
) -> Result<CostReport> {
    let examples = encode_dataset(&checkpoint.tokenizer, ds)?;
    let batch: Vec<(TokenMapPyramid, usize)> = examples
        .into_iter()
        .take(max_batch.max(1))
        .map(|e| (e.pyramid, e.class_id))
        .collect();
    let mass = measure_attention_mass(&checkpoint.params, &checkpoint.config, &batch)?;
    Ok(CostReport::new(
        &mass,
        &checkpoint.config.schedule,
        schedule,
        checkpoint.config.d,
        checkpoint.config.n_heads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_flops(sides: &[usize]) -> (u64, u64) {
        let k: Vec<u64> = sides.iter().map(|&s| (s * s) as u64).collect();
        let mut intra = 0;
        let mut total = 0;
        for i in 0..k.len() {
            intra += k[i] * k[i];
            for kj in &k[..=i] {
                total += k[i] * kj;
            }
        }
        (intra, total)
    }

    #[test]
    fn ten_step_split() {
        let s = ScaleSchedule::ten_step();
        let (bi, bt) = brute_flops(s.sides());
        assert_eq!((bi, bt), (110468, 286434));
        let (intra, inter) = analytic_attention_flops(&s, 1);
        assert_eq!(intra, 2 * bi);
        assert_eq!(intra + inter, 2 * bt);
        let (i2, e2) = analytic_attention_flops(&s, 2);
        assert_eq!((i2, e2), (2 * intra, 2 * inter));
        assert_eq!(analytic_attention_flops(&ScaleSchedule::new(vec![1]).unwrap(), 8).1, 0);
    }

    #[test]
    fn chance_mass_examples() {
        let l = ScaleSchedule::new(vec![1, 2]).unwrap().layout();
        assert!((uniform_chance_intra_mass(&l) - 0.84).abs() < 1e-12);
        let l = ScaleSchedule::new(vec![1]).unwrap().layout();
        assert_eq!(uniform_chance_intra_mass(&l), 1.0);
    }

    #[test]
    fn instrumented_counts_match_closed_form() {
        let t = Timing { warmup: 0, repeats: 1 };
        let s = ScaleSchedule::ten_step();
        let g = measured_kernel_cost(Kernel::GlobalAttention, &KernelInput::Schedule(s.clone()), 8, t, 0).unwrap();
        let i = measured_kernel_cost(Kernel::IntraAttention, &KernelInput::Schedule(s.clone()), 8, t, 0).unwrap();
        let (intra, inter) = analytic_attention_flops(&s, 8);
        assert_eq!(g.ops, intra + inter);
        assert_eq!(i.ops, intra);
        let a = measured_kernel_cost(Kernel::GlobalAttention, &KernelInput::Length(64), 8, t, 0).unwrap();
        let b = measured_kernel_cost(Kernel::GlobalAttention, &KernelInput::Length(128), 8, t, 0).unwrap();
        assert_eq!(b.ops, 4 * a.ops);
        let a = measured_kernel_cost(Kernel::InterScan, &KernelInput::Length(64), 8, t, 0).unwrap();
        let b = measured_kernel_cost(Kernel::InterScan, &KernelInput::Length(128), 8, t, 0).unwrap();
        assert_eq!(b.ops, 2 * a.ops);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [256.0, 512.0, 1024.0].iter().map(|&x: &f64| (x, 3.0 * x * x)).collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_sums() {
        let m = MassMeasurement {
            intra: 0.7,
            inter: 0.3,
            per_layer_intra: vec![0.6, 0.8],
        };
        let r = CostReport::new(&m, &ScaleSchedule::tiny(), &ScaleSchedule::ten_step(), 64, 1);
        assert!((r.intra_flops_frac + r.inter_flops_frac - 1.0).abs() < 1e-12);
        assert!(r.to_kv_string().contains("intra_flops_frac=0.385"));
        assert!(r.to_kv_string().contains("schedule=1,2,3,4,5,6,8,10,13,16\n"));
        assert!(r.csv_row().starts_with("\"1,2,3,4,5,6,8,10,13,16\",64,1,0.7"));
        assert_eq!(CostReport::csv_header().split(',').count(), 13);
    }
}
