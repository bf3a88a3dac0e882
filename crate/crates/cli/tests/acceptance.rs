//! Acceptance criteria 1-10, run in order by a single driver. Each criterion
//! prints one `PASS`/`FAIL` line to stderr; the test fails if any criterion does.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvar_core::attention::{attend_sequence, AttnParams};
use mvar_core::cost::{
    analytic_attention_flops, linear_fit, loglog_slope, measure_attention_mass, measured_kernel_cost,
    uniform_chance_intra_mass, Kernel, KernelInput, Timing, INTRA_BLOCK, REFERENCE_INTRA_COMPUTE,
    REFERENCE_INTRA_MASS,
};
use mvar_core::gradcheck;
use mvar_core::harness::config::TrainConfig;
use mvar_core::harness::eval::fidelity_hits;
use mvar_core::harness::train::{argmax_accuracy, mean_nll, optimize, Example, Schedule};
use mvar_core::harness::{generate_toy_dataset, train_in_memory, ToyDataset, TrainRun};
use mvar_core::image::Image;
use mvar_core::model::{build_input_sequence, forward, streaming_logits};
use mvar_core::scan::{scan_sequence, scan_sequence_parallel, SsmParams};
use mvar_core::schedule::Grid;
use mvar_core::tokenizer::{decode_multiscale, encode_multiscale, residual_energy};
use mvar_core::{Codebook, LayerMode, Mat, ModelParams, ScaleSchedule, TokenMapPyramid};

/// Elementwise tolerance of every float32 equivalence check, relative to
/// `max(1, |reference|)`.
const EQUIV_TOL: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;
const SCAN_SLOPE: (f64, f64) = (0.85, 1.15);
const ATTENTION_SLOPE: (f64, f64) = (1.8, 2.2);
const SLOPE_LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];
const SLOPE_WIDTH: usize = 32;
const MIN_INTER_COMPUTE: f64 = 0.60;
const MIN_MASS_MARGIN: f64 = 0.10;
const NLL_FRACTION_OF_LN_V: f64 = 0.5;
const TRAIN_STEPS: usize = 200;
const OVERFIT_SAMPLES: usize = 4;
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_CHECK_EVERY: usize = 25;
const FIDELITY_SAMPLES: usize = 64;
const MIN_FIDELITY: f64 = 0.375;
const CANDIDATES: [usize; 3] = [1, 4, 16];
const BOOTSTRAP_RESAMPLES: usize = 2000;
const BOOTSTRAP_LEVEL: f64 = 0.95;
/// Val-NLL differences below this count as flat in the replacement sweep.
const FLAT_NLL: f64 = 0.02;
/// The ablation task: more images per class than the default run, so val NLL
/// measures generalization rather than memorization.
const ABLATION_SAMPLES_PER_CLASS: usize = 16;
const ABLATION_SEEDS: [u64; 2] = [0, 1];
const RESIDUAL_INPUTS: usize = 100;
const ROUND_TRIP_CASES: usize = 20;

const BUDGET_1: Duration = Duration::from_secs(10);
const BUDGET_2: Duration = Duration::from_secs(30);
const BUDGET_3: Duration = Duration::from_secs(60);
const BUDGET_5: Duration = Duration::from_secs(300);
const BUDGET_7: Duration = Duration::from_secs(600);

struct Outcome {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn report(o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{tag} [{:>2}] {}: {}", o.id, o.title, o.detail);
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

fn max_rel_err<T: mvar_core::Scalar>(got: &Mat<T>, want: &Mat<T>) -> f64 {
    got.data()
        .iter()
        .zip(want.data())
        .map(|(g, w)| rel_err(g.f64(), w.f64()))
        .fold(0.0, f64::max)
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Dense softmax attention in f64 with a boolean mask over all position pairs.
fn dense_masked_attention(x: &Mat<f32>, p: &AttnParams<f32>, allowed: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    let (l, d) = x.shape();
    let hd = d / p.n_heads;
    let project = |w: &Mat<f32>| -> Vec<Vec<f64>> {
        (0..l)
            .map(|i| {
                (0..d)
                    .map(|c| (0..d).map(|k| x.get(i, k) as f64 * w.get(k, c) as f64).sum())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (project(&p.w_q), project(&p.w_k), project(&p.w_v));
    let mut mixed = vec![vec![0.0; d]; l];
    for h in 0..p.n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..l {
            let logits: Vec<Option<f64>> = (0..l)
                .map(|j| {
                    allowed(i, j).then(|| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                })
                .collect();
            let top = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|s| s.map_or(0.0, |s| (s - top).exp())).collect();
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                mixed[i][c] = (0..l).map(|j| w[j] / z * v[j][c]).sum();
            }
        }
    }
    (0..l)
        .map(|i| {
            (0..d)
                .map(|c| (0..d).map(|k| mixed[i][k] * p.w_o.get(k, c) as f64).sum())
                .collect()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut over = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=5);
        let mut pool: Vec<usize> = (2..=6).collect();
        pool.shuffle(&mut rng);
        let mut sides = vec![1];
        sides.extend(pool.into_iter().take(n - 1));
        sides.sort_unstable();
        let layout = ScaleSchedule::new(sides).unwrap().layout();
        let d = [4, 8, 16, 32][rng.random_range(0..4)];
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let x = Mat::<f32>::randn(layout.total_len, d, 1.0, &mut rng);
        let p = AttnParams::<f32>::init(d, heads, &mut rng);
        let got = attend_sequence(&x, &layout, &p).unwrap();
        let want = dense_masked_attention(&x, &p, |i, j| {
            layout.block_of_position(i).unwrap() == layout.block_of_position(j).unwrap()
        });
        let mut case_err: f64 = 0.0;
        for (i, row) in want.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                case_err = case_err.max(rel_err(got.get(i, c) as f64, w));
            }
        }
        over += usize::from(case_err > EQUIV_TOL);
        worst = worst.max(case_err);
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 1,
        title: "block-diagonal attention vs dense masked oracle",
        pass: over == 0 && elapsed < BUDGET_1,
        detail: format!(
            "50 cases, {over} above {EQUIV_TOL:e}, max err {worst:.2e}, {} (budget {})",
            secs(elapsed),
            secs(BUDGET_1)
        ),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut over = 0;
    let mut trials = 0;
    for l in [1, 2, 17, 64, 680, 4096] {
        for _ in 0..20 {
            let p = SsmParams::<f32>::init(8, 16, 16, None, &mut rng);
            let x = Mat::<f32>::randn(l, 8, 1.0, &mut rng);
            let seq = scan_sequence(&x, &p).unwrap();
            let par = scan_sequence_parallel(&x, &p).unwrap();
            let e = max_rel_err(&par, &seq);
            over += usize::from(e > EQUIV_TOL);
            worst = worst.max(e);
            trials += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 2,
        title: "sequential vs parallel scan",
        pass: over == 0 && elapsed < BUDGET_2,
        detail: format!(
            "{trials} trials over L in {{1,2,17,64,680,4096}}, {over} above {EQUIV_TOL:e}, max err {worst:.2e}, {} (budget {})",
            secs(elapsed),
            secs(BUDGET_2)
        ),
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck::run_all(3).unwrap();
    let tiny: Vec<_> = reports.iter().filter(|r| r.suite == "model_decoupled").collect();
    let tiny_cfg = gradcheck::tiny_check_config(LayerMode::Decoupled, 0, 0);
    let tiny_shape = tiny_cfg.schedule.sides() == [1, 2] && tiny_cfg.d == 8 && tiny_cfg.n_layers == 1;
    let n_tensors = ModelParams::<f64>::init(&tiny_cfg).unwrap().tensors().len();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| r.rel_error > GRAD_TOL)
        .map(|r| format!("{}/{} ({:.1e})", r.suite, r.tensor, r.rel_error))
        .collect();
    let worst = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let cli = Command::new(env!("CARGO_BIN_EXE_mvar"))
        .arg("gradcheck")
        .output()
        .expect("spawn mvar");
    let elapsed = start.elapsed();
    Outcome {
        id: 3,
        title: "finite-difference gradient checks",
        pass: failed.is_empty()
            && tiny_shape
            && tiny.len() == n_tensors
            && cli.status.code() == Some(0)
            && elapsed < BUDGET_3,
        detail: format!(
            "{} checks ({} tensors of the [1,2] d=8 one-layer model), failed {:?}, max rel err {worst:.2e} (tol {GRAD_TOL:e}), `mvar gradcheck` exit {:?}, {} (budget {})",
            reports.len(),
            tiny.len(),
            failed,
            cli.status.code(),
            secs(elapsed),
            secs(BUDGET_3)
        ),
    }
}

struct Trained {
    cfg: TrainConfig,
    val: ToyDataset,
    decoupled: TrainRun,
    decoupled_time: Duration,
    global: TrainRun,
    ablation: Vec<Ablation>,
}

/// One seed of the ablation task: every variant trained on the same data.
struct Ablation {
    seed: u64,
    decoupled: TrainRun,
    attention_only: TrainRun,
    global: TrainRun,
    half: TrainRun,
}

fn tiny_config() -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg");
    TrainConfig::load(Some(&path), &[]).unwrap()
}

fn datasets(cfg: &TrainConfig) -> (ToyDataset, ToyDataset) {
    let side = cfg.image_side();
    let n = cfg.model.n_classes;
    (
        generate_toy_dataset(n, cfg.samples_per_class, side, cfg.seed).unwrap(),
        generate_toy_dataset(n, cfg.val_samples_per_class, side, cfg.seed + 1).unwrap(),
    )
}

fn with_modes(cfg: &TrainConfig, modes: Vec<LayerMode>, scan: bool) -> TrainConfig {
    let mut c = cfg.clone();
    c.model.layer_modes = modes;
    c.model.scan_enabled = scan;
    c
}

fn train_all() -> Trained {
    let cfg = tiny_config();
    let n = cfg.model.n_layers;
    let (train_ds, val) = datasets(&cfg);
    let start = Instant::now();
    let decoupled = train_in_memory(&cfg, &train_ds, Some(&val), None).unwrap();
    let decoupled_time = start.elapsed();
    let global_cfg = with_modes(&cfg, vec![LayerMode::GlobalAttention; n], false);
    let global = train_in_memory(&global_cfg, &train_ds, Some(&val), None).unwrap();

    let mut half_modes = vec![LayerMode::GlobalAttention; n];
    half_modes[..n / 2].fill(LayerMode::Decoupled);
    let ablation = ABLATION_SEEDS
        .iter()
        .map(|&seed| {
            let mut base = cfg.clone();
            base.samples_per_class = ABLATION_SAMPLES_PER_CLASS;
            base.seed = seed;
            let (tr, va) = datasets(&base);
            let run = |c: &TrainConfig| train_in_memory(c, &tr, Some(&va), None).unwrap();
            Ablation {
                seed,
                decoupled: run(&base),
                attention_only: run(&with_modes(&base, vec![LayerMode::Decoupled; n], false)),
                global: run(&with_modes(&base, vec![LayerMode::GlobalAttention; n], false)),
                half: run(&with_modes(&base, half_modes.clone(), true)),
            }
        })
        .collect();
    Trained {
        cfg,
        val,
        decoupled,
        decoupled_time,
        global,
        ablation,
    }
}

fn criterion_4(t: &Trained) -> Outcome {
    let mut pairs = 0;
    let mut leaks = Vec::new();
    let mut inert = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for run in [&t.decoupled, &t.global] {
        let ck = &run.checkpoint;
        let layout = ck.config.schedule.layout();
        let ex = &run.train[0];
        let x = build_input_sequence(&ex.pyramid, ex.class_id, &ck.params, &ck.config).unwrap();
        let base = forward(&x, &layout, &ck.params, &ck.config).unwrap();
        for j in 0..layout.n_blocks() {
            let mut y = x.clone();
            for r in layout.block_range(j) {
                for v in y.row_mut(r) {
                    *v += rng.random_range(-1.0f32..1.0);
                }
            }
            let moved = forward(&y, &layout, &ck.params, &ck.config).unwrap();
            for i in 0..j {
                pairs += 1;
                let r = layout.block_range(i);
                if base.slice_rows(r.start, r.end) != moved.slice_rows(r.start, r.end) {
                    leaks.push((i, j));
                }
            }
            let own = layout.block_range(j);
            if base.slice_rows(own.start, own.end) == moved.slice_rows(own.start, own.end) {
                inert += 1;
            }
        }
    }
    let mut worst: f64 = 0.0;
    let a = &t.ablation[0];
    let runs = [&t.decoupled, &t.global, &a.half, &a.attention_only];
    for case in 0..10 {
        let ck = &runs[case % runs.len()].checkpoint;
        let maps = ck
            .config
            .schedule
            .sides()
            .iter()
            .map(|&s| (0..s * s).map(|_| rng.random_range(0..ck.config.vocab as u32)).collect())
            .collect();
        let pyr = TokenMapPyramid::new(ck.config.schedule.clone(), maps).unwrap();
        let class_id = rng.random_range(0..ck.config.n_classes);
        let x = build_input_sequence(&pyr, class_id, &ck.params, &ck.config).unwrap();
        let full = forward(&x, &ck.config.schedule.layout(), &ck.params, &ck.config).unwrap();
        let stream = streaming_logits(&pyr, class_id, &ck.params, &ck.config).unwrap();
        worst = worst.max(max_rel_err(&stream, &full));
    }
    Outcome {
        id: 4,
        title: "scale causality and streaming inference",
        pass: leaks.is_empty() && pairs == 12 && worst <= EQUIV_TOL,
        detail: format!(
            "(a) {pairs} (i<j) block pairs over decoupled and global models, leaks {leaks:?}, perturbations with no own-block effect {inert}; (b) 10 cases, streaming vs full max err {worst:.2e} (tol {EQUIV_TOL:e})"
        ),
    }
}

/// `(Σ kᵢ², Σ kᵢ·Pᵢ)` for block lengths `kᵢ = sᵢ²` and prefix lengths `Pᵢ`.
fn block_sums(sides: &[usize]) -> (u64, u64) {
    let (mut sq, mut causal, mut prefix) = (0, 0, 0);
    for &s in sides {
        let k = (s * s) as u64;
        prefix += k;
        sq += k * k;
        causal += k * prefix;
    }
    (sq, causal)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let d = SLOPE_WIDTH as u64;
    let timing = Timing::default();
    let mut mismatches = Vec::new();
    let mut series = |kernel: Kernel| -> Vec<(f64, f64)> {
        SLOPE_LENGTHS
            .iter()
            .map(|&l| {
                let c = measured_kernel_cost(kernel, &KernelInput::Length(l), SLOPE_WIDTH, timing, 5).unwrap();
                let l = l as u64;
                let di = 2 * d;
                let expected = match kernel {
                    Kernel::GlobalAttention => 2 * l * l * d,
                    Kernel::IntraAttention => 2 * (l / INTRA_BLOCK as u64) * (INTRA_BLOCK as u64).pow(2) * d,
                    Kernel::InterScan => l * (3 * d * di + di + 4 * di * 16),
                };
                if c.ops != expected {
                    mismatches.push(format!("{}@{l}: {} vs {expected}", kernel.name(), c.ops));
                }
                (l as f64, c.median_ns as f64)
            })
            .collect()
    };
    let scan = series(Kernel::InterScan);
    let global = series(Kernel::GlobalAttention);
    let intra = series(Kernel::IntraAttention);

    let ten = ScaleSchedule::ten_step();
    let (sq, causal) = block_sums(ten.sides());
    let once = Timing { warmup: 0, repeats: 1 };
    for (kernel, expected) in [(Kernel::GlobalAttention, 2 * causal * d), (Kernel::IntraAttention, 2 * sq * d)] {
        let c = measured_kernel_cost(kernel, &KernelInput::Schedule(ten.clone()), SLOPE_WIDTH, once, 5).unwrap();
        if c.ops != expected {
            mismatches.push(format!("{} on ten-step: {} vs {expected}", kernel.name(), c.ops));
        }
    }
    if analytic_attention_flops(&ten, SLOPE_WIDTH) != (2 * sq * d, 2 * (causal - sq) * d) {
        mismatches.push("analytic split".into());
    }

    let fit = |pts: &[(f64, f64)]| {
        let logs: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
        (loglog_slope(pts), linear_fit(&logs).2)
    };
    let (s_scan, r_scan) = fit(&scan);
    let (s_global, r_global) = fit(&global);
    let (s_intra, r_intra) = fit(&intra);
    let in_range = |s: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&s);
    let elapsed = start.elapsed();
    Outcome {
        id: 5,
        title: "complexity: measured scaling and exact op counts",
        pass: in_range(s_scan, SCAN_SLOPE)
            && in_range(s_global, ATTENTION_SLOPE)
            && mismatches.is_empty()
            && elapsed < BUDGET_5,
        detail: format!(
            "log-log slope scan {s_scan:.3} (r2 {r_scan:.3}, need {SCAN_SLOPE:?}), global attention {s_global:.3} (r2 {r_global:.3}, need {ATTENTION_SLOPE:?}), intra attention {s_intra:.3} (r2 {r_intra:.3}, reported); op-count mismatches {mismatches:?}; {} (budget {})",
            secs(elapsed),
            secs(BUDGET_5)
        ),
    }
}

fn criterion_6(t: &Trained) -> Outcome {
    let ten = ScaleSchedule::ten_step();
    let (sq, causal) = block_sums(ten.sides());
    let derived = 1.0 - 110_468.0 / 286_434.0;
    let inter_frac = 1.0 - sq as f64 / causal as f64;
    let (a_intra, a_inter) = analytic_attention_flops(&ten, 64);
    let analytic_frac = a_inter as f64 / (a_intra + a_inter) as f64;

    let ck = &t.global.checkpoint;
    let batch: Vec<(TokenMapPyramid, usize)> =
        t.global.train.iter().map(|e| (e.pyramid.clone(), e.class_id)).collect();
    let mass = measure_attention_mass(&ck.params, &ck.config, &batch).unwrap();
    let sides = ck.config.schedule.sides();
    let (mut acc, mut prefix) = (0.0, 0usize);
    for &s in sides {
        let k = s * s;
        prefix += k;
        acc += (k * k) as f64 / prefix as f64;
    }
    let chance = acc / prefix as f64;
    let chance_lib = uniform_chance_intra_mass(&ck.config.schedule.layout());
    let layers: Vec<String> = mass.per_layer_intra.iter().map(|m| format!("{m:.3}")).collect();
    Outcome {
        id: 6,
        title: "intra/inter split of compute and attention mass",
        pass: inter_frac >= MIN_INTER_COMPUTE
            && (inter_frac - derived).abs() < 1e-12
            && (analytic_frac - derived).abs() < 1e-12
            && (chance - chance_lib).abs() < 1e-12
            && mass.intra >= chance + MIN_MASS_MARGIN,
        detail: format!(
            "analytic inter compute {:.1}% on [{}] (need >= {:.0}%, sums {sq}/{causal}); trained global baseline intra mass {:.3} (per layer [{}]) vs chance {chance:.3} on [{}], need >= {:.3}; reference values intra mass {REFERENCE_INTRA_MASS}, intra compute {REFERENCE_INTRA_COMPUTE} (reported only)",
            100.0 * inter_frac,
            ten,
            100.0 * MIN_INTER_COMPUTE,
            mass.intra,
            layers.join(" "),
            ck.config.schedule,
            chance + MIN_MASS_MARGIN
        ),
    }
}

fn criterion_7(t: &Trained) -> Outcome {
    let ln_v = (t.cfg.model.vocab as f64).ln();
    let nll = t.decoupled.final_train_nll;
    let cfg = &t.cfg;

    let start = Instant::now();
    let mut picked: Vec<Example> = Vec::new();
    for e in &t.decoupled.train {
        if picked.len() < OVERFIT_SAMPLES && picked.iter().all(|p| p.class_id != e.class_id) {
            picked.push(e.clone());
        }
    }
    let mut params = ModelParams::<f32>::init(&cfg.model).unwrap();
    let sched = Schedule {
        steps: OVERFIT_STEPS,
        batch_size: OVERFIT_SAMPLES,
        eval_interval: OVERFIT_CHECK_EVERY,
        ..Schedule::from(cfg)
    };
    let mut reached = None;
    let mut last_acc = 0.0;
    optimize(&mut params, &cfg.model, &sched, &picked, &[], |row, p| {
        last_acc = argmax_accuracy(p, &cfg.model, &picked)?;
        if last_acc == 1.0 && reached.is_none() {
            reached = Some(row.step);
        }
        Ok(())
    })
    .unwrap();
    let elapsed = t.decoupled_time + start.elapsed();
    Outcome {
        id: 7,
        title: "learning: train NLL and small-set overfit",
        pass: cfg.steps == TRAIN_STEPS
            && nll <= NLL_FRACTION_OF_LN_V * ln_v
            && reached.is_some()
            && elapsed < BUDGET_7,
        detail: format!(
            "train NLL {nll:.3} after {} steps (need <= {:.3}); {OVERFIT_SAMPLES}-sample argmax accuracy 100% first at step {reached:?} of {OVERFIT_STEPS} (final {:.1}%); {} (budget {})",
            cfg.steps,
            NLL_FRACTION_OF_LN_V * ln_v,
            100.0 * last_acc,
            secs(elapsed),
            secs(BUDGET_7)
        ),
    }
}

/// Percentile interval of the paired mean difference `b − a`.
fn bootstrap_diff(a: &[bool], b: &[bool], rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = a.len();
    let mut diffs: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let mut s = 0i64;
            for _ in 0..n {
                let i = rng.random_range(0..n);
                s += b[i] as i64 - a[i] as i64;
            }
            s as f64 / n as f64
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let tail = (1.0 - BOOTSTRAP_LEVEL) / 2.0;
    let at = |q: f64| diffs[((q * (BOOTSTRAP_RESAMPLES - 1) as f64).round()) as usize];
    (at(tail), at(1.0 - tail))
}

fn criterion_8(t: &Trained) -> Outcome {
    let ck = &t.decoupled.checkpoint;
    let colors = t.val.class_mean_colors();
    let sampling = t.cfg.sampling(t.cfg.seed);
    let hits: Vec<Vec<bool>> = CANDIDATES
        .iter()
        .map(|&n| fidelity_hits(&ck.params, &ck.config, &ck.tokenizer, &colors, FIDELITY_SAMPLES, n, &sampling).unwrap())
        .collect();
    let rate = |h: &[bool]| h.iter().filter(|&&x| x).count() as f64 / h.len() as f64;
    let rates: Vec<f64> = hits.iter().map(|h| rate(h)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let intervals: Vec<(f64, f64)> = hits.windows(2).map(|w| bootstrap_diff(&w[0], &w[1], &mut rng)).collect();
    let chance = 1.0 / ck.config.n_classes as f64;
    let mut detail = format!(
        "fidelity {:.3} at n=1 over {FIDELITY_SAMPLES} samples (need >= {MIN_FIDELITY}, chance {chance:.3}); by n_candidates",
        rates[0]
    );
    for (n, r) in CANDIDATES.iter().zip(&rates) {
        write!(detail, " {n}:{r:.3}").unwrap();
    }
    for (w, (lo, hi)) in CANDIDATES.windows(2).zip(&intervals) {
        write!(detail, "; {}->{} diff {:.0}% CI [{lo:+.3}, {hi:+.3}]", w[0], w[1], 100.0 * BOOTSTRAP_LEVEL).unwrap();
    }
    Outcome {
        id: 8,
        title: "class fidelity and rejection sampling",
        pass: rates[0] >= MIN_FIDELITY && intervals.iter().all(|&(_, hi)| hi >= 0.0),
        detail,
    }
}

fn criterion_9(t: &Trained) -> Outcome {
    let val_nll = |r: &TrainRun| mean_nll(&r.checkpoint.params, &r.checkpoint.config, &r.val).unwrap();
    let n = t.cfg.model.n_layers;
    let seeds = t.ablation.len() as f64;
    let mut csv = String::from("seed,decoupled_layers,layer_modes,val_nll,train_nll\n");
    let (mut dec, mut attn) = (0.0, 0.0);
    let mut sweep = [0.0; 3];
    let mut per_seed = Vec::new();
    for a in &t.ablation {
        let (d, o) = (val_nll(&a.decoupled), val_nll(&a.attention_only));
        per_seed.push(format!("seed {}: {d:.4} vs {o:.4}", a.seed));
        dec += d / seeds;
        attn += o / seeds;
        for (slot, (k, run)) in [(0, &a.global), (n / 2, &a.half), (n, &a.decoupled)].into_iter().enumerate() {
            let modes: Vec<&str> = run
                .checkpoint
                .config
                .layer_modes
                .iter()
                .map(|m| if *m == LayerMode::Decoupled { "decoupled" } else { "global" })
                .collect();
            let v = val_nll(run);
            writeln!(csv, "{},{k},{},{v:.6},{:.6}", a.seed, modes.join(" "), run.final_train_nll).unwrap();
            sweep[slot] += v / seeds;
        }
    }
    for (slot, k) in [0, n / 2, n].into_iter().enumerate() {
        writeln!(csv, "mean,{k},,{:.6},", sweep[slot]).unwrap();
    }
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("replacement_sweep.csv");
    std::fs::write(&path, &csv).unwrap();
    let non_increasing = sweep.windows(2).all(|w| w[1] <= w[0] + FLAT_NLL);
    let non_decreasing = sweep.windows(2).all(|w| w[1] >= w[0] - FLAT_NLL);
    let strictly_down = sweep.windows(2).all(|w| w[1] < w[0]);
    let strictly_up = sweep.windows(2).all(|w| w[1] > w[0]);
    Outcome {
        id: 9,
        title: "ablation: inter-scale mixing and layer replacement",
        pass: dec <= attn && (non_increasing || non_decreasing),
        detail: format!(
            "{ABLATION_SAMPLES_PER_CLASS} images per class, {} steps per model, mean over seeds {ABLATION_SEEDS:?}; (a) val NLL decoupled {dec:.4} vs attention-only {attn:.4} ({}); (b) sweep 0/{}/{n} decoupled layers val NLL {:.4} {:.4} {:.4}, monotone within {FLAT_NLL}: {}, strictly monotone: {} (reported); CSV at {}",
            t.cfg.steps,
            per_seed.join(", "),
            n / 2,
            sweep[0],
            sweep[1],
            sweep[2],
            non_increasing || non_decreasing,
            strictly_down || strictly_up,
            path.display()
        ),
    }
}

fn criterion_10(t: &Trained) -> Outcome {
    let tok = &t.decoupled.checkpoint.tokenizer;
    let schedule = &tok.schedule;
    let side = tok.image_side();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut violations = 0;
    for _ in 0..RESIDUAL_INPUTS {
        let pixels: Vec<u8> = (0..side * side * 3).map(|_| rng.random()).collect();
        let f = tok.lift.lift(&Image::new(side, pixels).unwrap()).unwrap();
        let mut prev = f.sum_sq();
        for k in 1..=schedule.len() {
            let e = residual_energy(&f, schedule, k, &tok.codebook).unwrap();
            violations += usize::from(e > prev);
            prev = e;
        }
    }

    // Codes of scale i live on axis i with magnitude 10^(n-i+1), so the
    // pooled residual at every scale is nearest to the code that was used.
    let mut mismatched = 0;
    for case in 0..ROUND_TRIP_CASES {
        let sides: Vec<usize> = if case == 0 {
            schedule.sides().to_vec()
        } else {
            let n = rng.random_range(1..=4);
            let mut s = vec![1];
            for _ in 1..n {
                let last = *s.last().unwrap();
                s.push(last + rng.random_range(1..=2));
            }
            s
        };
        let sched = ScaleSchedule::new(sides.clone()).unwrap();
        let n = sides.len();
        let mut rows = vec![vec![0.0f32; n]];
        for i in 0..n {
            for m in 1..=2 {
                let mut r = vec![0.0f32; n];
                r[i] = 10f32.powi((n - i) as i32 + 1) * m as f32;
                rows.push(r);
            }
        }
        let cb = Codebook::from_rows(&rows).unwrap();
        let maps = sides
            .iter()
            .enumerate()
            .map(|(i, &s)| (0..s * s).map(|_| (1 + 2 * i + rng.random_range(0..2)) as u32).collect())
            .collect();
        let pyr = TokenMapPyramid::new(sched.clone(), maps).unwrap();
        let f: Grid<f64> = decode_multiscale(&pyr, &cb).unwrap();
        let back = encode_multiscale(&f, &sched, &cb).unwrap();
        if back != pyr || decode_multiscale(&back, &cb).unwrap() != f {
            mismatched += 1;
        }
    }
    Outcome {
        id: 10,
        title: "tokenizer residual energy and round trip",
        pass: violations == 0 && mismatched == 0,
        detail: format!(
            "{RESIDUAL_INPUTS} random images through the fitted tokenizer, {violations} energy increases; {ROUND_TRIP_CASES} constructed pyramids, {mismatched} inexact round trips"
        ),
    }
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    let mut run = |o: Outcome| {
        report(&o);
        outcomes.push(o);
    };
    run(criterion_1());
    run(criterion_2());
    run(criterion_3());
    run(criterion_5());
    let trained = train_all();
    run(criterion_4(&trained));
    run(criterion_6(&trained));
    run(criterion_7(&trained));
    run(criterion_8(&trained));
    run(criterion_9(&trained));
    run(criterion_10(&trained));

    outcomes.sort_by_key(|o| o.id);
    let mut err = std::io::stderr();
    let _ = writeln!(err, "\nacceptance summary:");
    for o in &outcomes {
        let _ = writeln!(err, "  {} [{:>2}] {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.title);
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
