use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvar_core::cost::{emit_cost_report, measured_kernel_cost, CostReport, Kernel, KernelCost, KernelInput, Timing};
use mvar_core::gradcheck;
use mvar_core::harness::config::{parse_override, TrainConfig};
use mvar_core::harness::dataset::nominal_class_colors;
use mvar_core::harness::eval::fidelity_seed;
use mvar_core::harness::{self, configure_threads, evaluate, generate_toy_dataset, Checkpoint, ToyDataset};
use mvar_core::model::{generate_with_rejection, ClassColorScorer};
use mvar_core::{Error, Result, ScaleSchedule};

#[derive(Parser)]
#[command(name = "mvar", version, about = "Scale-wise autoregressive image modeling at desk scale")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Replaces the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; its meaning depends on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and validation toy datasets (`--out` sets the directory).
    GenData,
    /// Fit the tokenizer and train (`--out` replaces the checkpoint path).
    Train,
    /// Validation NLL, codebook utilization and class fidelity of a checkpoint.
    Eval,
    /// Generate images as PPM files into the `--out` directory.
    Sample {
        /// Number of images; defaults to `n_samples`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Time the attention and scan kernels over a length sweep (CSV to `--out` or stdout).
    Bench {
        /// Sequence lengths to time.
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        /// Kernels to time.
        #[arg(long, value_delimiter = ',', default_value = "global_attention,intra_attention,inter_scan")]
        kernels: Vec<String>,
        /// Timed runs per point; the median is reported.
        #[arg(long, default_value_t = 11)]
        repeats: usize,
    },
    /// Score-mass and compute report of a global-attention checkpoint
    /// (CSV row appended to `--out`).
    AnalyzeCost {
        /// Schedule for the analytic compute split.
        #[arg(long, default_value = "1,2,3,4,5,6,8,10,13,16")]
        schedule: String,
        /// Images used for the score-mass measurement.
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Run every finite-difference gradient suite.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut overrides = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    TrainConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.deterministic)?;
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, cli.out.as_deref()),
        Command::Train => train(cfg, cli.out),
        Command::Eval => eval(&cfg),
        Command::Sample { count } => sample(&cfg, count.unwrap_or(cfg.n_samples), cli.out.as_deref()),
        Command::Bench {
            lengths,
            kernels,
            repeats,
        } => bench(&cfg, lengths, kernels, *repeats, cli.out.as_deref()),
        Command::AnalyzeCost { schedule, batch } => analyze_cost(&cfg, schedule, *batch, cli.out.as_deref()),
        Command::Gradcheck => run_gradcheck(cfg.seed),
    }
}

fn rerooted(path: &Path, dir: Option<&Path>) -> PathBuf {
    match (dir, path.file_name()) {
        (Some(d), Some(name)) => d.join(name),
        _ => path.to_path_buf(),
    }
}

fn gen_data(cfg: &TrainConfig, dir: Option<&Path>) -> Result<()> {
    let side = cfg.image_side();
    let sets = [
        (rerooted(&cfg.dataset, dir), cfg.samples_per_class, cfg.seed),
        (rerooted(&cfg.val_dataset, dir), cfg.val_samples_per_class, cfg.seed.wrapping_add(1)),
    ];
    for (path, per_class, seed) in sets {
        let ds = generate_toy_dataset(cfg.model.n_classes, per_class, side, seed)?;
        ds.write(&path)?;
        println!("wrote {} images ({side}x{side}) to {}", ds.len(), path.display());
    }
    Ok(())
}

fn train(mut cfg: TrainConfig, out: Option<PathBuf>) -> Result<()> {
    if let Some(p) = out {
        cfg.checkpoint = p;
    }
    let metrics = cfg.checkpoint.with_extension("metrics.csv");
    let run = harness::train(&cfg, Some(&metrics))?;
    for row in &run.metrics {
        let val = row.val_nll.map(|v| format!(" val_nll={v:.4}")).unwrap_or_default();
        println!("step={} lr={:.4e} train_nll={:.4}{val}", row.step, row.lr, row.train_nll);
    }
    println!("final_train_nll={:.6}", run.final_train_nll);
    println!("checkpoint={}", cfg.checkpoint.display());
    println!("metrics={}", metrics.display());
    Ok(())
}

fn eval(cfg: &TrainConfig) -> Result<()> {
    let ck = Checkpoint::load_expecting(&cfg.checkpoint, &cfg.model)?;
    let ds = ToyDataset::read(&cfg.val_dataset)?;
    let report = evaluate(&ck, &ds, cfg.n_samples, cfg.n_candidates, &cfg.sampling(cfg.seed))?;
    print!("{}", report.to_kv_string());
    Ok(())
}

fn sample(cfg: &TrainConfig, count: usize, dir: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load_expecting(&cfg.checkpoint, &cfg.model)?;
    let dir = dir.unwrap_or(Path::new("samples"));
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let scorer = ClassColorScorer {
        lift: ck.tokenizer.lift.clone(),
        class_colors: nominal_class_colors(ck.config.n_classes, ck.tokenizer.image_side()),
    };
    for i in 0..count {
        let class_id = i % ck.config.n_classes;
        let sampling = cfg.sampling(fidelity_seed(cfg.seed, i));
        let (pyramid, _) = generate_with_rejection(
            class_id,
            cfg.n_candidates,
            &scorer,
            &ck.params,
            &ck.config,
            &ck.tokenizer,
            &sampling,
        )?;
        let path = dir.join(format!("sample_{i:03}_class{class_id}.ppm"));
        ck.tokenizer.decode(&pyramid)?.write_ppm(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn bench(cfg: &TrainConfig, lengths: &[usize], kernels: &[String], repeats: usize, out: Option<&Path>) -> Result<()> {
    let kernels = kernels.iter().map(|k| k.parse()).collect::<Result<Vec<Kernel>>>()?;
    let timing = Timing {
        repeats,
        ..Timing::default()
    };
    let mut rows: Vec<KernelCost> = Vec::new();
    for &k in &kernels {
        for &l in lengths {
            let c = measured_kernel_cost(k, &KernelInput::Length(l), cfg.model.d, timing, cfg.seed)?;
            eprintln!("{}", c.csv_row());
            rows.push(c);
        }
    }
    let mut text = format!("{}\n", KernelCost::CSV_HEADER);
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    match out {
        Some(p) => harness::write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn analyze_cost(cfg: &TrainConfig, schedule: &str, batch: usize, out: Option<&Path>) -> Result<()> {
    let schedule: ScaleSchedule = schedule.parse()?;
    let ck = Checkpoint::load_expecting(&cfg.checkpoint, &cfg.model)?;
    let ds = ToyDataset::read(&cfg.dataset)?;
    let report = emit_cost_report(&ck, &ds, &schedule, batch)?;
    print!("{}", report.to_kv_string());
    if let Some(p) = out {
        let fresh = !p.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
        let mut text = String::new();
        if fresh {
            text.push_str(&CostReport::csv_header());
            text.push('\n');
        }
        text.push_str(&report.csv_row());
        text.push('\n');
        f.write_all(text.as_bytes()).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<()> {
    let reports = gradcheck::run_all(seed)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        println!("{status} {:<18} {:<28} rel_error={:.3e} tol={:.0e}", r.suite, r.tensor, r.rel_error, r.tolerance);
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed", reports.len());
    if failed > 0 {
        return Err(Error::NonFinite(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}
