//! Tokenizer fitting plus momentum SGD on the scale-wise loss.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::dataset::ToyDataset;
use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::tokenizer::{PatchLift, Tokenizer, TokenMapPyramid};

/// One encoded training image.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub pyramid: TokenMapPyramid,
    pub class_id: usize,
}

pub fn fit_tokenizer(cfg: &TrainConfig, ds: &ToyDataset) -> Result<Tokenizer> {
    let lift = PatchLift::new(cfg.patch, cfg.vq_dim, cfg.seed)?;
    Tokenizer::fit(
        &ds.images,
        &cfg.model.schedule,
        lift,
        cfg.model.vocab,
        cfg.kmeans_iters,
        cfg.seed,
    )
}

pub fn encode_dataset(tokenizer: &Tokenizer, ds: &ToyDataset) -> Result<Vec<Example>> {
    ds.images
        .par_iter()
        .zip(&ds.labels)
        .map(|(img, &l)| {
            Ok(Example {
                pyramid: tokenizer.encode(img)?,
                class_id: l as usize,
            })
        })
        .collect()
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Mean loss and mean gradient over `batch`. Per-example work runs in
/// parallel; the reduction is sequential in batch order.
pub fn batch_gradient(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    batch: &[&Example],
) -> Result<(f64, ModelParams<f32>)> {
    let outs: Vec<model::LossOutput<f32>> = batch
        .par_iter()
        .map(|e| model::loss(&e.pyramid, e.class_id, params, config))
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for o in &outs {
        total += o.loss;
        grads.add_assign(&o.grads);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv as f32);
    Ok((total * inv, grads))
}

/// Mean per-token NLL over `examples`.
pub fn mean_nll(params: &ModelParams<f32>, config: &ModelConfig, examples: &[Example]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| model::eval_loss(&e.pyramid, e.class_id, params, config).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Fraction of positions whose argmax logit is the target token.
pub fn argmax_accuracy(params: &ModelParams<f32>, config: &ModelConfig, examples: &[Example]) -> Result<f64> {
    let hits: Vec<(usize, usize)> = examples
        .par_iter()
        .map(|e| {
            let (_, logits) = model::eval_loss(&e.pyramid, e.class_id, params, config)?;
            let targets = e.pyramid.flat();
            let hit = targets
                .iter()
                .enumerate()
                .filter(|&(r, &t)| {
                    let row = logits.row(r);
                    let best = (0..row.len())
                        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                        .unwrap();
                    best == t as usize
                })
                .count();
            Ok((hit, targets.len()))
        })
        .collect::<Result<_>>()?;
    let (h, n) = hits.iter().fold((0, 0), |(h, n), &(a, b)| (h + a, n + b));
    Ok(h as f64 / n.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,lr,train_nll,val_nll\n");
    for r in rows {
        let val = r.val_nll.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(s, "{},{:.6e},{:.6},{}", r.step, r.lr, r.train_nll, val).unwrap();
    }
    s
}

/// Optimizer settings taken from a [`TrainConfig`].
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl From<&TrainConfig> for Schedule {
    fn from(c: &TrainConfig) -> Self {
        Schedule {
            lr: c.lr,
            momentum: c.momentum,
            grad_clip: c.grad_clip,
            steps: c.steps,
            batch_size: c.batch_size,
            eval_interval: c.eval_interval,
            seed: c.seed,
        }
    }
}

/// Runs `sched.steps` momentum-SGD updates on `params`. `on_eval` fires at
/// every eval interval and after the last step.
pub fn optimize(
    params: &mut ModelParams<f32>,
    config: &ModelConfig,
    sched: &Schedule,
    train: &[Example],
    val: &[Example],
    mut on_eval: impl FnMut(&MetricRow, &ModelParams<f32>) -> Result<()>,
) -> Result<Vec<MetricRow>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let bs = sched.batch_size.min(train.len());
    let mut rows = Vec::new();
    for step in 0..sched.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads) = batch_gradient(params, config, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if sched.grad_clip > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .map(|(_, m)| m.sum_sq())
                .sum::<f64>()
                .sqrt();
            if norm > sched.grad_clip {
                grads.scale((sched.grad_clip / norm) as f32);
            }
        }
        let lr = cosine_lr(sched.lr, step, sched.steps);
        velocity.scale(sched.momentum as f32);
        velocity.add_assign(&grads);
        let mut delta = velocity.clone();
        delta.scale(-lr as f32);
        params.add_assign(&delta);
        let done = step + 1;
        if done % sched.eval_interval == 0 || done == sched.steps {
            let val_nll = if val.is_empty() {
                None
            } else {
                Some(mean_nll(params, config, val)?)
            };
            let row = MetricRow {
                step: done,
                lr,
                train_nll: loss,
                val_nll,
            };
            on_eval(&row, params)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
    /// Mean NLL over the whole training set after the last step.
    pub final_train_nll: f64,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Fits the tokenizer on `train_ds`, then trains from the seeded
/// initialization. `checkpoint_path`, when given, is rewritten at every eval.
pub fn train_in_memory(
    cfg: &TrainConfig,
    train_ds: &ToyDataset,
    val_ds: Option<&ToyDataset>,
    checkpoint_path: Option<&Path>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train_ds.side != cfg.image_side() {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0}, config expects {1}x{1}",
            train_ds.side,
            cfg.image_side()
        )));
    }
    if train_ds.n_classes > cfg.model.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model only {}",
            train_ds.n_classes, cfg.model.n_classes
        )));
    }
    let tokenizer = fit_tokenizer(cfg, train_ds)?;
    let train = encode_dataset(&tokenizer, train_ds)?;
    let val = match val_ds {
        Some(v) => encode_dataset(&tokenizer, v)?,
        None => Vec::new(),
    };
    let mut params = ModelParams::<f32>::init(&cfg.model)?;
    let save = |params: &ModelParams<f32>, step: u64| -> Result<Checkpoint> {
        let ck = Checkpoint {
            config: cfg.model.clone(),
            tokenizer: tokenizer.clone(),
            params: params.clone(),
            step,
        };
        if let Some(p) = checkpoint_path {
            ck.save(p)?;
        }
        Ok(ck)
    };
    let metrics = optimize(&mut params, &cfg.model, &cfg.into(), &train, &val, |row, p| {
        save(p, row.step as u64).map(|_| ())
    })?;
    let checkpoint = save(&params, cfg.steps as u64)?;
    let final_train_nll = mean_nll(&params, &cfg.model, &train)?;
    Ok(TrainRun {
        checkpoint,
        metrics,
        final_train_nll,
        train,
        val,
    })
}

/// File-based training: reads the configured datasets, writes the checkpoint
/// and, if `metrics_path` is given, the metrics CSV.
pub fn train(cfg: &TrainConfig, metrics_path: Option<&Path>) -> Result<TrainRun> {
    let train_ds = ToyDataset::read(&cfg.dataset)?;
    let val_ds = if cfg.val_dataset.exists() {
        Some(ToyDataset::read(&cfg.val_dataset)?)
    } else {
        None
    };
    let run = train_in_memory(cfg, &train_ds, val_ds.as_ref(), Some(&cfg.checkpoint))?;
    if let Some(p) = metrics_path {
        write_atomic(p, metrics_csv(&run.metrics).as_bytes())?;
    }
    Ok(run)
}
