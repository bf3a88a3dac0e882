//! Validation NLL, codebook utilization and class fidelity.

use rayon::prelude::*;

use super::dataset::ToyDataset;
use super::train::{encode_dataset, mean_nll, Example};
use super::checkpoint::Checkpoint;
use crate::error::Result;
use crate::model::{generate_with_rejection, ClassColorScorer, ModelConfig, ModelParams, Sampling};
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub val_nll: f64,
    pub utilization: f64,
    pub class_fidelity: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn to_kv_string(&self) -> String {
        format!(
            "val_nll={}\nutilization={}\nclass_fidelity={}\nn_samples={}\n",
            self.val_nll, self.utilization, self.class_fidelity, self.n_samples
        )
    }
}

/// Fraction of codebook ids that occur anywhere in `examples`.
pub fn codebook_utilization(examples: &[Example], vocab: usize) -> f64 {
    let mut seen = vec![false; vocab];
    for e in examples {
        for m in e.pyramid.maps() {
            for &id in m {
                seen[id as usize] = true;
            }
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / vocab as f64
}

/// Seed of generation `i` in a fidelity run. Spaced so the candidate seeds of
/// different samples never collide.
pub fn fidelity_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(1_000_003u64.wrapping_mul(i as u64))
}

/// Generates `n_samples` images (class `i mod n_classes` for sample `i`),
/// keeping the best of `n_candidates` under the class-color scorer, and
/// reports per sample whether the decoded mean color is nearest to the
/// conditioning class's reference color.
pub fn fidelity_hits(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    class_colors: &[[f64; 3]],
    n_samples: usize,
    n_candidates: usize,
    sampling: &Sampling,
) -> Result<Vec<bool>> {
    let scorer = ClassColorScorer {
        lift: tokenizer.lift.clone(),
        class_colors: class_colors.to_vec(),
    };
    let n_classes = class_colors.len();
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let class_id = i % n_classes;
            let s = Sampling {
                seed: fidelity_seed(sampling.seed, i),
                ..*sampling
            };
            let (pyramid, _) =
                generate_with_rejection(class_id, n_candidates, &scorer, params, config, tokenizer, &s)?;
            let features = tokenizer.decode_features(&pyramid)?;
            Ok(scorer.nearest_class(&features) == class_id)
        })
        .collect()
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    ds: &ToyDataset,
    n_samples: usize,
    n_candidates: usize,
    sampling: &Sampling,
) -> Result<EvalReport> {
    let config = &checkpoint.config;
    let examples = encode_dataset(&checkpoint.tokenizer, ds)?;
    let val_nll = mean_nll(&checkpoint.params, config, &examples)?;
    let utilization = codebook_utilization(&examples, config.vocab);
    let hits = fidelity_hits(
        &checkpoint.params,
        config,
        &checkpoint.tokenizer,
        &ds.class_mean_colors(),
        n_samples,
        n_candidates,
        sampling,
    )?;
    Ok(EvalReport {
        val_nll,
        utilization,
        class_fidelity: hits.iter().filter(|&&h| h).count() as f64 / n_samples.max(1) as f64,
        n_samples,
    })
}
