//! Coarse-to-fine generation and best-of-n rejection sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::forward::{block_input, forward_block, StreamState};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::image::color_distance;
use crate::scalar::Scalar;
use crate::schedule::Grid;
use crate::tensor::Mat;
use crate::tokenizer::{decode_multiscale, PatchLift, Tokenizer, TokenMapPyramid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    pub temperature: f64,
    /// Keep only the `top_k` most likely tokens; `top_k = vocab` disables it,
    /// `top_k = 1` is greedy decoding.
    pub top_k: usize,
    pub seed: u64,
}

impl Sampling {
    pub fn new(temperature: f64, top_k: usize, seed: u64) -> Self {
        Sampling {
            temperature,
            top_k,
            seed,
        }
    }

    /// Temperature 1 with top-k disabled.
    pub fn plain(vocab: usize, seed: u64) -> Self {
        Sampling::new(1.0, vocab, seed)
    }

    pub fn greedy(seed: u64) -> Self {
        Sampling::new(1.0, 1, seed)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.top_k < 1 || self.top_k > vocab {
            return Err(Error::InvalidArgument(format!(
                "top_k must lie in 1..={vocab}, got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Draws one token from a row of logits.
pub fn sample_token<T: Scalar, R: Rng + ?Sized>(logits: &[T], sampling: &Sampling, rng: &mut R) -> u32 {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // descending by logit, lowest index first on ties
    order.sort_by(|&a, &b| logits[b].f64().total_cmp(&logits[a].f64()).then(a.cmp(&b)));
    order.truncate(sampling.top_k);
    if order.len() == 1 {
        return order[0] as u32;
    }
    let max = logits[order[0]].f64();
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i].f64() - max) / sampling.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i as u32;
        }
        u -= w;
    }
    *order.last().unwrap() as u32
}

/// Generates a token pyramid scale by scale: each block sees only its own
/// tokens through attention and earlier scales through the carried scan state.
pub fn generate<T: Scalar>(
    class_id: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
    sampling: &Sampling,
) -> Result<TokenMapPyramid> {
    sampling.validate(config.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut state = StreamState::new(params, config);
    let mut maps: Vec<Vec<u32>> = Vec::with_capacity(config.schedule.len());
    for i in 0..config.schedule.len() {
        let x = block_input(i, class_id, &maps, params, config)?;
        let logits: Mat<T> = forward_block(&x, &mut state, params, config)?;
        let ids = (0..logits.rows())
            .map(|r| sample_token(logits.row(r), sampling, &mut rng))
            .collect();
        maps.push(ids);
    }
    TokenMapPyramid::new(config.schedule.clone(), maps)
}

/// Scores a decoded feature grid for a class; higher is better.
pub trait Scorer {
    fn score(&self, features: &Grid<f64>, class_id: usize) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(&Grid<f64>, usize) -> Result<f64>,
{
    fn score(&self, features: &Grid<f64>, class_id: usize) -> Result<f64> {
        self(features, class_id)
    }
}

/// Negative distance between the decoded image's mean color and the class's
/// reference mean color.
#[derive(Clone, Debug)]
pub struct ClassColorScorer {
    pub lift: PatchLift,
    pub class_colors: Vec<[f64; 3]>,
}

impl ClassColorScorer {
    /// Index of the reference color nearest to the grid's mean color.
    pub fn nearest_class(&self, features: &Grid<f64>) -> usize {
        let c = self.lift.mean_color(features);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, ref_c) in self.class_colors.iter().enumerate() {
            let d = color_distance(&c, ref_c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

impl Scorer for ClassColorScorer {
    fn score(&self, features: &Grid<f64>, class_id: usize) -> Result<f64> {
        let target = self
            .class_colors
            .get(class_id)
            .ok_or_else(|| Error::Scorer(format!("no reference color for class {class_id}")))?;
        Ok(-color_distance(&self.lift.mean_color(features), target))
    }
}

/// Seed of candidate `index`; candidate 0 reuses the base seed.
pub fn candidate_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Best of `n_candidates` generations under `scorer`; ties go to the lowest
/// candidate index. Returns the winner and its score.
pub fn generate_with_rejection<T: Scalar, S: Scorer + ?Sized>(
    class_id: usize,
    n_candidates: usize,
    scorer: &S,
    params: &ModelParams<T>,
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    sampling: &Sampling,
) -> Result<(TokenMapPyramid, f64)> {
    if n_candidates == 0 {
        return Err(Error::InvalidArgument("n_candidates must be at least 1".into()));
    }
    let mut best: Option<(TokenMapPyramid, f64)> = None;
    for c in 0..n_candidates {
        let s = Sampling {
            seed: candidate_seed(sampling.seed, c),
            ..*sampling
        };
        let pyramid = generate(class_id, params, config, &s)?;
        let features = decode_multiscale(&pyramid, &tokenizer.codebook)?;
        let score = scorer.score(&features, class_id)?;
        if score.is_nan() {
            return Err(Error::Scorer(format!("candidate {c} scored NaN")));
        }
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((pyramid, score));
        }
    }
    Ok(best.unwrap())
}
