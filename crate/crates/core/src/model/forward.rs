use super::config::{LayerMode, ModelConfig};
use super::params::ModelParams;
use crate::attention::{attention_backward, attention_forward, score_kernel, AttnCache, OpCounter};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, FfnCache, NormCache};
use crate::scalar::Scalar;
use crate::scan::{scan_backward_cached, scan_continue, scan_forward_cached, ScanCache, ScanState};
use crate::schedule::{nearest_source, SequenceLayout};
use crate::tensor::{axpy, matmul_tn_acc, Mat};
use crate::tokenizer::TokenMapPyramid;

/// Input rows for block `block` of the sequence: the class token for the first
/// block, otherwise the previous scale's token map upsampled to this scale
/// (with `cumulative_input`, the sum over every coarser map). Per-scale
/// positional embeddings are added to every row. `coarser` holds the maps of
/// scales `0..block`.
pub fn block_input<T: Scalar>(
    block: usize,
    class_id: usize,
    coarser: &[Vec<u32>],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Mat<T>> {
    let sides = config.schedule.sides();
    if block >= sides.len() {
        return Err(Error::OutOfRange(format!(
            "block {block} outside a {}-scale schedule",
            sides.len()
        )));
    }
    let pos = &params.pos_embed[block];
    let mut out = pos.clone();
    if block == 0 {
        if class_id >= config.n_classes {
            return Err(Error::OutOfRange(format!(
                "class {class_id} outside {} classes",
                config.n_classes
            )));
        }
        axpy(T::one(), params.class_embed.row(class_id), out.row_mut(0));
        return Ok(out);
    }
    if coarser.len() < block {
        return Err(Error::InvalidArgument(format!(
            "block {block} needs {block} coarser token maps, got {}",
            coarser.len()
        )));
    }
    for j in source_scales(block, config) {
        let (src, dst) = (sides[j], sides[block]);
        if coarser[j].len() != src * src {
            return Err(Error::Shape(format!(
                "map of scale {j} holds {} ids, needs {}",
                coarser[j].len(),
                src * src
            )));
        }
        for (cell, id) in upsampled_ids(&coarser[j], src, dst).into_iter().enumerate() {
            if id as usize >= config.vocab {
                return Err(Error::OutOfRange(format!(
                    "token id {id} outside vocabulary of {}",
                    config.vocab
                )));
            }
            axpy(T::one(), params.token_embed.row(id as usize), out.row_mut(cell));
        }
    }
    Ok(out)
}

/// Scales whose token maps feed block `block` (which must be positive).
fn source_scales(block: usize, config: &ModelConfig) -> std::ops::Range<usize> {
    if config.cumulative_input {
        0..block
    } else {
        block - 1..block
    }
}

/// Nearest-neighbor upsampling of an id map, matching
/// [`upsample_grid`](crate::schedule::upsample_grid) on the embedded grid.
fn upsampled_ids(ids: &[u32], src: usize, dst: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(dst * dst);
    for r in 0..dst {
        let sr = nearest_source(r, src, dst);
        for c in 0..dst {
            out.push(ids[sr * src + nearest_source(c, src, dst)]);
        }
    }
    out
}

fn check_pyramid(pyramid: &TokenMapPyramid, config: &ModelConfig) -> Result<()> {
    if pyramid.schedule() != &config.schedule {
        return Err(Error::Shape(format!(
            "pyramid schedule {} differs from model schedule {}",
            pyramid.schedule(),
            config.schedule
        )));
    }
    pyramid.check_vocab(config.vocab)
}

/// Teacher-forced input `[C, up(s₁), …, up(s_{n−1})]` plus positional tables.
pub fn build_input_sequence<T: Scalar>(
    pyramid: &TokenMapPyramid,
    class_id: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Mat<T>> {
    check_pyramid(pyramid, config)?;
    let blocks = (0..config.schedule.len())
        .map(|i| {
            block_input(i, class_id, &pyramid.maps()[..i], params, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Mat::vstack(&blocks)
}

#[derive(Clone, Debug, Default)]
struct LayerCache<T> {
    norm1: Option<NormCache<T>>,
    attn: Option<AttnCache<T>>,
    norm2: Option<NormCache<T>>,
    scan: Option<ScanCache<T>>,
    ffn: Option<FfnCache<T>>,
}

/// Activations kept by [`forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    final_norm: NormCache<T>,
    final_out: Mat<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Attention probabilities of layer `layer`, if it ran attention.
    pub fn attention(&self, layer: usize) -> Option<&AttnCache<T>> {
        self.layers[layer].attn.as_ref()
    }
}

pub fn forward<T: Scalar>(
    x: &Mat<T>,
    layout: &SequenceLayout,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Mat<T>> {
    forward_cached(x, layout, params, config, None).map(|(logits, _)| logits)
}

/// Full-sequence forward pass returning logits and the activation cache.
/// Attention score work is added to `counter` when given.
pub fn forward_cached<T: Scalar>(
    x: &Mat<T>,
    layout: &SequenceLayout,
    params: &ModelParams<T>,
    config: &ModelConfig,
    counter: Option<&OpCounter>,
) -> Result<(Mat<T>, ForwardCache<T>)> {
    if x.rows() != layout.total_len || x.cols() != config.d {
        return Err(Error::Shape(format!(
            "input {:?} against layout of {} tokens at width {}",
            x.shape(),
            layout.total_len,
            config.d
        )));
    }
    let block_ranges = layout.block_diagonal_ranges();
    let causal_ranges = layout.scale_causal_ranges();
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut cache = LayerCache::default();
        let mode = config.layer_modes[l];
        if mode == LayerMode::GlobalAttention || config.attn_enabled {
            let ranges = match mode {
                LayerMode::Decoupled => &block_ranges,
                LayerMode::GlobalAttention => &causal_ranges,
            };
            let (n, nc) = layer.norm1.forward(&h);
            let (a, ac) = attention_forward(&n, &layer.attn, ranges, counter)?;
            h.add_assign(&a);
            cache.norm1 = Some(nc);
            cache.attn = Some(ac);
        }
        if config.uses_scan(l) {
            let (n, nc) = layer.norm2.forward(&h);
            let (s, sc) = scan_forward_cached(&n, &layer.ssm)?;
            h.add_assign(&s);
            cache.norm2 = Some(nc);
            cache.scan = Some(sc);
        }
        if let Some(ffn) = &layer.ffn {
            let (f, fc) = ffn.forward(&h);
            h.add_assign(&f);
            cache.ffn = Some(fc);
        }
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("activations after layer {l}")));
        }
        caches.push(cache);
    }
    let (hn, fc) = params.final_norm.forward(&h);
    let logits = hn.matmul(&params.head);
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok((
        logits,
        ForwardCache {
            layers: caches,
            final_norm: fc,
            final_out: hn,
        },
    ))
}

/// Gradient of the forward pass with respect to its input and every parameter.
pub fn backward<T: Scalar>(
    cache: &ForwardCache<T>,
    params: &ModelParams<T>,
    dlogits: &Mat<T>,
) -> Result<(Mat<T>, ModelParams<T>)> {
    let mut grads = params.zeros_like();
    matmul_tn_acc(&cache.final_out, dlogits, &mut grads.head);
    let dn = dlogits.matmul_t(&params.head);
    let mut dh = params
        .final_norm
        .backward(&cache.final_norm, &dn, &mut grads.final_norm);
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let lg = &mut grads.layers[l];
        if let (Some(ffn), Some(fc)) = (&layer.ffn, &lc.ffn) {
            let d = ffn.backward(fc, &dh, lg.ffn.as_mut().unwrap());
            dh.add_assign(&d);
        }
        if let (Some(nc), Some(sc)) = (&lc.norm2, &lc.scan) {
            let dn = scan_backward_cached(sc, &layer.ssm, &dh, &mut lg.ssm)?;
            let d = layer.norm2.backward(nc, &dn, &mut lg.norm2);
            dh.add_assign(&d);
        }
        if let (Some(nc), Some(ac)) = (&lc.norm1, &lc.attn) {
            let dn = attention_backward(ac, &layer.attn, &dh, &mut lg.attn)?;
            let d = layer.norm1.backward(nc, &dn, &mut lg.norm1);
            dh.add_assign(&d);
        }
    }
    Ok((dh, grads))
}

/// Result of [`loss`].
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    /// Mean negative log-likelihood, nats per token.
    pub loss: f64,
    pub grads: ModelParams<T>,
    pub logits: Mat<T>,
}

/// Scale-wise teacher-forced negative log-likelihood and its gradients.
pub fn loss<T: Scalar>(
    pyramid: &TokenMapPyramid,
    class_id: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<LossOutput<T>> {
    let x = build_input_sequence(pyramid, class_id, params, config)?;
    let layout = config.schedule.layout();
    let (logits, cache) = forward_cached(&x, &layout, params, config, None)?;
    let targets = pyramid.flat();
    let (nll, dlogits) = cross_entropy(&logits, &targets);
    let (dx, mut grads) = backward(&cache, params, &dlogits)?;
    scatter_input_grad(&dx, pyramid, class_id, config, &mut grads);
    Ok(LossOutput {
        loss: nll,
        grads,
        logits,
    })
}

/// Loss and logits without gradients.
pub fn eval_loss<T: Scalar>(
    pyramid: &TokenMapPyramid,
    class_id: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(f64, Mat<T>)> {
    let x = build_input_sequence(pyramid, class_id, params, config)?;
    let logits = forward(&x, &config.schedule.layout(), params, config)?;
    let (nll, _) = cross_entropy(&logits, &pyramid.flat());
    Ok((nll, logits))
}

fn scatter_input_grad<T: Scalar>(
    dx: &Mat<T>,
    pyramid: &TokenMapPyramid,
    class_id: usize,
    config: &ModelConfig,
    grads: &mut ModelParams<T>,
) {
    let layout = config.schedule.layout();
    let sides = config.schedule.sides();
    for (i, pos) in grads.pos_embed.iter_mut().enumerate() {
        let r = layout.block_range(i);
        for (cell, row) in r.clone().enumerate() {
            axpy(T::one(), dx.row(row), pos.row_mut(cell));
        }
        if i == 0 {
            axpy(T::one(), dx.row(r.start), grads.class_embed.row_mut(class_id));
        } else {
            for j in source_scales(i, config) {
                let ids = upsampled_ids(pyramid.map(j), sides[j], sides[i]);
                for (id, row) in ids.into_iter().zip(r.clone()) {
                    axpy(T::one(), dx.row(row), grads.token_embed.row_mut(id as usize));
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct LayerStream<T> {
    scan: Option<ScanState<T>>,
    keys: Option<Mat<T>>,
    values: Option<Mat<T>>,
}

/// Per-layer state for block-by-block inference: a scan state for decoupled
/// layers and cached keys/values for global-attention layers.
#[derive(Clone, Debug)]
pub struct StreamState<T> {
    layers: Vec<LayerStream<T>>,
    next_block: usize,
}

impl<T: Scalar> StreamState<T> {
    pub fn new(params: &ModelParams<T>, config: &ModelConfig) -> Self {
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| LayerStream {
                scan: config.uses_scan(l).then(|| ScanState::zeros(&layer.ssm)),
                keys: None,
                values: None,
            })
            .collect();
        StreamState {
            layers,
            next_block: 0,
        }
    }

    pub fn next_block(&self) -> usize {
        self.next_block
    }
}

fn append_rows<T: Scalar>(cache: &mut Option<Mat<T>>, rows: Mat<T>) -> Result<()> {
    *cache = Some(match cache.take() {
        Some(prev) => Mat::vstack(&[prev, rows])?,
        None => rows,
    });
    Ok(())
}

/// Runs the next block through every layer, advancing `state`, and returns
/// the block's logits.
pub fn forward_block<T: Scalar>(
    input: &Mat<T>,
    state: &mut StreamState<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Mat<T>> {
    let block = state.next_block;
    let sides = config.schedule.sides();
    if block >= sides.len() {
        return Err(Error::OutOfRange("every block has already been processed".into()));
    }
    let m = sides[block] * sides[block];
    if input.shape() != (m, config.d) {
        return Err(Error::Shape(format!(
            "block {block} input {:?}, expected ({m}, {})",
            input.shape(),
            config.d
        )));
    }
    let mut h = input.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let ls = &mut state.layers[l];
        match config.layer_modes[l] {
            LayerMode::Decoupled => {
                if config.attn_enabled {
                    let (n, _) = layer.norm1.forward(&h);
                    let ranges = vec![0..m; m];
                    let (a, _) = attention_forward(&n, &layer.attn, &ranges, None)?;
                    h.add_assign(&a);
                }
                if let Some(scan) = &mut ls.scan {
                    let (n, _) = layer.norm2.forward(&h);
                    let s = scan_continue(&n, scan, &layer.ssm, None)?;
                    h.add_assign(&s);
                }
            }
            LayerMode::GlobalAttention => {
                let (n, _) = layer.norm1.forward(&h);
                let q = n.matmul(&layer.attn.w_q);
                append_rows(&mut ls.keys, n.matmul(&layer.attn.w_k))?;
                append_rows(&mut ls.values, n.matmul(&layer.attn.w_v))?;
                let keys = ls.keys.as_ref().unwrap();
                let values = ls.values.as_ref().unwrap();
                let ranges = vec![0..keys.rows(); m];
                let (ctx, _, _) = score_kernel(&q, keys, values, layer.attn.n_heads, &ranges, None);
                h.add_assign(&ctx.matmul(&layer.attn.w_o));
            }
        }
        if let Some(ffn) = &layer.ffn {
            let (f, _) = ffn.forward(&h);
            h.add_assign(&f);
        }
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("activations after layer {l}")));
        }
    }
    let (hn, _) = params.final_norm.forward(&h);
    state.next_block += 1;
    Ok(hn.matmul(&params.head))
}

/// Teacher-forced logits computed block by block through [`forward_block`].
pub fn streaming_logits<T: Scalar>(
    pyramid: &TokenMapPyramid,
    class_id: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Mat<T>> {
    check_pyramid(pyramid, config)?;
    let mut state = StreamState::new(params, config);
    let blocks = (0..config.schedule.len())
        .map(|i| {
            let x = block_input(i, class_id, &pyramid.maps()[..i], params, config)?;
            forward_block(&x, &mut state, params, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Mat::vstack(&blocks)
}
