use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::attention::AttnParams;
use crate::error::{Error, Result};
use crate::nn::{Ffn, Norm};
use crate::scalar::Scalar;
use crate::scan::{ConvParams, SsmParams};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub norm1: Norm<T>,
    pub attn: AttnParams<T>,
    pub norm2: Norm<T>,
    pub ssm: SsmParams<T>,
    pub ffn: Option<Ffn<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub token_embed: Mat<T>,
    /// The condition token `[C]`, one row per class.
    pub class_embed: Mat<T>,
    /// One `side² × d` table per scale.
    pub pos_embed: Vec<Mat<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Norm<T>,
    pub head: Mat<T>,
}

/// 2D sinusoidal table for an `side × side` map: half the channels encode
/// the row, half the column.
fn pos_table<T: Scalar>(side: usize, d: usize, scale: f64) -> Mat<T> {
    let half = d / 2;
    Mat::from_fn(side * side, d, |cell, ch| {
        let (r, c) = (cell / side, cell % side);
        let (coord, k) = if ch < half { (r, ch) } else { (c, ch - half) };
        let pos = (coord as f64 + 0.5) / side as f64;
        let freq = std::f64::consts::PI * (1 + k / 2) as f64;
        let v = if k % 2 == 0 { (freq * pos).sin() } else { (freq * pos).cos() };
        T::of(scale * v)
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization; deterministic for a given config.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let conv = (config.conv_kernel > 0).then_some(config.conv_kernel);
        let token_embed = Mat::randn(config.vocab, d, 1.0, &mut rng);
        let class_embed = Mat::randn(config.n_classes, d, 1.0, &mut rng);
        let pos_embed = config
            .schedule
            .sides()
            .iter()
            .map(|&s| pos_table(s, d, 0.5))
            .collect();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                norm1: Norm::new(d),
                attn: AttnParams::init(d, config.n_heads, &mut rng),
                norm2: Norm::new(d),
                ssm: SsmParams::init(d, config.d_inner, config.state_dim, conv, &mut rng),
                ffn: (config.ffn_mult > 0).then(|| Ffn::init(d, config.ffn_mult, &mut rng)),
            })
            .collect();
        let head = Mat::randn(d, config.vocab, 0.02, &mut rng);
        Ok(ModelParams {
            token_embed,
            class_embed,
            pos_embed,
            layers,
            final_norm: Norm::new(d),
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat<T>| Mat::zeros(m.rows(), m.cols());
        ModelParams {
            token_embed: z(&self.token_embed),
            class_embed: z(&self.class_embed),
            pos_embed: self.pos_embed.iter().map(z).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm1: l.norm1.zeros_like(),
                    attn: l.attn.zeros_like(),
                    norm2: l.norm2.zeros_like(),
                    ssm: l.ssm.zeros_like(),
                    ffn: l.ffn.as_ref().map(Ffn::zeros_like),
                })
                .collect(),
            final_norm: self.final_norm.zeros_like(),
            head: z(&self.head),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U> {
            token_embed: self.token_embed.cast(),
            class_embed: self.class_embed.cast(),
            pos_embed: self.pos_embed.iter().map(Mat::cast).collect(),
            layers: Vec::new(),
            final_norm: Norm {
                gain: self.final_norm.gain.cast(),
                bias: self.final_norm.bias.cast(),
            },
            head: self.head.cast(),
        };
        for l in &self.layers {
            let norm = |n: &Norm<T>| Norm {
                gain: n.gain.cast(),
                bias: n.bias.cast(),
            };
            out.layers.push(LayerParams {
                norm1: norm(&l.norm1),
                attn: AttnParams {
                    w_q: l.attn.w_q.cast(),
                    w_k: l.attn.w_k.cast(),
                    w_v: l.attn.w_v.cast(),
                    w_o: l.attn.w_o.cast(),
                    n_heads: l.attn.n_heads,
                },
                norm2: norm(&l.norm2),
                ssm: SsmParams {
                    w_in: l.ssm.w_in.cast(),
                    a_log: l.ssm.a_log.cast(),
                    w_b: l.ssm.w_b.cast(),
                    w_c: l.ssm.w_c.cast(),
                    w_dt: l.ssm.w_dt.cast(),
                    dt_bias: l.ssm.dt_bias.cast(),
                    w_out: l.ssm.w_out.cast(),
                    conv: l.ssm.conv.as_ref().map(|c| ConvParams {
                        weight: c.weight.cast(),
                        bias: c.bias.cast(),
                    }),
                },
                ffn: l.ffn.as_ref().map(|f| Ffn {
                    norm: norm(&f.norm),
                    w1: f.w1.cast(),
                    b1: f.b1.cast(),
                    w2: f.w2.cast(),
                    b2: f.b2.cast(),
                }),
            });
        }
        out
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = vec![
            ("token_embed".to_string(), &self.token_embed),
            ("class_embed".to_string(), &self.class_embed),
        ];
        for (i, p) in self.pos_embed.iter().enumerate() {
            out.push((format!("pos_embed.{i}"), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            out.push((n("norm1.gain"), &l.norm1.gain));
            out.push((n("norm1.bias"), &l.norm1.bias));
            out.push((n("attn.w_q"), &l.attn.w_q));
            out.push((n("attn.w_k"), &l.attn.w_k));
            out.push((n("attn.w_v"), &l.attn.w_v));
            out.push((n("attn.w_o"), &l.attn.w_o));
            out.push((n("norm2.gain"), &l.norm2.gain));
            out.push((n("norm2.bias"), &l.norm2.bias));
            out.push((n("ssm.w_in"), &l.ssm.w_in));
            out.push((n("ssm.a_log"), &l.ssm.a_log));
            out.push((n("ssm.w_b"), &l.ssm.w_b));
            out.push((n("ssm.w_c"), &l.ssm.w_c));
            out.push((n("ssm.w_dt"), &l.ssm.w_dt));
            out.push((n("ssm.dt_bias"), &l.ssm.dt_bias));
            out.push((n("ssm.w_out"), &l.ssm.w_out));
            if let Some(c) = &l.ssm.conv {
                out.push((n("ssm.conv.weight"), &c.weight));
                out.push((n("ssm.conv.bias"), &c.bias));
            }
            if let Some(f) = &l.ffn {
                out.push((n("ffn.norm.gain"), &f.norm.gain));
                out.push((n("ffn.norm.bias"), &f.norm.bias));
                out.push((n("ffn.w1"), &f.w1));
                out.push((n("ffn.b1"), &f.b1));
                out.push((n("ffn.w2"), &f.w2));
                out.push((n("ffn.b2"), &f.b2));
            }
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm.bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out: Vec<&mut Mat<T>> = vec![&mut self.token_embed, &mut self.class_embed];
        out.extend(self.pos_embed.iter_mut());
        for l in &mut self.layers {
            out.push(&mut l.norm1.gain);
            out.push(&mut l.norm1.bias);
            out.push(&mut l.attn.w_q);
            out.push(&mut l.attn.w_k);
            out.push(&mut l.attn.w_v);
            out.push(&mut l.attn.w_o);
            out.push(&mut l.norm2.gain);
            out.push(&mut l.norm2.bias);
            out.push(&mut l.ssm.w_in);
            out.push(&mut l.ssm.a_log);
            out.push(&mut l.ssm.w_b);
            out.push(&mut l.ssm.w_c);
            out.push(&mut l.ssm.w_dt);
            out.push(&mut l.ssm.dt_bias);
            out.push(&mut l.ssm.w_out);
            if let Some(c) = &mut l.ssm.conv {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
            if let Some(f) = &mut l.ffn {
                out.push(&mut f.norm.gain);
                out.push(&mut f.norm.bias);
                out.push(&mut f.w1);
                out.push(&mut f.b1);
                out.push(&mut f.w2);
                out.push(&mut f.b2);
            }
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(&mut self.head);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams<T>) {
        let src: Vec<&Mat<T>> = other.tensors().into_iter().map(|(_, m)| m).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    pub fn scale(&mut self, s: T) {
        for m in self.tensors_mut() {
            m.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Checks every tensor's shape against what `config` implies.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::<T>::init(config)?;
        let want = reference.tensors();
        let have = self.tensors();
        if want.len() != have.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} tensors present, config implies {}",
                have.len(),
                want.len()
            )));
        }
        for ((wn, wm), (hn, hm)) in want.iter().zip(&have) {
            if wn != hn || wm.shape() != hm.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {hn} has shape {:?}, config implies {wn} with {:?}",
                    hm.shape(),
                    wm.shape()
                )));
            }
        }
        for l in &self.layers {
            if l.attn.n_heads != config.n_heads {
                return Err(Error::CheckpointMismatch("n_heads differs".into()));
            }
        }
        Ok(())
    }
}
