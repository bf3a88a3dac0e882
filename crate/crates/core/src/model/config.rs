use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::schedule::ScaleSchedule;

/// How a layer mixes tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerMode {
    /// Per-scale bidirectional attention followed by the inter-scale scan.
    Decoupled,
    /// Dense attention over the whole sequence under the scale-causal mask.
    GlobalAttention,
}

impl fmt::Display for LayerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerMode::Decoupled => "decoupled",
            LayerMode::GlobalAttention => "global",
        })
    }
}

impl FromStr for LayerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "decoupled" => Ok(LayerMode::Decoupled),
            "global" => Ok(LayerMode::GlobalAttention),
            other => Err(Error::Config(format!(
                "unknown layer mode `{other}` (expected decoupled or global)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub schedule: ScaleSchedule,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_inner: usize,
    pub state_dim: usize,
    pub vocab: usize,
    pub n_classes: usize,
    pub layer_modes: Vec<LayerMode>,
    pub attn_enabled: bool,
    pub scan_enabled: bool,
    /// Causal depthwise conv width before the scan; 0 disables it.
    pub conv_kernel: usize,
    /// Feed-forward expansion factor; 0 disables the sublayer.
    pub ffn_mult: usize,
    /// Feed each block the summed embeddings of every coarser map instead of
    /// only the previous one.
    pub cumulative_input: bool,
    pub seed: u64,
}

/// `d / 64`, at least one.
pub fn default_heads(d: usize) -> usize {
    (d / 64).max(1)
}

impl ModelConfig {
    /// Schedule `[1,2,3,4]`, width 64, four decoupled layers, 64 codes, 8 classes.
    pub fn tiny() -> Self {
        Self::with_shape(ScaleSchedule::tiny(), 64, 4, 64, 8)
    }

    /// Decoupled model with the default head count, `d_inner = 2d` and `N = 16`.
    pub fn with_shape(
        schedule: ScaleSchedule,
        d: usize,
        n_layers: usize,
        vocab: usize,
        n_classes: usize,
    ) -> Self {
        ModelConfig {
            schedule,
            d,
            n_layers,
            n_heads: default_heads(d),
            d_inner: 2 * d,
            state_dim: 16,
            vocab,
            n_classes,
            layer_modes: vec![LayerMode::Decoupled; n_layers],
            attn_enabled: true,
            scan_enabled: true,
            conv_kernel: 0,
            ffn_mult: 0,
            cumulative_input: false,
            seed: 0,
        }
    }

    /// Every layer in the given mode.
    pub fn with_modes(mut self, mode: LayerMode) -> Self {
        self.layer_modes = vec![mode; self.n_layers];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_inner == 0 || self.state_dim == 0 {
            return bad("d, d_inner and state_dim must be positive".into());
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!("n_heads = {} must divide d = {}", self.n_heads, self.d));
        }
        if self.vocab < 2 {
            return bad(format!("vocab = {} must be at least 2", self.vocab));
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive".into());
        }
        if self.layer_modes.len() != self.n_layers {
            return bad(format!(
                "{} layer modes for {} layers",
                self.layer_modes.len(),
                self.n_layers
            ));
        }
        if !self.attn_enabled && !self.scan_enabled {
            return bad("attn_enabled and scan_enabled cannot both be false".into());
        }
        Ok(())
    }

    pub fn uses_scan(&self, layer: usize) -> bool {
        self.layer_modes[layer] == LayerMode::Decoupled && self.scan_enabled
    }

    pub fn is_all_global(&self) -> bool {
        self.layer_modes.iter().all(|&m| m == LayerMode::GlobalAttention)
    }
}
