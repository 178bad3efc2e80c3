//! Attention + feedforward network that predicts a channel-shared
//! displacement field from a feature map.
//!
//! Every spatial position is a token. The chain is: embed `C → D`, one
//! multi-head self-attention block with residual, a two-layer feedforward
//! with residual, unembed `D → C`, then average consecutive channel pairs
//! into one `(row, col)` offset per pixel. There is no positional encoding,
//! so the network is equivariant to token permutations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Result};
use crate::layers::{Bound, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::DisplacementField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetNetConfig {
    pub embed_multiplier: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub channels: usize,
    /// GELU between the two feedforward maps. Off: the feedforward is linear.
    #[serde(default)]
    pub ff_activation: bool,
}

impl OffsetNetConfig {
    pub fn new(channels: usize, embed_multiplier: usize, heads: usize, hidden_dim: usize) -> Result<Self> {
        let cfg = OffsetNetConfig { embed_multiplier, heads, hidden_dim, channels, ff_activation: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return config_err(format!("offset network needs an even channel count, got {}", self.channels));
        }
        if self.embed_multiplier == 0 || self.heads == 0 || self.hidden_dim == 0 {
            return config_err("embed multiplier, heads and hidden dim must be positive");
        }
        if self.embed_dim() % self.heads != 0 {
            return config_err(format!("embedding width {} is not divisible by {} heads", self.embed_dim(), self.heads));
        }
        Ok(())
    }

    /// `D = ℰ·C`.
    pub fn embed_dim(&self) -> usize {
        self.embed_multiplier * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim() / self.heads
    }

    /// Exact parameter count; independent of the head count.
    pub fn param_count(&self) -> usize {
        let (c, d, dh) = (self.channels, self.embed_dim(), self.hidden_dim);
        Linear::param_count(c, d)
            + 3 * Linear::param_count(d, d)
            + Linear::param_count(d, d)
            + Linear::param_count(d, dh)
            + Linear::param_count(dh, d)
            + Linear::param_count(d, c)
    }
}

/// Parameter handles of one offset network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetNetwork {
    pub cfg: OffsetNetConfig,
    pub embed: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub unembed: Linear,
}

impl OffsetNetwork {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: OffsetNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, d, h) = (cfg.channels, cfg.embed_dim(), cfg.hidden_dim);
        Ok(OffsetNetwork {
            cfg,
            embed: Linear::new(store, &format!("{name}.embed"), c, d, rng),
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, h, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), h, d, rng),
            unembed: Linear::new(store, &format!("{name}.unembed"), d, c, rng),
        })
    }

    pub fn linears(&self) -> [Linear; 8] {
        [self.embed, self.query, self.key, self.value, self.output, self.ff1, self.ff2, self.unembed]
    }

    /// Records the field computation; the result is a `B×H×W×2` variable.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let c = tape.shape(x).channels();
        if c != self.cfg.channels {
            return crate::error::shape_err(format!("offset network expects {} channels, got {c}", self.cfg.channels));
        }
        let xe = self.embed.forward(tape, bound, x)?;
        let q = self.query.forward(tape, bound, xe)?;
        let k = self.key.forward(tape, bound, xe)?;
        let v = self.value.forward(tape, bound, xe)?;
        let heads = tape.attention(q, k, v, self.cfg.heads)?;
        let attended = self.output.forward(tape, bound, heads)?;
        let xa = tape.add(attended, xe)?;
        let mut hidden = self.ff1.forward(tape, bound, xa)?;
        if self.cfg.ff_activation {
            hidden = tape.gelu(hidden);
        }
        let xf = self.ff2.forward(tape, bound, hidden)?;
        let res = tape.add(xf, xa)?;
        let xhat = self.unembed.forward(tape, bound, res)?;
        tape.channel_pair_mean(xhat)
    }
}

/// Evaluates the network on `x` outside of any training graph.
pub fn compute_displacement_field<T: Scalar>(
    x: &Tensor<T>,
    net: &OffsetNetwork,
    store: &ParamStore<T>,
) -> Result<DisplacementField<T>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let f = net.forward(&mut tape, &bound, xv)?;
    DisplacementField::new(tape.value(f).clone())
}
