//! Deformable convolution driven by a learned, channel-shared displacement
//! field: the input is warped by the field computed from itself, then a
//! standard dilated convolution is applied. Shapes in and out are the same
//! as those of a conventional convolution with the same kernel.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::grid::GridSpec;
use crate::layers::{Bound, ConvInit, ConvLayer, ParamStore};
use crate::offset::{OffsetNetConfig, OffsetNetwork};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Operator hyperparameters independent of channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafdHyper {
    pub kernel_size: usize,
    pub dilation: usize,
    pub embed_multiplier: usize,
    pub heads: usize,
    pub hidden_dim: usize,
}

impl SafdHyper {
    /// Presets 1–6.
    pub fn preset(setting: u8) -> Result<Self> {
        let (kernel_size, dilation, embed_multiplier, heads, hidden_dim) = match setting {
            1 => (5, 1, 1, 4, 32),
            2 => (7, 1, 1, 4, 32),
            3 => (3, 2, 1, 4, 32),
            4 => (5, 1, 1, 4, 64),
            5 => (5, 1, 2, 4, 64),
            6 => (5, 1, 4, 4, 64),
            _ => return config_err(format!("unknown setting {setting}; expected 1-6")),
        };
        Ok(SafdHyper { kernel_size, dilation, embed_multiplier, heads, hidden_dim })
    }
}

impl fmt::Display for SafdHyper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Ks={} Ds={} E={} h={} D_hidden={}",
            self.kernel_size, self.dilation, self.embed_multiplier, self.heads, self.hidden_dim
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafdConvConfig {
    pub kernel_size: usize,
    pub dilation: usize,
    pub embed_multiplier: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub ff_activation: bool,
}

impl SafdConvConfig {
    pub fn new(hyper: SafdHyper, in_channels: usize, out_channels: usize) -> Result<Self> {
        let cfg = SafdConvConfig {
            kernel_size: hyper.kernel_size,
            dilation: hyper.dilation,
            embed_multiplier: hyper.embed_multiplier,
            heads: hyper.heads,
            hidden_dim: hyper.hidden_dim,
            in_channels,
            out_channels,
            ff_activation: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(setting: u8, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(SafdHyper::preset(setting)?, in_channels, out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.out_channels == 0 {
            return config_err("output channel count must be positive");
        }
        self.offset_config().validate()
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.kernel_size, self.dilation)
    }

    pub fn offset_config(&self) -> OffsetNetConfig {
        OffsetNetConfig {
            embed_multiplier: self.embed_multiplier,
            heads: self.heads,
            hidden_dim: self.hidden_dim,
            channels: self.in_channels,
            ff_activation: self.ff_activation,
        }
    }

    /// Parameters of the offset network alone.
    pub fn offset_param_count(&self) -> usize {
        self.offset_config().param_count()
    }

    /// Parameters of the convolution kernel and bias alone.
    pub fn kernel_param_count(&self) -> usize {
        ConvLayer::param_count(self.kernel_size, self.in_channels, self.out_channels)
    }

    pub fn param_count(&self) -> usize {
        self.offset_param_count() + self.kernel_param_count()
    }
}

/// Layer-level parameter count of a configuration.
pub fn param_count(config: &SafdConvConfig) -> usize {
    config.param_count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafdConvLayer {
    pub config: SafdConvConfig,
    pub offset: OffsetNetwork,
    pub conv: ConvLayer,
}

impl SafdConvLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, config: SafdConvConfig, rng: &mut R) -> Result<Self> {
        Self::with_init(store, name, config, ConvInit::FanIn, rng)
    }

    /// As [`Self::new`] with a chosen bound for the sampling kernel.
    pub fn with_init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: SafdConvConfig,
        init: ConvInit,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let offset = OffsetNetwork::new(store, &format!("{name}.offset"), config.offset_config(), rng)?;
        let (cin, cout) = (config.in_channels, config.out_channels);
        let conv = ConvLayer::with_init(store, &format!("{name}.conv"), config.grid()?, cin, cout, init, rng);
        Ok(SafdConvLayer { config, offset, conv })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let c = tape.shape(x).channels();
        if c != self.config.in_channels {
            return shape_err(format!("layer expects {} channels, got {c}", self.config.in_channels));
        }
        let field = self.offset.forward(tape, bound, x)?;
        let warped = tape.warp(x, field)?;
        self.conv.forward(tape, bound, warped)
    }
}

/// Evaluates one layer outside of any training graph.
pub fn safdconv_forward<T: Scalar>(x: &Tensor<T>, layer: &SafdConvLayer, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = layer.forward(&mut tape, &bound, xv)?;
    Ok(tape.value(y).clone())
}
