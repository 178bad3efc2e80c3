//! The GDCUnet segmentation network.
//!
//! A U-shaped encoder/decoder over `depth` resolution levels with widths
//! `Cs·2^level`. Every encoder level runs a Conv Block (two 3×3 convs);
//! selected levels append a SAFDConv Block (two deformable convs) and one
//! level appends the Feature Incentive Block (one 7×7 conv). Levels are
//! joined by 2×2 max-pooling. Each decoder level upsamples bilinearly, maps
//! the stream to the skip width with a 1×1 adapter, adds the encoder output
//! of that level, then runs a Conv Block and optionally a SAFDConv Block.
//! A 1×1 head produces one logit channel. ReLU follows every block conv.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Var};
use crate::container;
use crate::error::{config_err, shape_err, Error, Result};
use crate::grid::GridSpec;
use crate::layers::{Bound, ConvInit, ConvLayer, ParamStore};
use crate::safdconv::{SafdConvConfig, SafdConvLayer, SafdHyper};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_FORMAT: &str = "gdcunet-checkpoint";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GdcUnetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub in_channels: usize,
    /// Encoder levels that append a SAFDConv Block after their Conv Block.
    pub safd_encoder_levels: Vec<usize>,
    /// Decoder levels that append a SAFDConv Block after their Conv Block.
    pub safd_decoder_levels: Vec<usize>,
    /// Encoder level followed by the Feature Incentive Block, if any.
    pub incentive_level: Option<usize>,
    pub incentive_kernel: usize,
    /// Operator preset 1–6.
    pub safd_setting: u8,
    /// Replace every deformable conv by a plain conv of the same size and dilation.
    pub ablation_conventional: bool,
    /// GELU inside the offset network feedforward.
    pub ff_activation: bool,
    /// Weight bound of every convolution kernel in the network.
    #[serde(default = "he_init")]
    pub conv_init: ConvInit,
}

fn he_init() -> ConvInit {
    ConvInit::He
}

impl Default for GdcUnetConfig {
    fn default() -> Self {
        GdcUnetConfig {
            base_channels: 16,
            depth: 4,
            in_channels: 3,
            safd_encoder_levels: vec![2],
            safd_decoder_levels: vec![2],
            incentive_level: Some(2),
            incentive_kernel: 7,
            safd_setting: 5,
            ablation_conventional: false,
            ff_activation: false,
            conv_init: ConvInit::He,
        }
    }
}

impl GdcUnetConfig {
    pub fn with_setting(setting: u8) -> Self {
        GdcUnetConfig { safd_setting: setting, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return config_err("depth, base channels and input channels must be positive");
        }
        if self.base_channels % 2 != 0 {
            return config_err("base channels must be even for the offset network");
        }
        SafdHyper::preset(self.safd_setting)?;
        if let Some(&l) = self.safd_encoder_levels.iter().find(|&&l| l >= self.depth) {
            return config_err(format!("encoder level {l} does not exist at depth {}", self.depth));
        }
        if let Some(&l) = self.safd_decoder_levels.iter().find(|&&l| l + 1 >= self.depth) {
            return config_err(format!("decoder level {l} does not exist at depth {}", self.depth));
        }
        if self.safd_encoder_levels.is_empty() && self.safd_decoder_levels.is_empty() && !self.ablation_conventional {
            return config_err("no SAFDConv levels configured");
        }
        if let Some(l) = self.incentive_level {
            if l >= self.depth {
                return config_err(format!("incentive level {l} does not exist at depth {}", self.depth));
            }
            GridSpec::new(self.incentive_kernel, 1)?;
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn hyper(&self) -> Result<SafdHyper> {
        SafdHyper::preset(self.safd_setting)
    }

    /// Spatial extents must be divisible by `2^(depth−1)`.
    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let f = 1usize << (self.depth - 1);
        if shape.channels() != self.in_channels {
            return shape_err(format!("expected {} input channels, got {}", self.in_channels, shape.channels()));
        }
        if shape.height() % f != 0 || shape.width() % f != 0 || shape.height() == 0 || shape.width() == 0 {
            return config_err(format!(
                "input {}×{} is not divisible by {f} at depth {}",
                shape.height(),
                shape.width(),
                self.depth
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unit {
    Conv(ConvLayer),
    Safd(SafdConvLayer),
}

impl Unit {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        match self {
            Unit::Conv(c) => c.forward(tape, bound, x),
            Unit::Safd(s) => s.forward(tape, bound, x),
        }
    }

    /// Closed-form count from the layer configuration.
    pub fn param_count(&self) -> usize {
        match self {
            Unit::Conv(c) => ConvLayer::param_count(c.spec.kernel_size(), c.in_channels, c.out_channels),
            Unit::Safd(s) => s.config.param_count(),
        }
    }

    pub fn kind(&self) -> String {
        match self {
            Unit::Conv(c) if c.spec.dilation() > 1 => {
                format!("conv{0}x{0} d{1}", c.spec.kernel_size(), c.spec.dilation())
            }
            Unit::Conv(c) => format!("conv{0}x{0}", c.spec.kernel_size()),
            Unit::Safd(s) if s.config.dilation > 1 => {
                format!("safdconv{0}x{0} d{1}", s.config.kernel_size, s.config.dilation)
            }
            Unit::Safd(s) => format!("safdconv{0}x{0}", s.config.kernel_size),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Unit::Conv(c) => c.out_channels,
            Unit::Safd(s) => s.config.out_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub unit: Unit,
}

/// Sequence of layers, each followed by ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Block {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            let y = l.unit.forward(tape, bound, x)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.unit.out_channels())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLevel {
    pub conv: Block,
    pub safd: Option<Block>,
    pub incentive: Option<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderLevel {
    pub adapter: Layer,
    pub conv: Block,
    pub safd: Option<Block>,
}

/// Layer handles of a built network; parameters live in the model's store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub encoder: Vec<EncoderLevel>,
    /// Indexed by level; the deepest level has no decoder.
    pub decoder: Vec<DecoderLevel>,
    pub head: Layer,
}

impl Architecture {
    /// Every block and layer in forward order.
    pub fn blocks(&self) -> Vec<&Block> {
        let mut out = Vec::new();
        for e in &self.encoder {
            out.push(&e.conv);
            out.extend(e.safd.as_ref());
            out.extend(e.incentive.as_ref());
        }
        for d in self.decoder.iter().rev() {
            out.push(&d.conv);
            out.extend(d.safd.as_ref());
        }
        out
    }

    /// Every parametric layer in construction order.
    pub fn layers(&self) -> Vec<&Layer> {
        let mut out = Vec::new();
        for e in &self.encoder {
            out.extend(&e.conv.layers);
            out.extend(e.safd.iter().flat_map(|b| &b.layers));
            out.extend(e.incentive.iter().flat_map(|b| &b.layers));
        }
        for d in self.decoder.iter().rev() {
            out.push(&d.adapter);
            out.extend(&d.conv.layers);
            out.extend(d.safd.iter().flat_map(|b| &b.layers));
        }
        out.push(&self.head);
        out
    }
}

/// One row of the parameter table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerParams {
    pub name: String,
    pub kind: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdcUnetModel<T: Scalar> {
    pub config: GdcUnetConfig,
    pub seed: u64,
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

fn conv_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    init: ConvInit,
    name: String,
    spec: GridSpec,
    cin: usize,
    cout: usize,
) -> Layer {
    let unit = Unit::Conv(ConvLayer::with_init(store, &name, spec, cin, cout, init, rng));
    Layer { name, unit }
}

fn conv_block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    init: ConvInit,
    name: String,
    cin: usize,
    cout: usize,
) -> Block {
    let spec = GridSpec::new(3, 1).expect("3x3 grid");
    let layers = vec![
        conv_layer(store, rng, init, format!("{name}.0"), spec, cin, cout),
        conv_layer(store, rng, init, format!("{name}.1"), spec, cout, cout),
    ];
    Block { name, layers }
}

fn safd_block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    cfg: &GdcUnetConfig,
    name: String,
    channels: usize,
) -> Result<Block> {
    let hyper = cfg.hyper()?;
    let mut layers = Vec::with_capacity(2);
    for i in 0..2 {
        let lname = format!("{name}.{i}");
        if cfg.ablation_conventional {
            let spec = GridSpec::new(hyper.kernel_size, hyper.dilation)?;
            layers.push(conv_layer(store, rng, cfg.conv_init, lname, spec, channels, channels));
        } else {
            let mut lc = SafdConvConfig::new(hyper, channels, channels)?;
            lc.ff_activation = cfg.ff_activation;
            let unit = Unit::Safd(SafdConvLayer::with_init(store, &lname, lc, cfg.conv_init, rng)?);
            layers.push(Layer { name: lname, unit });
        }
    }
    Ok(Block { name, layers })
}

impl<T: Scalar> GdcUnetModel<T> {
    /// Deterministic construction: all parameters are drawn from one stream seeded by `seed`.
    pub fn build(config: GdcUnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let cin = if l == 0 { config.in_channels } else { config.channels(l - 1) };
            let c = config.channels(l);
            let conv = conv_block(&mut store, &mut rng, config.conv_init, format!("enc{l}.conv"), cin, c);
            let safd = if config.safd_encoder_levels.contains(&l) {
                Some(safd_block(&mut store, &mut rng, &config, format!("enc{l}.safd"), c)?)
            } else {
                None
            };
            let incentive = if config.incentive_level == Some(l) {
                let spec = GridSpec::new(config.incentive_kernel, 1)?;
                let layer = conv_layer(&mut store, &mut rng, config.conv_init, format!("enc{l}.fib.0"), spec, c, c);
                Some(Block { name: format!("enc{l}.fib"), layers: vec![layer] })
            } else {
                None
            };
            encoder.push(EncoderLevel { conv, safd, incentive });
        }
        let mut decoder: Vec<Option<DecoderLevel>> = (0..config.depth - 1).map(|_| None).collect();
        let one = GridSpec::new(1, 1)?;
        for l in (0..config.depth - 1).rev() {
            let c = config.channels(l);
            let adapter = conv_layer(&mut store, &mut rng, config.conv_init, format!("dec{l}.adapter"), one, config.channels(l + 1), c);
            let conv = conv_block(&mut store, &mut rng, config.conv_init, format!("dec{l}.conv"), c, c);
            let safd = if config.safd_decoder_levels.contains(&l) {
                Some(safd_block(&mut store, &mut rng, &config, format!("dec{l}.safd"), c)?)
            } else {
                None
            };
            decoder[l] = Some(DecoderLevel { adapter, conv, safd });
        }
        let head = conv_layer(&mut store, &mut rng, config.conv_init, "head".into(), one, config.base_channels, 1);
        let arch = Architecture { encoder, decoder: decoder.into_iter().map(|d| d.expect("filled")).collect(), head };
        Ok(GdcUnetModel { config, seed, arch, params: store })
    }

    /// Records the forward pass; `taps` receives every block output by name.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mut taps: Option<&mut Vec<(String, Var)>>,
    ) -> Result<Var> {
        self.config.check_input(tape.shape(x))?;
        let mut record = |name: &str, v: Var| {
            if let Some(t) = taps.as_deref_mut() {
                t.push((name.to_string(), v));
            }
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for (l, level) in self.arch.encoder.iter().enumerate() {
            if l > 0 {
                h = tape.maxpool2(h)?;
            }
            h = level.conv.forward(tape, bound, h)?;
            record(&level.conv.name, h);
            for b in level.safd.iter().chain(&level.incentive) {
                h = b.forward(tape, bound, h)?;
                record(&b.name, h);
            }
            skips.push(h);
        }
        for l in (0..self.config.depth - 1).rev() {
            let level = &self.arch.decoder[l];
            let up = tape.upsample2(h);
            let adapted = level.adapter.unit.forward(tape, bound, up)?;
            if tape.shape(adapted) != tape.shape(skips[l]) {
                return shape_err(format!(
                    "skip {} does not match decoder stream {}",
                    tape.shape(skips[l]),
                    tape.shape(adapted)
                ));
            }
            h = tape.add(adapted, skips[l])?;
            h = level.conv.forward(tape, bound, h)?;
            record(&level.conv.name, h);
            if let Some(b) = &level.safd {
                h = b.forward(tape, bound, h)?;
                record(&b.name, h);
            }
        }
        let logits = self.arch.head.unit.forward(tape, bound, h)?;
        record("logits", logits);
        Ok(logits)
    }

    /// Logits `B×H×W×1` for a `B×H×W×C_in` image batch.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let y = self.forward_tape(&mut tape, &bound, x, None)?;
        Ok(tape.value(y).clone())
    }

    /// Names accepted by [`Self::extract_feature_maps`], in forward order.
    pub fn tap_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.arch.blocks().iter().map(|b| b.name.clone()).collect();
        names.push("logits".into());
        names
    }

    /// Post-activation output of the named block.
    pub fn extract_feature_maps(&self, image: &Tensor<T>, tap: &str) -> Result<Tensor<T>> {
        if !self.tap_names().iter().any(|t| t == tap) {
            return Err(Error::Usage(format!("unknown tap {tap}; valid taps: {}", self.tap_names().join(", "))));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let mut taps = Vec::new();
        self.forward_tape(&mut tape, &bound, x, Some(&mut taps))?;
        let (_, v) = taps.into_iter().find(|(n, _)| n == tap).expect("tap recorded");
        Ok(tape.value(v).clone())
    }

    /// Per-layer counts from the layer configurations.
    pub fn param_table(&self) -> Vec<LayerParams> {
        self.arch
            .layers()
            .into_iter()
            .map(|l| LayerParams { name: l.name.clone(), kind: l.unit.kind(), params: l.unit.param_count() })
            .collect()
    }

    /// Per-layer counts by enumerating stored tensors under each layer prefix.
    pub fn enumerate_params(&self) -> Vec<LayerParams> {
        self.arch
            .layers()
            .into_iter()
            .map(|l| {
                let prefix = format!("{}.", l.name);
                let params = self.params.iter().filter(|p| p.name.starts_with(&prefix)).map(|p| p.value.numel()).sum();
                LayerParams { name: l.name.clone(), kind: l.unit.kind(), params }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn checkpoint_header(&self) -> serde_json::Value {
        json!({
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "config": self.config,
            "seed": self.seed,
            "dtype": T::DTYPE,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(&self.checkpoint_header(), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = container::decode::<T>(bytes)?;
        Self::from_parts(&header, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::save(path, &self.checkpoint_header(), &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, params) = container::load::<T>(path)?;
        Self::from_parts(&header, params)
    }

    fn from_parts(header: &serde_json::Value, params: ParamStore<T>) -> Result<Self> {
        if header.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Format("container is not a model checkpoint".into()));
        }
        let config: GdcUnetConfig = serde_json::from_value(header["config"].clone())?;
        let seed = header["seed"].as_u64().ok_or_else(|| Error::Format("checkpoint header lacks a seed".into()))?;
        let mut model = Self::build(config, seed)?;
        if model.params.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, configuration needs {}",
                params.len(),
                model.params.len()
            )));
        }
        for (want, got) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {} {} does not match expected {} {}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> GdcUnetModel<U> {
        GdcUnetModel { config: self.config.clone(), seed: self.seed, arch: self.arch.clone(), params: self.params.cast() }
    }
}

/// Total parameter count of the network a configuration describes.
pub fn param_count(config: &GdcUnetConfig) -> Result<usize> {
    Ok(GdcUnetModel::<f32>::build(config.clone(), 0)?.param_table().iter().map(|r| r.params).sum())
}
