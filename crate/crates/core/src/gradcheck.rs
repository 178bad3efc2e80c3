//! Finite-difference verification of every backward rule.
//!
//! Each case draws a small random instance in double precision, reduces the
//! op output to a scalar with random weights, and compares the tape gradient
//! of every input against central differences. Instances whose sample points
//! sit within `1e-3` of a non-differentiable point (ReLU at zero, max-pool
//! ties, integer bilinear coordinates) are redrawn.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::layers::{Bound, ParamStore};
use crate::loss::LossConfig;
use crate::offset::{OffsetNetConfig, OffsetNetwork};
use crate::safdconv::{SafdConvConfig, SafdConvLayer, SafdHyper};
use crate::tensor::{Shape, Tensor};

const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Scope {
    Tensor,
    Warp,
    Offset,
    Safdconv,
    Loss,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::Tensor, Scope::Warp, Scope::Offset, Scope::Safdconv, Scope::Loss];

    pub fn parse(name: &str) -> Option<Scope> {
        Some(match name {
            "tensor" => Scope::Tensor,
            "warp" => Scope::Warp,
            "offset" => Scope::Offset,
            "safdconv" => Scope::Safdconv,
            "loss" => Scope::Loss,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::Tensor => "tensor",
            Scope::Warp => "warp",
            Scope::Offset => "offset",
            Scope::Safdconv => "safdconv",
            Scope::Loss => "loss",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub instances: usize,
    /// Maximum number of coordinates perturbed per input tensor.
    pub coords_per_input: usize,
    pub seed: u64,
    pub inject_sign_flip: Option<OpKind>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { step: 1e-5, tolerance: 1e-4, instances: 20, coords_per_input: 48, seed: 0, inject_sign_flip: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub worst_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScopeReport {
    pub scope: Scope,
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl ScopeReport {
    pub fn worst(&self) -> f64 {
        self.ops.iter().map(|o| o.worst_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.worst_rel_err <= self.tolerance)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

type Build<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>;

/// One random instance: input tensors plus a graph built over their leaves.
struct Instance<'a> {
    inputs: Vec<Tensor<f64>>,
    build: Build<'a>,
}

fn evaluate(inst: &Instance<'_>, inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>) -> Result<(f64, Tensor<f64>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars)?;
    let value = tape.value(out).clone();
    let s = match weights {
        Some(w) => value.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
        None => value.sum(),
    };
    Ok((s, value))
}

/// Worst relative error over sampled coordinates of every input.
fn check_instance<R: Rng>(inst: &Instance<'_>, cfg: &CheckConfig, rng: &mut R) -> Result<f64> {
    let (_, out0) = evaluate(inst, &inst.inputs, None)?;
    let weights = Tensor::uniform(out0.shape(), 1.0, rng);

    let mut tape = Tape::new();
    if let Some(kind) = cfg.inject_sign_flip {
        tape.inject_sign_flip(kind);
    }
    let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars)?;
    let loss = tape.weighted_sum(out, weights.clone())?;
    let mut grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut perturbed = inst.inputs.clone();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.take_or_zeros(v, inst.inputs[k].shape());
        let n = inst.inputs[k].numel();
        let coords: Vec<usize> = if n <= cfg.coords_per_input {
            (0..n).collect()
        } else {
            (0..cfg.coords_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for idx in coords {
            let orig = perturbed[k].data()[idx];
            perturbed[k].data_mut()[idx] = orig + cfg.step;
            let (fp, _) = evaluate(inst, &perturbed, Some(&weights))?;
            perturbed[k].data_mut()[idx] = orig - cfg.step;
            let (fm, _) = evaluate(inst, &perturbed, Some(&weights))?;
            perturbed[k].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            worst = worst.max(relative_error(analytic.data()[idx], numeric));
        }
    }
    Ok(worst)
}

fn run_op<'a, R: Rng>(
    op: &str,
    cfg: &CheckConfig,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Option<Instance<'a>>,
) -> Result<OpReport> {
    let mut worst = 0.0f64;
    for _ in 0..cfg.instances {
        let inst = (0..MAX_REDRAWS)
            .find_map(|_| draw(rng))
            .ok_or_else(|| Error::Usage(format!("{op}: no kink-free instance after {MAX_REDRAWS} draws")))?;
        worst = worst.max(check_instance(&inst, cfg, rng)?);
    }
    Ok(OpReport { op: op.to_string(), instances: cfg.instances, worst_rel_err: worst })
}

fn near_integer(v: f64) -> bool {
    (v - v.round()).abs() < KINK_MARGIN
}

/// True when some bilinear query `(i + Δr, j + Δc)` lies near an integer.
fn field_has_kink(field: &Tensor<f64>) -> bool {
    let s = field.shape();
    for b in 0..s.batch() {
        for i in 0..s.height() {
            for j in 0..s.width() {
                if near_integer(i as f64 + field.at(b, i, j, 0)) || near_integer(j as f64 + field.at(b, i, j, 1)) {
                    return true;
                }
            }
        }
    }
    false
}

fn random_shape<R: Rng>(rng: &mut R, max_hw: usize, channels: usize) -> Shape {
    Shape::new(rng.gen_range(1..=2), rng.gen_range(2..=max_hw), rng.gen_range(2..=max_hw), channels)
}

fn tensor_scope<R: Rng>(cfg: &CheckConfig, rng: &mut R) -> Result<Vec<OpReport>> {
    let mut ops = Vec::new();
    ops.push(run_op("matmul", cfg, rng, |r| {
        let (n, k, m) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
        Some(Instance {
            inputs: vec![
                Tensor::uniform(Shape::new(1, 2, n, k), 1.0, r),
                Tensor::uniform(Shape::matrix(k, m), 1.0, r),
                Tensor::uniform(Shape::matrix(1, m), 1.0, r),
            ],
            build: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        })
    })?);
    ops.push(run_op("conv2d", cfg, rng, |r| {
        let ks = [1, 3, 5][r.gen_range(0..3)];
        let spec = GridSpec::new(ks, r.gen_range(1..=2)).ok()?;
        let cin = r.gen_range(1..=3);
        let cout = r.gen_range(1..=3);
        Some(Instance {
            inputs: vec![
                Tensor::uniform(random_shape(r, 6, cin), 1.0, r),
                Tensor::uniform(Shape::new(ks, ks, cin, cout), 1.0, r),
                Tensor::uniform(Shape::matrix(1, cout), 1.0, r),
            ],
            build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)),
        })
    })?);
    ops.push(run_op("softmax", cfg, rng, |r| {
        let c = r.gen_range(1..=6);
        Some(Instance {
            inputs: vec![Tensor::uniform(random_shape(r, 4, c), 3.0, r)],
            build: Box::new(|t, v| Ok(t.softmax_lastdim(v[0]))),
        })
    })?);
    ops.push(run_op("attention", cfg, rng, |r| {
        let heads = r.gen_range(1..=3);
        let dh = r.gen_range(1..=3);
        let shape = random_shape(r, 3, heads * dh);
        Some(Instance {
            inputs: (0..3).map(|_| Tensor::uniform(shape, 1.5, r)).collect(),
            build: Box::new(move |t, v| t.attention(v[0], v[1], v[2], heads)),
        })
    })?);
    ops.push(run_op("maxpool2", cfg, rng, |r| {
        let s = Shape::new(r.gen_range(1..=2), 2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3), r.gen_range(1..=2));
        let x = Tensor::uniform(s, 1.0, r);
        for b in 0..s.batch() {
            for i in (0..s.height()).step_by(2) {
                for j in (0..s.width()).step_by(2) {
                    for c in 0..s.channels() {
                        let mut w: [f64; 4] = [x.at(b, i, j, c), x.at(b, i + 1, j, c), x.at(b, i, j + 1, c), x.at(b, i + 1, j + 1, c)];
                        w.sort_by(|a, b| b.total_cmp(a));
                        if w[0] - w[1] < KINK_MARGIN {
                            return None;
                        }
                    }
                }
            }
        }
        Some(Instance { inputs: vec![x], build: Box::new(|t, v| t.maxpool2(v[0])) })
    })?);
    ops.push(run_op("upsample2", cfg, rng, |r| {
        let c = r.gen_range(1..=2);
        Some(Instance {
            inputs: vec![Tensor::uniform(random_shape(r, 4, c), 1.0, r)],
            build: Box::new(|t, v| Ok(t.upsample2(v[0]))),
        })
    })?);
    ops.push(run_op("relu", cfg, rng, |r| {
        let x = Tensor::uniform(random_shape(r, 4, 2), 1.0, r);
        if x.data().iter().any(|v: &f64| v.abs() < KINK_MARGIN) {
            return None;
        }
        Some(Instance { inputs: vec![x], build: Box::new(|t, v| Ok(t.relu(v[0]))) })
    })?);
    ops.push(run_op("gelu", cfg, rng, |r| {
        Some(Instance {
            inputs: vec![Tensor::uniform(random_shape(r, 4, 2), 3.0, r)],
            build: Box::new(|t, v| Ok(t.gelu(v[0]))),
        })
    })?);
    ops.push(run_op("channel_pair_mean", cfg, rng, |r| {
        let c = 2 * r.gen_range(1..=3);
        Some(Instance {
            inputs: vec![Tensor::uniform(random_shape(r, 4, c), 1.0, r)],
            build: Box::new(|t, v| t.channel_pair_mean(v[0])),
        })
    })?);
    ops.push(run_op("elementwise", cfg, rng, |r| {
        let s = random_shape(r, 4, 2);
        Some(Instance {
            inputs: vec![Tensor::uniform(s, 1.0, r), Tensor::uniform(s, 1.0, r)],
            build: Box::new(|t, v| {
                let p = t.mul(v[0], v[1])?;
                let q = t.add(p, v[0])?;
                Ok(t.scale(q, 1.5))
            }),
        })
    })?);
    Ok(ops)
}

fn warp_scope<R: Rng>(cfg: &CheckConfig, rng: &mut R) -> Result<Vec<OpReport>> {
    Ok(vec![run_op("warp", cfg, rng, |r| {
        let c = r.gen_range(1..=3);
        let s = random_shape(r, 6, c);
        let x = Tensor::uniform(s, 1.0, r);
        // spans interior, border and clamped queries
        let field = Tensor::uniform(s.with_channels(2), 2.5, r);
        if field_has_kink(&field) {
            return None;
        }
        Some(Instance { inputs: vec![x, field], build: Box::new(|t, v| t.warp(v[0], v[1])) })
    })?])
}

/// Parameters of a fresh network with a wider init so fields reach sub-pixel
/// and multi-pixel magnitudes.
fn scaled_store<R: Rng>(store: ParamStore<f64>, r: &mut R, scale: f64) -> Vec<Tensor<f64>> {
    store
        .iter()
        .map(|p| {
            let bump = Tensor::uniform(p.value.shape(), 0.1, r);
            let data = p.value.data().iter().zip(bump.data()).map(|(w, b)| scale * w + b).collect();
            Tensor::new(p.value.shape(), data).expect("same shape")
        })
        .collect()
}

fn offset_scope<R: Rng>(cfg: &CheckConfig, rng: &mut R) -> Result<Vec<OpReport>> {
    let mut ops = Vec::new();
    for (op, ff_activation) in [("offset_network", false), ("offset_network_gelu", true)] {
        ops.push(run_op(op, cfg, rng, |r| {
            let c = 2 * r.gen_range(1..=2);
            let heads = [1, 2][r.gen_range(0..2)];
            let mut ncfg = OffsetNetConfig::new(c, r.gen_range(1..=2), heads, r.gen_range(2..=6)).ok()?;
            ncfg.ff_activation = ff_activation;
            let mut store = ParamStore::new();
            let net = OffsetNetwork::new(&mut store, "off", ncfg, r).ok()?;
            let mut inputs = vec![Tensor::uniform(random_shape(r, 4, c), 1.0, r)];
            inputs.extend(scaled_store(store, r, 1.0));
            Some(Instance {
                inputs,
                build: Box::new(move |t, v| net.forward(t, &Bound::from_vars(v[1..].to_vec()), v[0])),
            })
        })?);
    }
    Ok(ops)
}

fn safdconv_scope<R: Rng>(cfg: &CheckConfig, rng: &mut R) -> Result<Vec<OpReport>> {
    Ok(vec![run_op("safdconv", cfg, rng, |r| {
        let c = 2 * r.gen_range(1..=2);
        let hyper = SafdHyper {
            kernel_size: [1, 3][r.gen_range(0..2)],
            dilation: r.gen_range(1..=2),
            embed_multiplier: r.gen_range(1..=2),
            heads: [1, 2][r.gen_range(0..2)],
            hidden_dim: r.gen_range(2..=6),
        };
        let mut lcfg = SafdConvConfig::new(hyper, c, r.gen_range(1..=3)).ok()?;
        lcfg.ff_activation = r.gen_bool(0.5);
        let mut store = ParamStore::new();
        let layer = SafdConvLayer::new(&mut store, "s", lcfg, r).ok()?;
        let x = Tensor::uniform(random_shape(r, 4, c), 1.0, r);
        let params = scaled_store(store, r, 2.0);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let field = layer.offset.forward(&mut tape, &Bound::from_vars(pv[..layer_offset_len(&layer)].to_vec()), xv).ok()?;
        if field_has_kink(tape.value(field)) {
            return None;
        }
        let mut inputs = vec![x];
        inputs.extend(params);
        Some(Instance {
            inputs,
            build: Box::new(move |t, v| layer.forward(t, &Bound::from_vars(v[1..].to_vec()), v[0])),
        })
    })?])
}

/// The offset network's tensors are registered first in a layer's store.
fn layer_offset_len(layer: &SafdConvLayer) -> usize {
    2 * layer.offset.linears().len()
}

fn loss_scope<R: Rng>(cfg: &CheckConfig, rng: &mut R) -> Result<Vec<OpReport>> {
    Ok(vec![run_op("bce_dice", cfg, rng, |r| {
        let s = random_shape(r, 5, 1);
        let logits = Tensor::uniform(s, 3.0, r);
        let targets = Tensor::from_fn(s, |_, _, _, _| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
        Some(Instance {
            inputs: vec![logits],
            build: Box::new(move |t, v| t.bce_dice(v[0], &targets, LossConfig::default())),
        })
    })?])
}

/// Runs every op check of one scope.
pub fn run_scope(scope: Scope, cfg: &CheckConfig) -> Result<ScopeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (scope as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let ops = match scope {
        Scope::Tensor => tensor_scope(cfg, &mut rng)?,
        Scope::Warp => warp_scope(cfg, &mut rng)?,
        Scope::Offset => offset_scope(cfg, &mut rng)?,
        Scope::Safdconv => safdconv_scope(cfg, &mut rng)?,
        Scope::Loss => loss_scope(cfg, &mut rng)?,
    };
    Ok(ScopeReport { scope, tolerance: cfg.tolerance, ops })
}
