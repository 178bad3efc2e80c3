//! Synthetic vessel images: recursively branching curved strokes, darker
//! than a smoothly textured reddish background, plus pixel noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::metrics::BinaryMask;
use crate::tensor::{Shape, Tensor};

use super::SamplePair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    /// Number of root vessels.
    pub branch_count: usize,
    /// Levels of recursive branching below each root.
    pub branch_depth: usize,
    /// Root vessel width range in pixels; children are narrower.
    pub width_min: f64,
    pub width_max: f64,
    /// Maximum heading change per step, radians. A heading `h` moves by
    /// `(sin h, cos h)` in (row, column).
    pub curvature: f64,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            size: 128,
            branch_count: 3,
            branch_depth: 2,
            width_min: 2.0,
            width_max: 4.0,
            curvature: 0.25,
            noise: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(seed: u64, size: usize) -> Self {
        SynthConfig { seed, size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return config_err(format!("canvas size {} is too small", self.size));
        }
        if !(self.width_min > 0.0 && self.width_min <= self.width_max) {
            return config_err("vessel width range must satisfy 0 < min <= max");
        }
        if !(self.curvature >= 0.0 && self.noise >= 0.0) {
            return config_err("curvature and noise must be non-negative");
        }
        Ok(())
    }
}

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    half_width: f64,
}

fn grow(rng: &mut ChaCha8Rng, cfg: &SynthConfig, start: (f64, f64), heading: f64, width: f64, level: usize, out: &mut Vec<Segment>) {
    let n = cfg.size as f64;
    let step = 2.0;
    let length = n * rng.gen_range(0.45..0.75) * 0.7f64.powi(level as i32);
    let steps = (length / step).ceil() as usize;
    let branch_at: Vec<usize> = if level < cfg.branch_depth {
        (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(steps / 4..steps.max(2) * 3 / 4 + 1)).collect()
    } else {
        Vec::new()
    };
    let (mut p, mut h) = (start, heading);
    for s in 0..steps {
        h += rng.gen_range(-cfg.curvature..=cfg.curvature);
        let q = (p.0 + step * h.sin(), p.1 + step * h.cos());
        out.push(Segment { a: p, b: q, half_width: width / 2.0 });
        p = q;
        if !(-4.0..n + 4.0).contains(&p.0) || !(-4.0..n + 4.0).contains(&p.1) {
            break;
        }
        for _ in branch_at.iter().filter(|&&b| b == s) {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let child = h + side * rng.gen_range(0.35..1.0);
            grow(rng, cfg, p, child, (width * 0.7).max(1.0), level + 1, out);
        }
    }
}

/// Distance from `p` to segment `ab`.
fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Deterministic image/mask pair for `cfg`.
pub fn synth_vessels(cfg: &SynthConfig) -> Result<SamplePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let nf = n as f64;

    let mut segments = Vec::new();
    for _ in 0..cfg.branch_count {
        // roots enter from a random border point heading inward
        let t = rng.gen_range(0.1..0.9) * nf;
        let (start, heading) = match rng.gen_range(0..4) {
            0 => ((0.0, t), PI / 2.0),
            1 => ((nf - 1.0, t), -PI / 2.0),
            2 => ((t, 0.0), 0.0),
            _ => ((t, nf - 1.0), PI),
        };
        let heading = heading + rng.gen_range(-0.5..0.5);
        let width = rng.gen_range(cfg.width_min..=cfg.width_max);
        grow(&mut rng, cfg, start, heading, width, 0, &mut segments);
    }

    // signed distance to the nearest stroke edge; ≤ 0 inside a vessel
    let mut signed = vec![f64::INFINITY; n * n];
    for s in &segments {
        let r = s.half_width + 1.0;
        let i0 = (s.a.0.min(s.b.0) - r).floor().max(0.0) as usize;
        let i1 = ((s.a.0.max(s.b.0) + r).ceil().max(0.0) as usize).min(n - 1);
        let j0 = (s.a.1.min(s.b.1) - r).floor().max(0.0) as usize;
        let j1 = ((s.a.1.max(s.b.1) + r).ceil().max(0.0) as usize).min(n - 1);
        for i in i0..=i1 {
            for j in j0..=j1 {
                let d = seg_dist((i as f64, j as f64), s.a, s.b) - s.half_width;
                let cell = &mut signed[i * n + j];
                if d < *cell {
                    *cell = d;
                }
            }
        }
    }

    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let f = rng.gen_range(1.0..4.0) * 2.0 * PI / nf;
            let a = rng.gen_range(0.0..2.0 * PI);
            (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.02..0.06))
        })
        .collect();
    let brightness = rng.gen_range(0.75..0.9);
    let tint = [1.0, 0.6, 0.4];
    let contrast = [0.45, 0.6, 0.5];

    let mut image = Tensor::<f64>::zeros(Shape::new(1, n, n, 3));
    let mut mask = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let d = signed[i * n + j];
            mask.push(d <= 0.0);
            let coverage = (0.5 - d).clamp(0.0, 1.0);
            let texture: f64 = waves.iter().map(|&(fy, fx, ph, amp)| amp * (fy * i as f64 + fx * j as f64 + ph).sin()).sum();
            for c in 0..3 {
                let bg = brightness * tint[c] + texture;
                let v = bg * (1.0 - contrast[c] * coverage) + rng.gen_range(-cfg.noise..=cfg.noise);
                image.set(0, i, j, c, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(SamplePair { id: format!("synth_{:04}", cfg.seed), image, mask: BinaryMask::new(n, n, mask)? })
}

/// `count` pairs with consecutive seeds starting at `first_seed`.
pub fn synth_set(first_seed: u64, count: usize, template: &SynthConfig) -> Result<Vec<SamplePair>> {
    (0..count as u64).map(|k| synth_vessels(&SynthConfig { seed: first_seed + k, ..*template })).collect()
}
