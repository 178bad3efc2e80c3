//! Samples, synthetic data, image files and value histograms.

mod io;
mod synth;

use std::fmt::Write as _;

use crate::error::{config_err, Result};
use crate::metrics::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{
    load_dataset, load_pairs, read_image, read_mask, split_sizes, write_dataset, write_feature_map, write_image,
    write_mask, LoadConfig,
};
pub use synth::{synth_set, synth_vessels, SynthConfig};

/// One image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `1×H×W×3`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub mask: BinaryMask,
}

impl SamplePair {
    pub fn extent(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }
}

/// Stacks the selected samples into an image batch and a target batch.
pub fn batch<T: Scalar>(samples: &[SamplePair], indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<Tensor<T>> = indices.iter().map(|&i| samples[i].image.cast()).collect();
    let masks: Vec<Tensor<T>> = indices.iter().map(|&i| samples[i].mask.to_tensor()).collect();
    Ok((Tensor::stack(&images.iter().collect::<Vec<_>>())?, Tensor::stack(&masks.iter().collect::<Vec<_>>())?))
}

/// Equal-width histogram over `[min, max]` of the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Two columns: lower bin edge and count.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower_edge,count\n");
        for (e, c) in self.edges.iter().zip(&self.counts) {
            let _ = writeln!(out, "{e},{c}");
        }
        out
    }
}

/// The maximum falls in the last bin; a constant input puts all mass in the first.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return config_err("histogram needs at least one bin");
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut counts = vec![0u64; bins];
    if values.is_empty() {
        return Ok(Histogram { edges: vec![0.0; bins + 1], counts });
    }
    let span = hi - lo;
    for &v in values {
        let k = if span > 0.0 { (((v - lo) / span) * bins as f64).floor() as usize } else { 0 };
        counts[k.min(bins - 1)] += 1;
    }
    let edges = (0..=bins).map(|k| lo + span * k as f64 / bins as f64).collect();
    Ok(Histogram { edges, counts })
}

/// Histogram of channel `c` of a tensor.
pub fn channel_histogram<T: Scalar>(t: &Tensor<T>, c: usize, bins: usize) -> Result<Histogram> {
    let s = t.shape();
    let values: Vec<f64> = t.data().iter().skip(c).step_by(s.channels().max(1)).map(|v| v.as_f64()).collect();
    histogram(&values, bins)
}
