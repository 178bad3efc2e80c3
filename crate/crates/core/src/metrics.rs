//! Binary segmentation metrics: overlap ratios from exact pixel counts and
//! Hausdorff distances over foreground pixel sets.
//!
//! Degenerate cases: when both masks are empty every ratio is 1 and both
//! distances are 0. A ratio whose denominator is empty is otherwise 0,
//! except specificity, which is 1 when the ground truth has no negatives.
//! Distances are undefined (`None`) when exactly one mask is empty.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!("{} values for a {height}×{width} mask", data.len()));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|k| f(k / width, k % width)).collect();
        BinaryMask { height, width, data }
    }

    /// Batch item `b` of a one-channel tensor whose values are exactly 0 or 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, b: usize) -> Result<Self> {
        let s = t.shape();
        if s.channels() != 1 || b >= s.batch() {
            return shape_err(format!("cannot take mask {b} of {s}"));
        }
        let item = &t.data()[b * s.height() * s.width()..(b + 1) * s.height() * s.width()];
        let mut data = Vec::with_capacity(item.len());
        for &v in item {
            if v == T::zero() {
                data.push(false);
            } else if v == T::one() {
                data.push(true);
            } else {
                return Err(Error::Validation(format!("mask value {v} is not binary")));
            }
        }
        Ok(BinaryMask { height: s.height(), width: s.width(), data })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        Tensor::new(Shape::new(1, self.height, self.width, 1), data).expect("mask extents")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Foreground coordinates in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.data.len()).filter(|&k| self.data[k]).map(|k| (k / self.width, k % self.width)).collect()
    }

    pub fn complement(&self) -> Self {
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|v| !v).collect() }
    }

    fn check_pair(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return shape_err(format!(
                "mask extents {}×{} and {}×{} differ",
                self.height, self.width, other.height, other.width
            ));
        }
        Ok(())
    }
}

/// `logit > 0`, i.e. `σ(logit) > 0.5`, for batch item `b` of a one-channel tensor.
pub fn threshold<T: Scalar>(logits: &Tensor<T>, b: usize) -> Result<BinaryMask> {
    let s = logits.shape();
    if s.channels() != 1 || b >= s.batch() {
        return shape_err(format!("cannot threshold item {b} of {s}"));
    }
    let n = s.height() * s.width();
    let data = logits.data()[b * n..(b + 1) * n].iter().map(|&v| v > T::zero()).collect();
    Ok(BinaryMask { height: s.height(), width: s.width(), data })
}

/// Masks for every batch item.
pub fn threshold_batch<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<BinaryMask>> {
    (0..logits.shape().batch()).map(|b| threshold(logits, b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn count(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        pred.check_pair(gt)?;
        let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

/// Exact overlap ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub confusion: Confusion,
    pub iou: Ratio<u64>,
    pub dice: Ratio<u64>,
    pub recall: Ratio<u64>,
    pub specificity: Ratio<u64>,
    pub precision: Ratio<u64>,
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl Overlap {
    pub fn iou_f64(&self) -> f64 {
        ratio_f64(self.iou)
    }
    pub fn dice_f64(&self) -> f64 {
        ratio_f64(self.dice)
    }
    pub fn recall_f64(&self) -> f64 {
        ratio_f64(self.recall)
    }
    pub fn specificity_f64(&self) -> f64 {
        ratio_f64(self.specificity)
    }
    pub fn precision_f64(&self) -> f64 {
        ratio_f64(self.precision)
    }
}

pub fn overlap_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<Overlap> {
    let c = Confusion::count(pred, gt)?;
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    let ratio = |num: u64, den: u64, empty: u64| if den == 0 { Ratio::from_integer(empty) } else { Ratio::new(num, den) };
    let fallback = u64::from(both_empty);
    Ok(Overlap {
        confusion: c,
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, 1),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1),
        recall: ratio(c.tp, c.tp + c.fn_, fallback),
        specificity: ratio(c.tn, c.tn + c.fp, 1),
        precision: ratio(c.tp, c.tp + c.fp, fallback),
    })
}

/// Symmetric Hausdorff distance and its pooled 95th percentile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hausdorff {
    pub hd: f64,
    pub hd95: f64,
}

/// 1-D squared distance transform of `f` (lower envelope of parabolas).
/// `None` entries carry no point.
fn edt_1d(f: &[Option<i64>], out: &mut [Option<i64>], v: &mut Vec<usize>, z: &mut Vec<(i64, i64)>) {
    v.clear();
    z.clear();
    // intersection abscissa of parabolas rooted at p < q, as (numerator, positive denominator)
    let cross = |p: usize, q: usize, fp: i64, fq: i64| {
        let (p, q) = (p as i64, q as i64);
        ((fq + q * q) - (fp + p * p), 2 * (q - p))
    };
    for (q, fq) in f.iter().enumerate() {
        let Some(fq) = *fq else { continue };
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                break;
            };
            let s = cross(p, q, f[p].expect("finite root"), fq);
            // drop the last parabola while the new one overtakes it before its own start
            if let Some(&zl) = z.last() {
                if (s.0 as i128) * (zl.1 as i128) <= (zl.0 as i128) * (s.1 as i128) {
                    v.pop();
                    z.pop();
                    continue;
                }
            }
            z.push(s);
            v.push(q);
            break;
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k < z.len() && (z[k].0 as i128) < (q as i128) * (z[k].1 as i128) {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = Some(d * d + f[v[k]].expect("finite root"));
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel of `mask`; `None` everywhere when the mask is empty.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<Option<i64>> {
    let (h, w) = (mask.height, mask.width);
    let mut cols = vec![None; h * w];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut f = vec![None; h.max(w)];
    let mut out = vec![None; h.max(w)];
    for j in 0..w {
        for i in 0..h {
            f[i] = if mask.get(i, j) { Some(0) } else { None };
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for i in 0..h {
            cols[i * w + j] = out[i];
        }
    }
    let mut result = vec![None; h * w];
    for i in 0..h {
        edt_1d(&cols[i * w..(i + 1) * w], &mut out[..w], &mut v, &mut z);
        result[i * w..(i + 1) * w].copy_from_slice(&out[..w]);
    }
    result
}

/// Linear-interpolation percentile of sorted values at fraction `q`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Both-direction point-to-set distances reduced to HD and HD95.
pub fn hausdorff_from_squared(mut d2: Vec<i64>) -> Hausdorff {
    d2.sort_unstable();
    let d: Vec<f64> = d2.iter().map(|&v| (v as f64).sqrt()).collect();
    Hausdorff { hd: *d.last().expect("nonempty"), hd95: percentile_sorted(&d, 0.95) }
}

/// `None` when exactly one mask is empty.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<Hausdorff>> {
    pred.check_pair(gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(Some(Hausdorff { hd: 0.0, hd95: 0.0 })),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let to_gt = squared_distance_transform(gt);
    let to_pred = squared_distance_transform(pred);
    let mut d2 = Vec::with_capacity(pred.count() + gt.count());
    for k in 0..pred.data.len() {
        if pred.data[k] {
            d2.push(to_gt[k].expect("gt nonempty"));
        }
        if gt.data[k] {
            d2.push(to_pred[k].expect("pred nonempty"));
        }
    }
    Ok(Some(hausdorff_from_squared(d2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub dice: f64,
    /// `None` when exactly one mask is empty.
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub recall: f64,
    pub specificity: f64,
    pub precision: f64,
}

pub const REPORT_COLUMNS: [&str; 7] = ["iou", "dice", "hd", "hd95", "recall", "specificity", "precision"];

impl MetricsReport {
    pub fn evaluate(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        let o = overlap_metrics(pred, gt)?;
        let h = hausdorff(pred, gt)?;
        Ok(MetricsReport {
            iou: o.iou_f64(),
            dice: o.dice_f64(),
            hd: h.map(|h| h.hd),
            hd95: h.map(|h| h.hd95),
            recall: o.recall_f64(),
            specificity: o.specificity_f64(),
            precision: o.precision_f64(),
        })
    }

    /// Arithmetic mean per column; distances average over defined entries.
    pub fn mean(rows: &[MetricsReport]) -> Option<MetricsReport> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(MetricsReport {
            iou: avg(|r| r.iou),
            dice: avg(|r| r.dice),
            hd: avg_opt(|r| r.hd),
            hd95: avg_opt(|r| r.hd95),
            recall: avg(|r| r.recall),
            specificity: avg(|r| r.specificity),
            precision: avg(|r| r.precision),
        })
    }

    pub fn has_undefined_distance(&self) -> bool {
        self.hd.is_none()
    }

    fn csv_fields(&self) -> [String; 7] {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        [
            self.iou.to_string(),
            self.dice.to_string(),
            opt(self.hd),
            opt(self.hd95),
            self.recall.to_string(),
            self.specificity.to_string(),
            self.precision.to_string(),
        ]
    }
}

/// One row per image plus a trailing `mean` row; undefined distances are
/// written as `undefined`.
pub fn report_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = format!("image,{}\n", REPORT_COLUMNS.join(","));
    for (name, r) in rows {
        let _ = writeln!(out, "{name},{}", r.csv_fields().join(","));
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(m) = MetricsReport::mean(&reports) {
        let _ = writeln!(out, "mean,{}", m.csv_fields().join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |i, j| rows[i].as_bytes()[j] == b'#')
    }

    fn brute_d2(from: &BinaryMask, to: &BinaryMask) -> Vec<i64> {
        let tp = to.points();
        from.points()
            .iter()
            .map(|&(i, j)| {
                tp.iter()
                    .map(|&(a, b)| {
                        let (di, dj) = (i as i64 - a as i64, j as i64 - b as i64);
                        di * di + dj * dj
                    })
                    .min()
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn counting_example() {
        let p = mask(&["###.", "###.", "....", "...."]);
        let g = mask(&["##..", "#...", "...#", "...."]);
        let o = overlap_metrics(&p, &g).unwrap();
        assert_eq!(o.iou, Ratio::new(3, 7));
        assert_eq!(o.dice, Ratio::new(6, 10));
        assert_eq!(o.precision, Ratio::new(3, 6));
        assert_eq!(o.recall, Ratio::new(3, 4));
    }

    #[test]
    fn degenerate_conventions() {
        let e = BinaryMask::empty(3, 3);
        let o = overlap_metrics(&e, &e).unwrap();
        for r in [o.iou, o.dice, o.recall, o.precision, o.specificity] {
            assert_eq!(r, Ratio::from_integer(1));
        }
        assert_eq!(hausdorff(&e, &e).unwrap(), Some(Hausdorff { hd: 0.0, hd95: 0.0 }));
        let one = mask(&["#..", "...", "..."]);
        let o = overlap_metrics(&e, &one).unwrap();
        assert_eq!((o.iou, o.dice, o.recall, o.precision), (Ratio::from_integer(0), Ratio::from_integer(0), Ratio::from_integer(0), Ratio::from_integer(0)));
        assert_eq!(hausdorff(&e, &one).unwrap(), None);
        let full = e.complement();
        assert_eq!(overlap_metrics(&full, &full).unwrap().specificity, Ratio::from_integer(1));
    }

    #[test]
    fn three_four_five() {
        let a = BinaryMask::from_fn(5, 5, |i, j| (i, j) == (0, 0));
        let b = BinaryMask::from_fn(5, 5, |i, j| (i, j) == (3, 4));
        let h = hausdorff(&a, &b).unwrap().unwrap();
        assert_eq!((h.hd, h.hd95), (5.0, 5.0));
    }

    #[test]
    fn threshold_is_strict() {
        let t = Tensor::<f64>::from_f64(Shape::new(1, 1, 3, 1), &[0.0, 3.0, -3.0]).unwrap();
        assert_eq!(threshold(&t, 0).unwrap().values(), &[false, true, false]);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile_sorted(&[0.0, 10.0], 0.95), 9.5);
        assert_eq!(percentile_sorted(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
        assert_eq!(percentile_sorted(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn csv_has_mean_row() {
        let a = mask(&["#.", ".."]);
        let b = mask(&["##", ".."]);
        let e = BinaryMask::empty(2, 2);
        let rows = vec![
            ("x".to_string(), MetricsReport::evaluate(&a, &b).unwrap()),
            ("y".to_string(), MetricsReport::evaluate(&e, &b).unwrap()),
        ];
        let csv = report_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image,iou,dice,hd,hd95,recall,specificity,precision");
        assert!(lines[2].contains("undefined"));
        assert!(lines[3].starts_with("mean,0.25,"));
        assert_eq!(lines.len(), 4);
    }

    fn arb_pair(h: usize, w: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (prop::collection::vec(any::<bool>(), h * w), prop::collection::vec(prop::bool::weighted(0.2), h * w))
            .prop_map(move |(a, b)| (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap()))
    }

    proptest! {
        #[test]
        fn dice_iou_identity_and_symmetry((p, g) in arb_pair(8, 8)) {
            let o = overlap_metrics(&p, &g).unwrap();
            let one = Ratio::from_integer(1);
            prop_assert_eq!(o.dice, Ratio::from_integer(2) * o.iou / (one + o.iou));
            let r = overlap_metrics(&g, &p).unwrap();
            prop_assert_eq!(o.iou, r.iou);
            prop_assert_eq!(o.dice, r.dice);
            if !p.is_empty() && !g.is_empty() {
                prop_assert_eq!(o.precision, r.recall);
            }
            for x in [o.iou, o.dice, o.recall, o.precision, o.specificity] {
                prop_assert!(x <= one);
            }
        }

        #[test]
        fn distance_transform_matches_brute_force((p, g) in arb_pair(7, 9)) {
            prop_assume!(!g.is_empty());
            let d = squared_distance_transform(&g);
            let all = BinaryMask::from_fn(7, 9, |_, _| true);
            prop_assert_eq!(d.iter().map(|v| v.unwrap()).collect::<Vec<_>>(), brute_d2(&all, &g));
            let _ = p;
        }

        #[test]
        fn hausdorff_matches_all_pairs((p, g) in arb_pair(8, 8)) {
            prop_assume!(!p.is_empty() && !g.is_empty());
            let h = hausdorff(&p, &g).unwrap().unwrap();
            let mut d2 = brute_d2(&p, &g);
            d2.extend(brute_d2(&g, &p));
            prop_assert_eq!(h, hausdorff_from_squared(d2));
            prop_assert_eq!(Some(h), hausdorff(&g, &p).unwrap());
            prop_assert!(h.hd95 <= h.hd);
        }

        #[test]
        fn threshold_complement(v in prop::collection::vec(-3.0f64..3.0, 12)) {
            prop_assume!(v.iter().all(|&x| x != 0.0));
            let t = Tensor::<f64>::from_f64(Shape::new(1, 3, 4, 1), &v).unwrap();
            let neg = t.map(|x| -x);
            prop_assert_eq!(threshold(&neg, 0).unwrap(), threshold(&t, 0).unwrap().complement());
        }
    }
}
