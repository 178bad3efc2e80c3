//! Acceptance run: one [PASS]/[FAIL] line per criterion, nonzero exit on any failure.

use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::time::Instant;

use gdcunet::data::{synth_set, synth_vessels, SynthConfig};
use gdcunet::gradcheck::{run_scope, CheckConfig, Scope};
use gdcunet::grid::{ConvKernel, GridSpec};
use gdcunet::kernels::conv2d;
use gdcunet::layers::ParamStore;
use gdcunet::loss::bce_dice_value;
use gdcunet::metrics::{hausdorff, overlap_metrics, BinaryMask};
use gdcunet::model::param_count;
use gdcunet::offset::{compute_displacement_field, OffsetNetConfig, OffsetNetwork};
use gdcunet::safdconv::{safdconv_forward, SafdConvConfig, SafdConvLayer};
use gdcunet::train::{EpochRecord, TrainOutcome};
use gdcunet::{cosine_lr, train_with, GdcUnetConfig, GdcUnetModel, LossConfig, Shape, Tensor, TrainConfig};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn artifact_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).expect("artifact dir");
    dir
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = CheckConfig::default();
    let mut worst: Vec<(String, usize, f64)> = Vec::new();
    let mut all_ok = true;
    for scope in Scope::ALL {
        match run_scope(scope, &cfg) {
            Ok(r) => {
                all_ok &= r.passed();
                worst.extend(r.ops.iter().map(|o| (o.op.clone(), o.instances, o.worst_rel_err)));
            }
            Err(e) => return outcome(false, format!("{scope}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let required = ["conv2d", "softmax", "warp", "offset_network", "safdconv", "bce_dice"];
    let missing: Vec<&str> =
        required.iter().copied().filter(|r| !worst.iter().any(|(op, n, _)| op == r && *n >= 20)).collect();
    let max = worst.iter().map(|w| w.2).fold(0.0, f64::max);
    let pass = all_ok && missing.is_empty() && max <= 1e-4 && secs < 120.0;
    outcome(pass, format!("{} ops, worst rel err {max:.2e} (<= 1e-4), {secs:.1}s (< 120s), missing {missing:?}", worst.len()))
}

fn zero_collapse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let setting = rng.gen_range(1..=6u8);
        let cin = 4 * rng.gen_range(1..=2);
        let cout = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let cfg = SafdConvConfig::preset(setting, cin, cout).unwrap();
        let mut store = ParamStore::<f64>::new();
        let layer = SafdConvLayer::new(&mut store, "s", cfg, &mut rng).unwrap();
        store.zero_prefix("s.offset");
        let x = Tensor::<f64>::uniform(Shape::new(rng.gen_range(1..=2), h, w, cin), 1.0, &mut rng);
        let y = safdconv_forward(&x, &layer, &store).unwrap();
        let k: ConvKernel<f64> = layer.conv.kernel(&store);
        let spec = GridSpec::new(cfg.kernel_size, cfg.dilation).unwrap();
        let reference = conv2d(&x, &k.weights, Some(&k.bias), spec).unwrap();
        worst = worst.max(y.max_abs_diff(&reference).unwrap());
    }
    outcome(worst <= 1e-12, format!("100 instances, max abs deviation {worst:.2e} (<= 1e-12)"))
}

fn permutation_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = 2 * rng.gen_range(1..=4);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let mut m = rng.gen_range(1..=4);
        while (m * c) % heads != 0 {
            m += 1;
        }
        let mut cfg = OffsetNetConfig::new(c, m, heads, rng.gen_range(2..=12)).unwrap();
        cfg.ff_activation = rng.gen_bool(0.5);
        let mut store = ParamStore::<f64>::new();
        let net = OffsetNetwork::new(&mut store, "o", cfg, &mut rng).unwrap();
        let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        let x = Tensor::<f64>::uniform(Shape::new(1, h, w, c), 1.5, &mut rng);
        // random token permutation (Fisher-Yates)
        let n = h * w;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let xp = Tensor::from_fn(x.shape(), |_, i, j, ch| {
            let t = perm[i * w + j];
            x.at(0, t / w, t % w, ch)
        });
        let f = compute_displacement_field(&x, &net, &store).unwrap();
        let fp = compute_displacement_field(&xp, &net, &store).unwrap();
        for (k, &t) in perm.iter().enumerate() {
            for ch in 0..2 {
                let a = fp.values().at(0, k / w, k % w, ch);
                let b = f.values().at(0, t / w, t % w, ch);
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-9, format!("50 instances, max deviation {worst:.2e} (<= 1e-9)"))
}

fn oracle_hausdorff(a: &BinaryMask, b: &BinaryMask) -> Option<(f64, f64)> {
    let pa = a.points();
    let pb = b.points();
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return Some((0.0, 0.0)),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let dist = |p: (usize, usize), q: (usize, usize)| {
        let (di, dj) = (p.0 as i64 - q.0 as i64, p.1 as i64 - q.1 as i64);
        di * di + dj * dj
    };
    let mut pooled: Vec<f64> = Vec::with_capacity(pa.len() + pb.len());
    for &p in &pa {
        pooled.push((pb.iter().map(|&q| dist(p, q)).min().unwrap() as f64).sqrt());
    }
    for &q in &pb {
        pooled.push((pa.iter().map(|&p| dist(p, q)).min().unwrap() as f64).sqrt());
    }
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = 0.95 * (pooled.len() - 1) as f64;
    let k = pos.floor() as usize;
    let next = (k + 1).min(pooled.len() - 1);
    let hd95 = pooled[k] + (pooled[next] - pooled[k]) * (pos - k as f64);
    Some((*pooled.last().unwrap(), hd95))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    for pair in 0..1000 {
        let densities = [0.0, 0.01, 0.05, 0.2, 0.5, 0.9];
        let (da, db) = (densities[rng.gen_range(0..6)], densities[rng.gen_range(0..6)]);
        let a = BinaryMask::from_fn(16, 16, |_, _| rng.gen_bool(da));
        let b = BinaryMask::from_fn(16, 16, |_, _| rng.gen_bool(db));
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..16 {
            for j in 0..16 {
                match (a.get(i, j), b.get(i, j)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let o = overlap_metrics(&a, &b).unwrap();
        let any = tp + fp + fn_ > 0;
        let r = |n: u64, d: u64, fallback: u64| if d == 0 { Ratio::from_integer(fallback) } else { Ratio::new(n, d) };
        let expect = [
            r(tp, tp + fp + fn_, 1),
            r(2 * tp, 2 * tp + fp + fn_, 1),
            r(tp, tp + fn_, u64::from(!any)),
            r(tn, tn + fp, 1),
            r(tp, tp + fp, u64::from(!any)),
        ];
        let got = [o.iou, o.dice, o.recall, o.specificity, o.precision];
        if got != expect {
            mismatches.push(format!("pair {pair}: overlap {got:?} vs {expect:?}"));
        }
        let one = Ratio::from_integer(1u64);
        if o.dice * (one + o.iou) != Ratio::from_integer(2u64) * o.iou {
            mismatches.push(format!("pair {pair}: dice-iou identity"));
        }
        let h = hausdorff(&a, &b).unwrap().map(|h| (h.hd, h.hd95));
        let oracle = oracle_hausdorff(&a, &b);
        if h != oracle {
            mismatches.push(format!("pair {pair}: hausdorff {h:?} vs {oracle:?}"));
        }
    }
    let first = mismatches.first().cloned().unwrap_or_default();
    outcome(mismatches.is_empty(), format!("1000 pairs, {} mismatches {first}", mismatches.len()))
}

fn loss_example() -> Outcome {
    let logits = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 1));
    let targets = Tensor::<f64>::full(Shape::new(1, 2, 2, 1), 1.0);
    let cfg = LossConfig { epsilon: 1e-5, ..LossConfig::default() };
    let v = bce_dice_value(&logits, &targets, &cfg).unwrap();
    // independent evaluation of the same expression
    let eps = 1e-5;
    let expect = 0.5 * std::f64::consts::LN_2 + 1.0 - (2.0 * 0.5 * 4.0 + eps) / (0.5 * 4.0 + 4.0 + eps);
    let pass = (v - 0.679907).abs() <= 1e-6 && (v - expect).abs() <= 1e-12;
    outcome(pass, format!("loss {v:.9} (target 0.679907 +- 1e-6)"))
}

fn schedule_endpoints() -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for total in [2, 3, 30, 200, 4000] {
        let cfg = TrainConfig { total_epochs: total, ..TrainConfig::default() };
        let (first, last) = (cosine_lr(0, &cfg).unwrap(), cosine_lr(total - 1, &cfg).unwrap());
        pass &= first == 1e-4 && last == 1e-5;
        let _ = write!(detail, "T={total}: {first:e}..{last:e}; ");
    }
    outcome(pass, detail.trim_end().to_string())
}

fn first_hit(log: &[EpochRecord], pred: impl Fn(&EpochRecord) -> bool) -> Option<usize> {
    log.iter().find(|r| pred(r)).map(|r| r.epoch)
}

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let pair = synth_vessels(&SynthConfig::with_seed(7, 64)).unwrap();
    let set = vec![pair];
    let mut model = GdcUnetModel::<f32>::build(GdcUnetConfig::with_setting(3), 0).unwrap();
    let cfg = TrainConfig { total_epochs: 500, batch_size: 1, seed: 0, ..TrainConfig::default() };
    let out = train_with(&mut model, &set, &set, &cfg, |r| {
        if r.test.dice > 0.95 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let hit = first_hit(&out.log, |r| r.test.dice > 0.95);
    let last = out.log.last().unwrap();
    fs::write(artifact_dir().join("overfit_log.csv"), out.log_csv()).unwrap();
    let pass = hit.is_some_and(|e| e < 500) && secs < 600.0;
    outcome(
        pass,
        format!(
            "depth 4, setting 3, 64x64: training dice {:.4} after {} steps (> 0.95 within 500), lr {:e}, {secs:.0}s (< 600s)",
            last.test.dice,
            out.log.len(),
            cfg.lr_init
        ),
    )
}

fn desk_scale() -> Outcome {
    let start = Instant::now();
    let template = SynthConfig::with_seed(0, 128);
    let train_set = synth_set(1000, 50, &template).unwrap();
    let test_set = synth_set(2000, 10, &template).unwrap();
    let cfg = TrainConfig { total_epochs: 200, seed: 0, ..TrainConfig::default() };

    let mut model = GdcUnetModel::<f32>::build(GdcUnetConfig::default(), 0).unwrap();
    let full: TrainOutcome<f32> = train_with(&mut model, &train_set, &test_set, &cfg, |r| {
        if r.test.dice >= 0.80 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    let full_secs = start.elapsed().as_secs_f64();
    let epochs = full.log.len();

    // identical run with conventional convolutions, same number of epochs
    let ablation_cfg = GdcUnetConfig { ablation_conventional: true, ..GdcUnetConfig::default() };
    let mut ablation = GdcUnetModel::<f32>::build(ablation_cfg, 0).unwrap();
    let abl: TrainOutcome<f32> = train_with(&mut ablation, &train_set, &test_set, &cfg, |r| {
        if r.epoch + 1 >= epochs {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();

    let dir = artifact_dir();
    fs::write(dir.join("desk_scale_gdcunet.csv"), full.log_csv()).unwrap();
    fs::write(dir.join("desk_scale_ablation.csv"), abl.log_csv()).unwrap();
    let mut side = String::from("epoch,gdcunet_test_dice,ablation_test_dice,gdcunet_test_iou,ablation_test_iou\n");
    for (a, b) in full.log.iter().zip(&abl.log) {
        let _ = writeln!(side, "{},{},{},{},{}", a.epoch, a.test.dice, b.test.dice, a.test.iou, b.test.iou);
    }
    fs::write(dir.join("desk_scale_side_by_side.csv"), side).unwrap();

    let (f_last, a_last) = (full.log.last().unwrap(), abl.log.last().unwrap());
    let hit = first_hit(&full.log, |r| r.test.dice >= 0.80);
    let pass = hit.is_some() && abl.log.len() == epochs && secs <= 3600.0;
    outcome(
        pass,
        format!(
            "50/10 at 128x128: GDCUnet test dice {:.4} at epoch {} ({full_secs:.0}s); ablation test dice {:.4} after {} epochs (best {:.4}); total {secs:.0}s (<= 3600s); artifacts in {}",
            f_last.test.dice,
            f_last.epoch,
            a_last.test.dice,
            abl.log.len(),
            abl.best.report.dice,
            dir.display()
        ),
    )
}

fn parameter_accounting() -> Outcome {
    let table4 = [1.15e6, 1.45e6, 0.954e6, 1.17e6, 1.40e6, 2.16e6];
    let mut pass = true;
    let mut detail = String::new();
    for (k, &target) in table4.iter().enumerate() {
        let setting = k as u8 + 1;
        let cfg = GdcUnetConfig::with_setting(setting);
        let model = GdcUnetModel::<f32>::build(cfg.clone(), 0).unwrap();
        let table = model.param_table();
        pass &= table == model.enumerate_params();
        let total: usize = table.iter().map(|r| r.params).sum();
        pass &= total == model.params.numel() && total == param_count(&cfg).unwrap();
        let dev = total as f64 / target - 1.0;
        pass &= dev.abs() <= 0.20;
        let _ = write!(detail, "S{setting} {total} ({:+.1}%); ", dev * 100.0);
    }
    for setting in 1..=6u8 {
        let abl = GdcUnetConfig { ablation_conventional: true, ..GdcUnetConfig::with_setting(setting) };
        let model = GdcUnetModel::<f32>::build(abl, 0).unwrap();
        pass &= model.param_table() == model.enumerate_params();
    }
    outcome(pass, detail.trim_end().to_string())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: GdcUnetConfig,
    train: TrainConfig,
    synth: SynthConfig,
    train_first_seed: u64,
    train_count: usize,
    test_first_seed: u64,
    test_count: usize,
    model_seed: u64,
}

fn run_from_manifest(json: &str) -> (f64, Vec<u8>) {
    let m: Manifest = serde_json::from_str(json).unwrap();
    let train_set = synth_set(m.train_first_seed, m.train_count, &m.synth).unwrap();
    let test_set = synth_set(m.test_first_seed, m.test_count, &m.synth).unwrap();
    let mut model = GdcUnetModel::<f32>::build(m.model, m.model_seed).unwrap();
    let out = gdcunet::train(&mut model, &train_set, &test_set, &m.train).unwrap();
    (out.log[0].train_loss, model.to_bytes().unwrap())
}

fn reproducibility() -> Outcome {
    let manifest = Manifest {
        model: GdcUnetConfig::default(),
        train: TrainConfig { total_epochs: 3, batch_size: 2, seed: 11, ..TrainConfig::default() },
        synth: SynthConfig::with_seed(0, 32),
        train_first_seed: 500,
        train_count: 5,
        test_first_seed: 600,
        test_count: 2,
        model_seed: 11,
    };
    let json = serde_json::to_string(&manifest).unwrap();
    let (loss_a, ckpt_a) = run_from_manifest(&json);
    let (loss_b, ckpt_b) = run_from_manifest(&json);
    let pass = loss_a.to_bits() == loss_b.to_bits() && ckpt_a == ckpt_b;
    outcome(
        pass,
        format!(
            "epoch-0 loss {loss_a} vs {loss_b} (bitwise {}), final checkpoints {} bytes identical: {}",
            loss_a.to_bits() == loss_b.to_bits(),
            ckpt_a.len(),
            ckpt_a == ckpt_b
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 gradient suite", gradient_suite),
        ("2 zero-collapse equivalence", zero_collapse),
        ("3 permutation equivariance", permutation_equivariance),
        ("4 metric oracle equivalence", metric_oracles),
        ("5 loss value", loss_example),
        ("6 schedule endpoints", schedule_endpoints),
        ("7 overfit smoke", overfit_smoke),
        ("8 desk-scale learning", desk_scale),
        ("9 parameter accounting", parameter_accounting),
        ("10 reproducibility", reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        let tag = if o.pass { "[PASS]" } else { "[FAIL]" };
        println!("{tag} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
