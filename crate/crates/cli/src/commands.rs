use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gdcunet::data::{
    batch, channel_histogram, load_pairs, read_image, synth_set, write_dataset, write_feature_map, write_mask,
    LoadConfig, SamplePair, SynthConfig,
};
use gdcunet::gradcheck::{run_scope, CheckConfig, Scope};
use gdcunet::metrics::{report_csv, threshold_batch, MetricsReport};
use gdcunet::model::param_count;
use gdcunet::autodiff::OpKind;
use gdcunet::{train_with, Error, GdcUnetConfig, GdcUnetModel, Scalar, TrainConfig};

use crate::manifest::{Artifacts, DataSource, Precision, RunManifest};
use crate::{DataArgs, EvalArgs, GradcheckArgs, InspectArgs, ParamsArgs, SynthArgs, TrainArgs};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn resolution(d: &DataArgs) -> usize {
    d.resolution.unwrap_or(if d.synthetic { 128 } else { 256 })
}

fn build_manifest(a: &TrainArgs) -> Result<RunManifest> {
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let res = resolution(&a.data);
    let data = match (&a.data.data, a.data.synthetic) {
        (Some(root), _) => DataSource::Directory {
            root: root.clone(),
            load: LoadConfig {
                size: Some((res, res)),
                split_ratio: a.split_ratio,
                seed: a.seed,
                mask_suffix: a.data.mask_suffix.clone(),
            },
        },
        (None, true) => {
            let first = a.seed.wrapping_mul(1_000_000);
            DataSource::Synthetic {
                synth: SynthConfig::with_seed(0, res),
                train_first_seed: first,
                train_count: a.train_count,
                test_first_seed: first + a.train_count as u64,
                test_count: a.test_count,
            }
        }
        (None, false) => return Err(usage("train needs --data DIR or --synthetic")),
    };
    let model = GdcUnetConfig {
        ablation_conventional: a.ablation,
        ff_activation: a.ff_gelu,
        conv_init: a.conv_init.into(),
        ..GdcUnetConfig::with_setting(a.setting)
    };
    let train = TrainConfig {
        batch_size: a.batch_size,
        lr_init: a.lr,
        lr_min: a.lr_min,
        beta1: a.beta1,
        beta2: a.beta2,
        total_epochs: a.epochs,
        seed: a.seed,
        weight_decay: a.weight_decay,
        grad_clip: a.grad_clip,
        flip_augment: a.flip,
        ..TrainConfig::default()
    };
    train.validate()?;
    Ok(RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: a.seed,
        precision: a.precision,
        safd: model.hyper()?,
        model,
        train,
        data,
        artifacts: Artifacts::in_dir(&out),
    })
}

pub fn train(a: TrainArgs) -> Result<bool> {
    let manifest = match &a.manifest {
        Some(path) => {
            let mut m = RunManifest::read(path)?;
            if let Some(out) = &a.out {
                m.artifacts = Artifacts::in_dir(out);
            }
            m
        }
        None => build_manifest(&a)?,
    };
    if let Some(dir) = manifest.artifacts.manifest.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    manifest.write()?;
    match manifest.precision {
        Precision::F32 => run_train::<f32>(&manifest),
        Precision::F64 => run_train::<f64>(&manifest),
    }
}

fn run_train<T: Scalar>(m: &RunManifest) -> Result<bool> {
    let (train_set, test_set) = m.data.load()?;
    let mut model = GdcUnetModel::<T>::build(m.model.clone(), m.seed)?;
    println!(
        "training {} parameters on {} pairs, testing on {} ({:?})",
        model.param_count(),
        train_set.len(),
        test_set.len(),
        m.precision
    );
    let log_path = &m.artifacts.epoch_log;
    let mut log = fs::File::create(log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "epoch,lr,train_loss,test_iou,test_dice")?;
    let mut io_error = None;
    let outcome = train_with(&mut model, &train_set, &test_set, &m.train, |r| {
        println!("epoch {:>4}  lr {:.3e}  loss {:.6}  iou {:.4}  dice {:.4}", r.epoch, r.lr, r.train_loss, r.test.iou, r.test.dice);
        match writeln!(log, "{},{:e},{},{},{}", r.epoch, r.lr, r.train_loss, r.test.iou, r.test.dice) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                io_error = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).context("appending to the epoch log");
    }
    outcome.best.model.save(&m.artifacts.best_checkpoint)?;
    model.save(&m.artifacts.final_checkpoint)?;
    let b = &outcome.best;
    println!("best epoch {}: {}", b.epoch, report_csv(&[("best".into(), b.report)]).lines().nth(1).unwrap_or(""));
    println!("wrote {}", m.artifacts.best_checkpoint.display());
    Ok(true)
}

fn eval_pairs(a: &EvalArgs) -> Result<Vec<SamplePair>> {
    let res = resolution(&a.data);
    match (&a.data.data, a.data.synthetic) {
        (Some(root), _) => Ok(load_pairs(root, Some((res, res)), a.data.mask_suffix.as_deref())?),
        (None, true) => Ok(synth_set(a.first_seed, a.count, &SynthConfig::with_seed(0, res))?),
        (None, false) => Err(usage("eval needs --data DIR or --synthetic")),
    }
}

pub fn eval(a: EvalArgs) -> Result<bool> {
    match a.precision {
        Precision::F32 => run_eval::<f32>(&a),
        Precision::F64 => run_eval::<f64>(&a),
    }
}

fn run_eval<T: Scalar>(a: &EvalArgs) -> Result<bool> {
    let model = GdcUnetModel::<T>::load(&a.checkpoint)?;
    let pairs = eval_pairs(a)?;
    if let Some(dir) = &a.export_masks {
        fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(a.batch_size.max(1)) {
        let (x, _) = batch::<T>(&pairs, chunk)?;
        for (pred, &i) in threshold_batch(&model.forward(&x)?)?.iter().zip(chunk) {
            if let Some(dir) = &a.export_masks {
                write_mask(pred, dir.join(format!("{}.png", pairs[i].id)))?;
            }
            rows.push((pairs[i].id.clone(), MetricsReport::evaluate(pred, &pairs[i].mask)?));
        }
    }
    let csv = report_csv(&rows);
    write_file(&a.out, &csv)?;
    if let Some(mean) = csv.lines().last() {
        println!("{}", csv.lines().next().unwrap_or(""));
        println!("{mean}");
    }
    Ok(true)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut scopes = Vec::new();
    for s in &a.scope {
        if s == "all" {
            scopes.extend(Scope::ALL);
        } else {
            scopes.push(Scope::parse(s).ok_or_else(|| usage(format!("unknown scope {s}; expected tensor, warp, offset, safdconv, loss or all")))?);
        }
    }
    scopes.dedup();
    let inject = match &a.inject_sign_flip {
        Some(op) => Some(OpKind::parse(op).ok_or_else(|| usage(format!("unknown op {op}")))?),
        None => None,
    };
    let cfg = CheckConfig { instances: a.instances, seed: a.seed, inject_sign_flip: inject, ..CheckConfig::default() };
    let mut ok = true;
    for scope in scopes {
        let report = run_scope(scope, &cfg)?;
        for op in &report.ops {
            println!("  {:<10} {:<22} instances {:>3}  worst {:.3e}", scope, op.op, op.instances, op.worst_rel_err);
        }
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {scope}: worst relative error {:.3e} (tolerance {:.0e})", report.worst(), report.tolerance);
        ok &= report.passed();
    }
    Ok(ok)
}

pub fn inspect(a: InspectArgs) -> Result<bool> {
    let model = GdcUnetModel::<f32>::load(&a.checkpoint)?;
    if a.list_taps {
        for t in model.tap_names() {
            println!("{t}");
        }
        return Ok(true);
    }
    let (Some(image), Some(tap)) = (&a.image, &a.tap) else {
        return Err(usage("inspect needs --image and --tap"));
    };
    let x = read_image(image)?;
    if x.shape().channels() != model.config.in_channels {
        return Err(usage(format!(
            "image has {} channels, model expects {}",
            x.shape().channels(),
            model.config.in_channels
        )));
    }
    let maps = model.extract_feature_maps(&x.cast(), tap)?;
    fs::create_dir_all(&a.out)?;
    let s = maps.shape();
    let stem = tap.replace('.', "_");
    for c in 0..s.channels() {
        write_feature_map(&maps, c, a.out.join(format!("{stem}_c{c:03}.png")))?;
        let h = channel_histogram(&maps, c, a.bins)?;
        fs::write(a.out.join(format!("{stem}_c{c:03}.csv")), h.to_csv())?;
    }
    println!("{tap}: {} channels at {}x{} written to {}", s.channels(), s.height(), s.width(), a.out.display());
    Ok(true)
}

pub fn params(a: ParamsArgs) -> Result<bool> {
    let cfg = GdcUnetConfig { ablation_conventional: a.ablation, ff_activation: a.ff_gelu, ..GdcUnetConfig::with_setting(a.setting) };
    let model = GdcUnetModel::<f32>::build(cfg.clone(), 0)?;
    println!("setting {}: {}", a.setting, cfg.hyper()?);
    println!("{:<16} {:<16} {:>10}", "layer", "kind", "params");
    let mut total = 0;
    for row in model.param_table() {
        println!("{:<16} {:<16} {:>10}", row.name, row.kind, row.params);
        total += row.params;
    }
    println!("{:<16} {:<16} {:>10}", "total", "", total);
    if a.all {
        for s in 1..=6u8 {
            let c = GdcUnetConfig { safd_setting: s, ..cfg.clone() };
            println!("setting {s} total {}", param_count(&c)?);
        }
    }
    Ok(true)
}

pub fn synth(a: SynthArgs) -> Result<bool> {
    let pairs = synth_set(a.first_seed, a.count, &SynthConfig::with_seed(0, a.size))?;
    write_dataset(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(true)
}
