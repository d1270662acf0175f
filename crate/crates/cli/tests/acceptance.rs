//! Acceptance criteria, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report is always shown.
//! Criteria 5, 9 and 10 share the checkpoint trained by criterion 5.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use segpipe::augment::{
    apply, apply_transform, spline_warp, AugmentConfig, ShearAxis, Transform, WarpConfig,
};
use segpipe::autodiff::{Graph, Mode};
use segpipe::checkpoint::Checkpoint;
use segpipe::config::RunConfig;
use segpipe::data::load_dataset;
use segpipe::gradcheck::{self, Scope};
use segpipe::loss::dice_loss;
use segpipe::mask::{Mask, VOID};
use segpipe::nn::{ArchConfig, ModelGraph, Resample};
use segpipe::rng::SeedSource;
use segpipe::tensor::{read_sgt1, write_sgt1, AnyTensor, Tensor};

type Outcome = Result<String, String>;

const BIN: &str = env!("CARGO_BIN_EXE_segpipe");

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn cli(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("SEGPIPE_THREADS", "1")
        .output()
        .map_err(|e| format!("cannot run segpipe: {e}"))?;
    Ok(out)
}

fn cli_ok(args: &[&str]) -> Result<std::process::Output, String> {
    let out = cli(args)?;
    if !out.status.success() {
        return Err(format!(
            "`segpipe {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Pseudo-random values from a fixed formula, independent of the crate's RNG.
fn wobble(i: usize, k: f64) -> f64 {
    ((i as f64 + 1.0) * k).sin() * 43758.5453 % 1.0
}

// 1. Gradient suite.
fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = Vec::new();
    for scope in [Scope::Ops, Scope::Blocks, Scope::Pipeline] {
        let report = gradcheck::run(scope, 0, None).map_err(|e| e.to_string())?;
        let failed: Vec<_> = report
            .results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.clone())
            .collect();
        ensure(failed.is_empty(), format!("{scope:?} failures: {failed:?}"))?;
        let max = report
            .results
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max);
        worst.push(format!("{scope:?} max {max:.1e}"));
    }
    let faulted = gradcheck::run(Scope::Ops, 0, Some(segpipe::autodiff::OpKind::Conv2d))
        .map_err(|e| e.to_string())?;
    ensure(
        !faulted.passed(),
        "a corrupted conv backward went unnoticed",
    )?;
    let dt = t0.elapsed();
    ensure(dt < Duration::from_secs(120), format!("took {dt:?}"))?;
    Ok(format!("{} in {:.1}s", worst.join(", "), dt.as_secs_f64()))
}

// 2. Architecture oracle: (resolution, width) per table row at 512×512.
const FCN_TABLE: &[(&str, usize, usize)] = &[
    ("Input", 512, 1),
    ("Down 1", 512, 16),
    ("Pooling 1", 256, 16),
    ("Down 2", 256, 32),
    ("Pooling 2", 128, 32),
    ("Down 3", 128, 64),
    ("Pooling 3", 64, 64),
    ("Down 4", 64, 128),
    ("Pooling 4", 32, 128),
    ("Across", 32, 256),
    ("Up 1", 64, 256),
    ("Merge 1", 64, 384),
    ("Up 2", 64, 128),
    ("Up 3", 64, 128),
    ("Up 4", 128, 128),
    ("Merge 2", 128, 192),
    ("Up 5", 128, 64),
    ("Up 6", 128, 64),
    ("Up 7", 256, 64),
    ("Merge 3", 256, 96),
    ("Up 8", 256, 32),
    ("Up 9", 256, 32),
    ("Up 10", 512, 32),
    ("Merge 4", 512, 48),
    ("Up 11", 512, 16),
    ("Up 12", 512, 16),
    ("Output", 512, 1),
];

const RESNET_TABLE: &[(&str, usize, usize)] = &[
    ("Down 1", 512, 32),
    ("Down 2", 256, 32),
    ("Down 3", 128, 128),
    ("Down 4", 64, 256),
    ("Down 5", 32, 512),
    ("Across", 32, 1024),
    ("Up 1", 64, 512),
    ("Up 2", 128, 256),
    ("Up 3", 256, 128),
    ("Up 4", 512, 32),
    ("Up 5", 512, 32),
    ("Classifier", 512, 1),
];

fn tables(work: &Path) -> Outcome {
    for (arch, section, table) in [
        ("fcn", "FCN", FCN_TABLE),
        ("fc_resnet", "FC-ResNet", RESNET_TABLE),
    ] {
        let out = work.join(format!("summary_{arch}"));
        cli_ok(&[
            "summary",
            "--arch",
            arch,
            "--scale",
            "1",
            "--input-size",
            "512",
            "--out",
            p(&out),
        ])?;
        let csv = std::fs::read_to_string(out.join("summary.csv")).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<&str>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|c| c[0] == section)
            .collect();
        ensure(
            rows.len() == table.len(),
            format!("{arch}: {} rows, expected {}", rows.len(), table.len()),
        )?;
        for (r, &(name, res, width)) in rows.iter().zip(table) {
            let got = (
                r[1],
                r[3].parse::<usize>().unwrap_or(0),
                r[4].parse::<usize>().unwrap_or(0),
                r[5].parse::<usize>().unwrap_or(0),
            );
            ensure(
                got == (name, res, res, width),
                format!("{arch} row {name}: got {got:?}"),
            )?;
        }
    }
    Ok(format!(
        "{} + {} rows match",
        FCN_TABLE.len(),
        RESNET_TABLE.len()
    ))
}

// 3. Parameter budget.
fn budget() -> Outcome {
    let full = ArchConfig::default();
    let fcn = ModelGraph::<f32>::fcn(full, 0)
        .map_err(|e| e.to_string())?
        .num_params() as f64;
    let resnet_model = ModelGraph::<f32>::fc_resnet(full, 0).map_err(|e| e.to_string())?;
    let resnet = resnet_model.num_params() as f64;
    let pipe = ModelGraph::<f32>::pipeline(full, 0)
        .map_err(|e| e.to_string())?
        .num_params() as f64;
    let convs = resnet_model.residual_path_convs();
    let dev = |n: f64, t: f64| (n / t - 1.0).abs();
    ensure(dev(fcn, 1.8e6) <= 0.05, format!("FCN {fcn}"))?;
    ensure(dev(resnet, 11e6) <= 0.10, format!("FC-ResNet {resnet}"))?;
    ensure(dev(pipe, 12.8e6) <= 0.07, format!("pipeline {pipe}"))?;
    ensure(
        (135..=145).contains(&convs),
        format!("{convs} residual-path convolutions"),
    )?;
    Ok(format!(
        "FCN {fcn} ({:+.1}%), FC-ResNet {resnet} ({:+.1}%), pipeline {pipe} ({:+.1}%), {convs} convs",
        100.0 * (fcn / 1.8e6 - 1.0),
        100.0 * (resnet / 11e6 - 1.0),
        100.0 * (pipe / 12.8e6 - 1.0)
    ))
}

// 4. Residual identity with zeroed final convolutions.
fn residual_identity() -> Outcome {
    let mut m =
        ModelGraph::<f32>::fc_resnet(ArchConfig::default(), 5).map_err(|e| e.to_string())?;
    m.zero_residuals();
    let x = Tensor::from_fn(&[1, 1, 32, 32], |i| wobble(i, 12.9898) as f32 * 100.0)
        .map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let xi = g.input(x);
    let mut rng = SeedSource::new(0).stream("dropout", 0);
    let t = m
        .forward_traced(&mut g, xi, Mode::Train, &mut rng)
        .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (b, &(row, input, output)) in m.blocks().zip(&t.blocks) {
        if b.shortcut.is_some() || b.cfg.resample != Resample::None {
            continue;
        }
        let same = g
            .value(input)
            .data()
            .iter()
            .zip(g.value(output).data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("block in row {row} changed its input"))?;
        checked += 1;
    }
    ensure(checked > 0, "no shape-matched blocks")?;
    Ok(format!(
        "{checked} shape-matched blocks are bitwise identities"
    ))
}

struct Desk {
    data: PathBuf,
    run: PathBuf,
    config: PathBuf,
}

fn write_config(path: &Path, train: &Path, val: &Path, test: &Path) -> Result<(), String> {
    let cfg = serde_json::json!({
        "preset": "synthetic",
        "data": {"train": train, "val": val, "test": test},
    });
    std::fs::write(path, cfg.to_string()).map_err(|e| e.to_string())
}

fn history_best(csv: &str) -> f64 {
    csv.lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(3)?.parse::<f64>().ok())
        .fold(f64::MIN, f64::max)
}

fn mean_dice(stdout: &[u8]) -> f64 {
    String::from_utf8_lossy(stdout)
        .trim()
        .rsplit(' ')
        .next()
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN)
}

// 5. Desk-scale training.
fn desk_training(work: &Path, desk: &mut Option<Desk>) -> Outcome {
    let data = work.join("desk_data");
    cli_ok(&["gen-synthetic", "--out", p(&data)])?;
    let preset = RunConfig::preset(segpipe::config::Preset::Synthetic);
    let (tr, va) = (&preset.synthetic.train, &preset.synthetic.val);
    ensure(
        (tr.count, va.count, tr.size) == (8, 4, 64)
            && preset.model.scale == 0.125
            && preset.train.optim.batch_size == 4,
        "synthetic preset differs from the desk protocol",
    )?;
    ensure(
        preset.train.max_epochs <= 200,
        "more than 200 epochs allowed",
    )?;
    let config = work.join("desk.json");
    write_config(
        &config,
        &data.join("train"),
        &data.join("val"),
        &data.join("val"),
    )?;

    let t0 = Instant::now();
    let run = work.join("desk_run");
    cli_ok(&["train", "--config", p(&config), "--out", p(&run)])?;
    let dt = t0.elapsed();
    let rerun = work.join("desk_rerun");
    cli_ok(&["train", "--config", p(&config), "--out", p(&rerun)])?;

    let history = std::fs::read(run.join("history.csv")).map_err(|e| e.to_string())?;
    let same = history == std::fs::read(rerun.join("history.csv")).map_err(|e| e.to_string())?;
    let val = history_best(&String::from_utf8_lossy(&history));

    // Train Dice of the stored best checkpoint, scored by `evaluate` on the training split.
    let train_cfg = work.join("desk_train_eval.json");
    write_config(
        &train_cfg,
        &data.join("train"),
        &data.join("val"),
        &data.join("train"),
    )?;
    let ck = run.join("best.sgc1");
    let ev = cli_ok(&[
        "evaluate",
        "--config",
        p(&train_cfg),
        "--checkpoints",
        p(&ck),
        "--out",
        p(&work.join("desk_eval")),
    ])?;
    let train_dice = mean_dice(&ev.stdout);
    *desk = Some(Desk { data, run, config });

    let epochs = String::from_utf8_lossy(&history).lines().count() - 1;
    let summary = format!(
        "train Dice {train_dice:.4}, val Dice {val:.4}, {epochs} epochs in {:.0}s, history reproducible: {same}",
        dt.as_secs_f64()
    );
    ensure(
        train_dice >= 0.95,
        format!("train Dice below 0.95: {summary}"),
    )?;
    ensure(val >= 0.85, format!("val Dice below 0.85: {summary}"))?;
    ensure(
        dt <= Duration::from_secs(15 * 60),
        format!("too slow: {summary}"),
    )?;
    ensure(same, format!("history differs between runs: {summary}"))?;
    Ok(summary)
}

// 6. Loss unit values.
fn loss_values() -> Outcome {
    let m = |l: &[u8]| Mask::new(vec![1, 1, 1, l.len()], l.to_vec()).unwrap();
    let t = |v: &[f64]| Tensor::new(vec![1, 1, 1, v.len()], v.to_vec()).unwrap();
    let cases = [
        ("perfect", t(&[1.0, 0.0, 1.0, 0.0]), m(&[1, 0, 1, 0]), -1.0),
        ("all-zero", t(&[0.0, 0.0, 0.0, 0.0]), m(&[1, 0, 1, 0]), 0.0),
        (
            "half overlap",
            t(&[1.0, 1.0, 0.0, 0.0]),
            m(&[0, 1, 1, 0]),
            -0.5,
        ),
    ];
    let mut got = Vec::new();
    for (name, pred, mask, want) in cases {
        let (l, _) = dice_loss(&pred, &mask, 0.0).map_err(|e| e.to_string())?;
        ensure((l - want).abs() <= 1e-6, format!("{name}: {l} != {want}"))?;
        got.push(format!("{name} {l}"));
    }
    Ok(got.join(", "))
}

// 7. Ensemble averaging and largest-component filtering.
fn ensemble_and_components(work: &Path, desk: &Option<Desk>) -> Outcome {
    let desk = desk.as_ref().ok_or("needs the criterion 5 checkpoint")?;
    let ck = desk.run.join("best.sgc1");
    let one = work.join("pred_one");
    let two = work.join("pred_two");
    cli_ok(&[
        "predict",
        "--config",
        p(&desk.config),
        "--checkpoints",
        p(&ck),
        "--out",
        p(&one),
    ])?;
    let pair = format!("{},{}", p(&ck), p(&ck));
    cli_ok(&[
        "predict",
        "--config",
        p(&desk.config),
        "--checkpoints",
        &pair,
        "--out",
        p(&two),
    ])?;
    let mut n = 0;
    for entry in std::fs::read_dir(one.join("predictions")).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let other = two.join("predictions").join(path.file_name().unwrap());
        let same = std::fs::read(&path).map_err(|e| e.to_string())?
            == std::fs::read(&other).map_err(|e| e.to_string())?;
        ensure(
            same,
            format!(
                "{} differs between 1 and 2 identical members",
                path.display()
            ),
        )?;
        n += 1;
    }
    ensure(n == 4, format!("{n} predictions"))?;

    // Blobs of 100 and 40 voxels across two slices.
    let vol = Tensor::<f32>::from_fn(&[2, 16, 16], |i| {
        let (z, y, x) = (i / 256, (i / 16) % 16, i % 16);
        let big = (y < 10 && x < 5) || (z == 1 && y < 10 && x < 5);
        let small = z == 0 && (12..16).contains(&y) && (6..16).contains(&x);
        if big || small {
            0.8
        } else {
            0.1
        }
    })
    .map_err(|e| e.to_string())?;
    let input = work.join("blobs.sgt1");
    write_sgt1(&input, &AnyTensor::F32(vol.clone())).map_err(|e| e.to_string())?;
    let out = work.join("lcc");
    cli_ok(&["postprocess", "--input", p(&input), "--out", p(&out)])?;
    let kept = read_sgt1(&out.join("blobs_largest.sgt1"))
        .map_err(|e| e.to_string())?
        .into_tensor::<f32>();
    let count = kept.data().iter().filter(|&&v| v == 1.0).count();
    ensure(
        count == 100,
        format!("kept {count} voxels, expected the 100-voxel blob"),
    )?;
    ensure(
        kept.data()[0] == 1.0 && kept.data()[12 * 16 + 8] == 0.0,
        "wrong blob kept",
    )?;
    let out2 = work.join("lcc2");
    cli_ok(&[
        "postprocess",
        "--input",
        p(&out.join("blobs_largest.sgt1")),
        "--out",
        p(&out2),
    ])?;
    let again = read_sgt1(&out2.join("blobs_largest_largest.sgt1"))
        .map_err(|e| e.to_string())?
        .into_tensor::<f32>();
    ensure(again == kept, "largest component is not idempotent")?;
    Ok(format!(
        "{n} predictions identical for 1 vs 2 members; 100-voxel blob kept, 40 removed, idempotent"
    ))
}

// 8. Augmentation properties.
fn augmentation() -> Outcome {
    let (h, w) = (48, 48);
    let img = Tensor::<f32>::from_fn(&[1, h, w], |i| (wobble(i, 78.233) * 1000.0) as f32).unwrap();
    let labels = (0..h * w)
        .map(|i| match (wobble(i, 3.7) * 10.0).abs() as u32 {
            0 => VOID,
            1..=3 => 1,
            _ => 0,
        })
        .collect();
    let m = Mask::new(vec![1, h, w], labels).unwrap();

    let zero = AugmentConfig {
        crop_size: Some(h),
        ..AugmentConfig::default()
    };
    let mut rng = SeedSource::new(1).stream("acceptance", 0);
    for _ in 0..10 {
        let (a, b) = apply(&img, &m, &zero, &mut rng).map_err(|e| e.to_string())?;
        ensure(
            a == img && b == m,
            "zero-parameter config changed the sample",
        )?;
    }
    let flip = Transform {
        flip_h: true,
        ..Transform::identity()
    };
    let (a, b) = apply_transform(&img, &m, &flip).map_err(|e| e.to_string())?;
    let (a, b) = apply_transform(&a, &b, &flip).map_err(|e| e.to_string())?;
    ensure(
        a == img && b == m,
        "double horizontal flip is not the identity",
    )?;

    let (a, b) = spline_warp(&img, &m, 16, 0.0, &mut rng).map_err(|e| e.to_string())?;
    let dev = a
        .data()
        .iter()
        .zip(img.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    ensure(
        dev < 1e-6 && b == m,
        format!("sigma-0 warp deviates by {dev}"),
    )?;

    let full = AugmentConfig {
        flip_h: true,
        flip_v: true,
        shear_max: 0.41,
        rotation_max: 25.0,
        crop_size: Some(32),
        crop_foreground: true,
        warp: WarpConfig {
            enabled: true,
            grid_spacing: 16,
            sigma: 4.0,
        },
        probability: 0.5,
    };
    for k in 0..200 {
        let mut rng = SeedSource::new(k).stream("acceptance", 1);
        let (_, b) = apply(&img, &m, &full, &mut rng).map_err(|e| e.to_string())?;
        ensure(
            b.labels().iter().all(|l| [0, 1, VOID].contains(l)),
            "augmented mask has a label outside {0, 1, 255}",
        )?;
    }
    let shear = Transform {
        shear: 0.41,
        shear_axis: ShearAxis::Y,
        ..Transform::identity()
    };
    let (_, b) = apply_transform(&img, &m, &shear).map_err(|e| e.to_string())?;
    ensure(
        b.labels().iter().all(|l| [0, 1, VOID].contains(l)),
        "sheared mask not closed",
    )?;
    Ok(format!(
        "identity, involution, sigma-0 warp deviation {dev:.1e}, 200 augmented masks closed"
    ))
}

// 9. Normalization histograms of the trained desk checkpoint.
fn normalization(work: &Path, desk: &Option<Desk>) -> Outcome {
    let desk = desk.as_ref().ok_or("needs the criterion 5 checkpoint")?;
    let out = work.join("analysis");
    let ck = desk.run.join("best.sgc1");
    cli_ok(&[
        "analyze",
        "--config",
        p(&desk.config),
        "--checkpoints",
        p(&ck),
        "--out",
        p(&out),
    ])?;
    let summary =
        std::fs::read_to_string(out.join("histogram_summary.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<String>> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    ensure(
        rows.len() == 4,
        format!("{} summary rows, expected 2 stages x 2 classes", rows.len()),
    )?;

    // Independent pixel counts from the mask files.
    let ds = load_dataset(&desk.data.join("val")).map_err(|e| e.to_string())?;
    let mut counts = [0usize; 2];
    for r in &ds.manifest.records {
        let t = read_sgt1(&ds.root.join(r.mask.as_ref().unwrap()))
            .map_err(|e| e.to_string())?
            .into_tensor::<f32>();
        for &v in t.data() {
            if v == 0.0 || v == 1.0 {
                counts[v as usize] += 1;
            }
        }
    }
    let hist = std::fs::read_to_string(out.join("histograms.csv")).map_err(|e| e.to_string())?;
    for stage in ["input", "preprocessor"] {
        for (class, &expected) in counts.iter().enumerate() {
            let total: usize = hist
                .lines()
                .skip(1)
                .map(|l| l.split(',').collect::<Vec<_>>())
                .filter(|c| c[3] == stage && c[4] == class.to_string())
                .map(|c| c[2].parse::<usize>().unwrap_or(0))
                .sum();
            ensure(
                total == expected,
                format!("{stage}/{class}: {total} counted, {expected} pixels"),
            )?;
        }
    }
    let field = |stage: &str, col: usize| -> Vec<f64> {
        rows.iter()
            .filter(|r| r[0] == stage)
            .map(|r| r[col].parse().unwrap_or(f64::NAN))
            .collect()
    };
    let (lo, hi) = (
        field("input", 6).into_iter().fold(f64::INFINITY, f64::min),
        field("input", 7)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max),
    );
    let range = RunConfig::preset(segpipe::config::Preset::Synthetic)
        .synthetic
        .val
        .range;
    ensure(
        [lo, hi] == range,
        format!("input range [{lo}, {hi}] != configured {range:?}"),
    )?;
    let fits: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{}/{}: mu {:.1} sd {:.1}",
                r[0],
                r[1],
                r[4].parse::<f64>().unwrap_or(f64::NAN),
                r[5].parse::<f64>().unwrap_or(f64::NAN)
            )
        })
        .collect();
    ensure(
        rows.iter()
            .all(|r| r[5].parse::<f64>().is_ok_and(|s| s >= 0.0)),
        "missing normal fit",
    )?;
    let (olo, ohi) = (
        field("preprocessor", 6)
            .into_iter()
            .fold(f64::INFINITY, f64::min),
        field("preprocessor", 7)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max),
    );
    Ok(format!(
        "input range [{lo}, {hi}], pre-processor output range [{olo:.2}, {ohi:.2}]; {}",
        fits.join("; ")
    ))
}

// 10. Persistence.
fn persistence(work: &Path, desk: &Option<Desk>) -> Outcome {
    let t32 = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| (wobble(i, 1.3) * 1e6) as f32).unwrap();
    let t64 = Tensor::<f64>::from_fn(&[7, 11], |i| wobble(i, 2.1) * 1e-300).unwrap();
    for (name, t) in [
        ("a.sgt1", AnyTensor::F32(t32)),
        ("b.sgt1", AnyTensor::F64(t64)),
    ] {
        let path = work.join(name);
        write_sgt1(&path, &t).map_err(|e| e.to_string())?;
        let back = read_sgt1(&path).map_err(|e| e.to_string())?;
        let mut a = Vec::new();
        let mut b = Vec::new();
        t.encode(&mut a);
        back.encode(&mut b);
        ensure(
            a == b && a == std::fs::read(&path).map_err(|e| e.to_string())?,
            format!("{name} not bit-exact"),
        )?;
    }

    let desk = desk.as_ref().ok_or("needs the criterion 5 checkpoint")?;
    let path = desk.run.join("best.sgc1");
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let ck = Checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    ensure(ck.encode() == bytes, "checkpoint re-encoding differs")?;
    let copy = work.join("copy.sgc1");
    ck.save(&copy).map_err(|e| e.to_string())?;
    ensure(
        std::fs::read(&copy).map_err(|e| e.to_string())? == bytes,
        "saved checkpoint differs",
    )?;

    let mut a = ck.to_model::<f32>().map_err(|e| e.to_string())?;
    let mut b = Checkpoint::load(&copy)
        .and_then(|c| c.to_model::<f32>())
        .map_err(|e| e.to_string())?;
    let s = load_dataset(&desk.data.join("val"))
        .and_then(|d| d.sample(0))
        .map_err(|e| e.to_string())?;
    let x = s.image.reshape(&[1, 1, 64, 64]).unwrap();
    let (ya, yb) = (
        a.predict(&x).map_err(|e| e.to_string())?,
        b.predict(&x).map_err(|e| e.to_string())?,
    );
    let same = ya
        .data()
        .iter()
        .zip(yb.data())
        .all(|(u, v)| u.to_bits() == v.to_bits());
    ensure(same, "reloaded checkpoint forward differs")?;
    Ok(format!(
        "SGT1 f32/f64 and a {}-byte checkpoint round-trip bit-exactly; forward outputs identical",
        bytes.len()
    ))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let work = work.path();
    let mut desk = None;
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient suite", gradients()),
        (2, "architecture tables", tables(work)),
        (3, "parameter budget", budget()),
        (4, "residual identity", residual_identity()),
        (5, "desk-scale training", desk_training(work, &mut desk)),
        (6, "loss unit values", loss_values()),
        (
            7,
            "ensemble and post-processing",
            ensemble_and_components(work, &desk),
        ),
        (8, "augmentation", augmentation()),
        (9, "normalization analysis", normalization(work, &desk)),
        (10, "persistence", persistence(work, &desk)),
    ];

    println!();
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "\nacceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
