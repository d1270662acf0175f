use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use segpipe::analysis::analyze_checkpoint;
use segpipe::checkpoint::Checkpoint;
use segpipe::config::RunConfig;
use segpipe::data::{
    crop_back, generate_synthetic, group_slices_to_volume, load_dataset, Dataset, Sample,
};
use segpipe::error::{Error, Result};
use segpipe::gradcheck::{self, parse_op_kind, Scope};
use segpipe::loss::{dice_coefficient, DEFAULT_THRESHOLD};
use segpipe::mask::Mask;
use segpipe::nn::{summarize, Arch, ModelGraph};
use segpipe::postprocess::{largest_component, Connectivity};
use segpipe::rng::SeedSource;
use segpipe::tensor::io::write_atomic;
use segpipe::tensor::{read_sgt1, write_sgt1, AnyTensor, Tensor};
use segpipe::train::{predict_ensemble, train, train_ensemble};
use serde::Serialize;

use crate::{Cli, Command};

pub enum Status {
    Passed,
    CheckFailed,
}

/// Files written under `--out`, recorded in `outputs.json`.
struct Outputs {
    root: PathBuf,
    command: &'static str,
    files: Vec<String>,
}

#[derive(Serialize)]
struct OutputsFile<'a> {
    command: &'a str,
    files: &'a [String],
}

impl Outputs {
    fn new(root: &Path, command: &'static str) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::Io {
            path: root.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            command,
            files: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&mut self, rel: impl Into<String>) {
        let rel = rel.into();
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        write_atomic(&p, bytes)?;
        self.record(rel);
        Ok(())
    }

    fn write_tensor(&mut self, rel: &str, t: Tensor<f32>) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        write_sgt1(&p, &AnyTensor::F32(t))?;
        self.record(rel);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let doc = OutputsFile {
            command: self.command,
            files: &self.files,
        };
        let text = serde_json::to_string_pretty(&doc).expect("serializable");
        write_atomic(&self.root.join("outputs.json"), text.as_bytes())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_json("{}", None)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.scale {
        cfg.model.scale = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_arch(s: &str) -> Result<Arch> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "fcn" => Ok(Arch::Fcn),
        "fc_resnet" | "fcresnet" | "resnet" => Ok(Arch::FcResnet),
        "pipeline" => Ok(Arch::Pipeline),
        _ => Err(Error::Config(format!(
            "unknown architecture `{s}` (fcn, fc_resnet, pipeline)"
        ))),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` must be set in the config")))
}

fn open(path: &Path) -> Result<Dataset> {
    load_dataset(path)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn members(cli: &Cli) -> Result<Vec<ModelGraph<f32>>> {
    if cli.checkpoints.is_empty() {
        return Err(Error::Config("--checkpoints is required".into()));
    }
    cli.checkpoints
        .iter()
        .map(|p| Checkpoint::load(p)?.to_model::<f32>())
        .collect()
}

fn predict_sample(models: &mut [ModelGraph<f32>], s: &Sample) -> Result<Tensor<f32>> {
    let [_, h, w] = [s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]];
    let x = s.image.clone().reshape(&[1, 1, h, w])?;
    let p = predict_ensemble(models, &x)?.reshape(&[1, h, w])?;
    crop_back(&p, s.original.0, s.original.1)
}

fn crop_mask(m: &Mask, h: usize, w: usize) -> Result<Mask> {
    Mask::from_tensor(&crop_back(&m.to_tensor::<f32>(), h, w)?)
}

pub fn run(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::GenSynthetic => gen_synthetic(cli),
        Command::Train => cmd_train(cli),
        Command::Predict => predict(cli),
        Command::Evaluate { predictions } => evaluate(cli, predictions.as_deref()),
        Command::Gradcheck {
            scope,
            inject_fault,
        } => cmd_gradcheck(cli, scope, inject_fault.as_deref()),
        Command::Summary { arch, input_size } => summary(cli, arch.as_deref(), *input_size),
        Command::Postprocess { input } => postprocess(cli, input),
        Command::Analyze => analyze(cli),
    }
}

fn gen_synthetic(cli: &Cli) -> Result<Status> {
    let cfg = load_config(cli)?;
    let mut out = Outputs::new(&cli.out, "gen-synthetic")?;
    for (name, task) in [("train", &cfg.synthetic.train), ("val", &cfg.synthetic.val)] {
        let mut task = task.clone();
        if let Some(s) = cli.seed {
            task.seed = SeedSource::new(s)
                .derive("synthetic", u64::from(name == "val"))
                .seed();
        }
        let m = generate_synthetic(&task, &out.path(name))?;
        for r in &m.records {
            out.record(format!("{name}/{}", r.image.display()));
            if let Some(mp) = &r.mask {
                out.record(format!("{name}/{}", mp.display()));
            }
        }
        out.record(format!("{name}/manifest.json"));
        eprintln!("wrote {} {name} samples", m.records.len());
    }
    out.finish()?;
    Ok(Status::Passed)
}

fn cmd_train(cli: &Cli) -> Result<Status> {
    let cfg = load_config(cli)?;
    let train_set = open(required(&cfg.data.train, "data.train")?)?.load_all()?;
    let val_set = match &cfg.data.val {
        Some(p) => Some(open(p)?.load_all()?),
        None => None,
    };
    let mut out = Outputs::new(&cli.out, "train")?;
    let mut summary = String::from("member,seed,best_epoch,best_val_dice,epochs,stopped_early\n");
    match val_set {
        Some(val) if cfg.ensemble_size == 1 => {
            let mut model = ModelGraph::<f32>::build(cfg.arch, cfg.model, cfg.seed)?;
            eprintln!(
                "training {} ({} parameters)",
                cfg.arch.name(),
                model.num_params()
            );
            let o = train(
                &mut model,
                &train_set,
                &val,
                &cfg.train,
                SeedSource::new(cfg.seed),
                Some(&cli.out),
            )?;
            out.record("history.csv");
            out.record("best.sgc1");
            let _ = writeln!(
                summary,
                "0,{},{},{},{},{}",
                cfg.seed,
                o.best_epoch,
                o.best_dice,
                o.history.epochs.len(),
                o.stopped_early
            );
        }
        val => {
            let mut pool = train_set;
            pool.extend(val.unwrap_or_default());
            let members = train_ensemble::<f32>(
                cfg.ensemble_size,
                cfg.seed,
                cfg.arch,
                cfg.model,
                &pool,
                &cfg.train,
                Some(&cli.out),
            )?;
            for m in &members {
                let dir = format!("member_{:02}", m.index);
                out.record(format!("{dir}/history.csv"));
                out.record(format!("{dir}/best.sgc1"));
                let o = &m.outcome;
                let _ = writeln!(
                    summary,
                    "{},{},{},{},{},{}",
                    m.index,
                    m.seed,
                    o.best_epoch,
                    o.best_dice,
                    o.history.epochs.len(),
                    o.stopped_early
                );
            }
        }
    }
    out.write("train_summary.csv", summary.as_bytes())?;
    eprint!("{summary}");
    out.finish()?;
    Ok(Status::Passed)
}

fn predict(cli: &Cli) -> Result<Status> {
    let cfg = load_config(cli)?;
    let ds = open(required(&cfg.data.test, "data.test")?)?;
    let mut models = members(cli)?;
    let mut out = Outputs::new(&cli.out, "predict")?;
    let mut preds = Vec::new();
    let mut names = Vec::new();
    let mut provenance = Vec::new();
    for i in 0..ds.len() {
        let s = ds.sample(i)?;
        let p = predict_sample(&mut models, &s)?;
        names.push(stem(&ds.manifest.records[i].image));
        provenance.push(s.volume_id.clone().zip(s.slice_index));
        preds.push(p);
    }
    if cfg.postprocess.largest_component {
        let t = cfg.postprocess.threshold;
        // Slices with volume provenance are filtered per volume, the rest per image.
        let vol_idx: Vec<usize> = (0..preds.len())
            .filter(|&i| provenance[i].is_some())
            .collect();
        if !vol_idx.is_empty() {
            let prov: Vec<(String, usize)> = vol_idx
                .iter()
                .map(|&i| provenance[i].clone().expect("volume"))
                .collect();
            let vp: Vec<Tensor<f32>> = vol_idx.iter().map(|&i| preds[i].clone()).collect();
            for (id, vol) in group_slices_to_volume(&vp, &prov)? {
                let conn = match cfg.postprocess.connectivity {
                    Some(c) => Connectivity::from_count(c)?,
                    None => Connectivity::default_for_depth(vol.shape()[0]),
                };
                let kept = largest_component(&vol, t, conn)?;
                out.write_tensor(&format!("volumes/{id}.sgt1"), kept)?;
            }
        }
        for (i, p) in preds.iter_mut().enumerate() {
            if provenance[i].is_none() {
                let conn = match cfg.postprocess.connectivity {
                    Some(c) => Connectivity::from_count(c)?,
                    None => Connectivity::Eight,
                };
                let kept = largest_component(p, t, conn)?;
                out.write_tensor(&format!("postprocessed/{}.sgt1", names[i]), kept)?;
            }
        }
    }
    for (name, p) in names.iter().zip(preds) {
        out.write_tensor(&format!("predictions/{name}.sgt1"), p)?;
    }
    out.finish()?;
    eprintln!("wrote {} predictions", names.len());
    Ok(Status::Passed)
}

fn evaluate(cli: &Cli, stored: Option<&Path>) -> Result<Status> {
    let cfg = load_config(cli)?;
    let ds = open(required(&cfg.data.test, "data.test")?)?;
    let mut models = match stored {
        Some(_) => Vec::new(),
        None => members(cli)?,
    };
    let mut out = Outputs::new(&cli.out, "evaluate")?;
    let mut csv = String::from("image,dice\n");
    let mut total = 0.0;
    for i in 0..ds.len() {
        let s = ds.sample(i)?;
        let name = stem(&ds.manifest.records[i].image);
        let (h, w) = s.original;
        let pred = match stored {
            Some(dir) => {
                let p = read_sgt1(&dir.join(format!("{name}.sgt1")))?.into_tensor::<f32>();
                if p.numel() != h * w {
                    return Err(Error::ShapeMismatch {
                        op: "evaluate",
                        left: p.shape().to_vec(),
                        right: vec![1, h, w],
                    });
                }
                p.reshape(&[1, h, w])?
            }
            None => predict_sample(&mut models, &s)?,
        };
        let mask = crop_mask(s.require_mask()?, h, w)?;
        let d = dice_coefficient(&pred, &mask, DEFAULT_THRESHOLD as f32)?;
        total += d;
        let _ = writeln!(csv, "{},{}", ds.manifest.records[i].image.display(), d);
    }
    let mean = if ds.is_empty() {
        f64::NAN
    } else {
        total / ds.len() as f64
    };
    let _ = writeln!(csv, "mean,{mean}");
    out.write("dice.csv", csv.as_bytes())?;
    out.finish()?;
    println!("mean dice {mean}");
    Ok(Status::Passed)
}

fn cmd_gradcheck(cli: &Cli, scope: &str, fault: Option<&str>) -> Result<Status> {
    let scope: Scope = scope
        .parse()
        .map_err(|e: Error| Error::Config(e.to_string()))?;
    let fault = fault
        .map(parse_op_kind)
        .transpose()
        .map_err(|e| Error::Config(e.to_string()))?;
    let report = gradcheck::run(scope, cli.seed.unwrap_or(0), fault)?;
    let text = report.to_text();
    print!("{text}");
    let mut out = Outputs::new(&cli.out, "gradcheck")?;
    out.write("gradcheck.txt", text.as_bytes())?;
    out.finish()?;
    if report.passed() {
        Ok(Status::Passed)
    } else {
        eprintln!("gradient check failed");
        Ok(Status::CheckFailed)
    }
}

fn summary(cli: &Cli, arch: Option<&str>, size: usize) -> Result<Status> {
    let cfg = load_config(cli)?;
    let arch = match arch {
        Some(a) => parse_arch(a)?,
        None => cfg.arch,
    };
    let model = ModelGraph::<f32>::build(arch, cfg.model, cfg.seed)?;
    let s = summarize(&model, size, size)?;
    let text = s.to_text();
    print!("{text}");
    let mut out = Outputs::new(&cli.out, "summary")?;
    out.write("summary.txt", text.as_bytes())?;
    out.write("summary.csv", s.to_csv().as_bytes())?;
    out.finish()?;
    Ok(Status::Passed)
}

fn postprocess(cli: &Cli, input: &Path) -> Result<Status> {
    let cfg = load_config(cli)?;
    let t = read_sgt1(input)?.into_tensor::<f32>();
    let depth = if t.ndim() == 3 { t.shape()[0] } else { 1 };
    let conn = match cfg.postprocess.connectivity {
        Some(c) => Connectivity::from_count(c)?,
        None => Connectivity::default_for_depth(depth),
    };
    let kept = largest_component(&t, cfg.postprocess.threshold, conn)?;
    let mut out = Outputs::new(&cli.out, "postprocess")?;
    out.write_tensor(&format!("{}_largest.sgt1", stem(input)), kept)?;
    out.finish()?;
    Ok(Status::Passed)
}

fn analyze(cli: &Cli) -> Result<Status> {
    let cfg = load_config(cli)?;
    let path = cfg
        .data
        .val
        .as_deref()
        .or(cfg.data.test.as_deref())
        .ok_or_else(|| Error::Config("`data.val` or `data.test` must be set for analyze".into()))?;
    let ds = open(path)?;
    let samples = ds.load_all()?;
    let ck_path = cli
        .checkpoints
        .first()
        .ok_or_else(|| Error::Config("--checkpoints is required".into()))?;
    let ck = Checkpoint::load(ck_path)?;
    let report = analyze_checkpoint(&ck, &samples, &ds.manifest.classes, &cfg.analysis)?;
    if report.untrained {
        eprintln!("warning: the checkpoint never took an optimizer step");
    }
    let mut out = Outputs::new(&cli.out, "analyze")?;
    out.write("histograms.csv", report.histogram_csv().as_bytes())?;
    out.write("histogram_summary.csv", report.summary_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    out.write("report.json", json.as_bytes())?;
    out.finish()?;
    print!("{}", report.summary_csv());
    Ok(Status::Passed)
}
