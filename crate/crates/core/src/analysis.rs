//! Per-class intensity histograms before and after the learned pre-processor.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::checkpoint::Checkpoint;
use crate::data::{ClassEntry, Sample};
use crate::error::{Error, Result};
use crate::mask::VOID;
use crate::nn::{Arch, ModelGraph};
use crate::rng::SeedSource;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_BINS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistStage {
    /// Raw pipeline input.
    Input,
    /// Single-channel output of the pre-processor.
    Preprocessor,
}

impl HistStage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Preprocessor => "preprocessor",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub stage: HistStage,
    pub class: u8,
    pub class_name: String,
    /// `counts.len() + 1` edges spanning the observed range.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    /// `bins` equal-width bins over `[min, max]`; one bin when all values are
    /// equal. The normal fit is the sample mean and population deviation.
    pub fn build(
        stage: HistStage,
        class: u8,
        class_name: &str,
        values: &[f64],
        bins: usize,
    ) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        let n = values.len();
        if n == 0 {
            return Ok(Self {
                stage,
                class,
                class_name: class_name.into(),
                edges: Vec::new(),
                counts: Vec::new(),
                total: 0,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            });
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let (edges, counts) = if min == max {
            (vec![min, max], vec![n as u64])
        } else {
            let width = (max - min) / bins as f64;
            let edges: Vec<f64> = (0..=bins)
                .map(|i| {
                    if i == bins {
                        max
                    } else {
                        min + width * i as f64
                    }
                })
                .collect();
            let mut counts = vec![0u64; bins];
            for &v in values {
                let k = (((v - min) / (max - min)) * bins as f64).floor() as usize;
                counts[k.min(bins - 1)] += 1;
            }
            (edges, counts)
        };
        Ok(Self {
            stage,
            class,
            class_name: class_name.into(),
            edges,
            counts,
            total: n as u64,
            mean,
            std,
            min,
            max,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub bins: usize,
    /// Set when the analysed parameters never received an update.
    pub untrained: bool,
    pub histograms: Vec<Histogram>,
}

impl HistogramReport {
    pub fn get(&self, stage: HistStage, class: u8) -> Option<&Histogram> {
        self.histograms
            .iter()
            .find(|h| h.stage == stage && h.class == class)
    }

    /// Plot-ready rows `bin_left,bin_right,count,stage,class`.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count,stage,class\n");
        for h in &self.histograms {
            for (k, c) in h.counts.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    h.edges[k],
                    h.edges[k + 1],
                    c,
                    h.stage.name(),
                    h.class
                );
            }
        }
        s
    }

    /// One row per stage and class: `stage,class,name,count,mean,std,min,max`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("stage,class,name,count,mean,std,min,max\n");
        for h in &self.histograms {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                h.stage.name(),
                h.class,
                h.class_name,
                h.total,
                h.mean,
                h.std,
                h.min,
                h.max
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bins: usize,
    /// Also histogram void pixels as their own class (label 255) instead of
    /// dropping them.
    pub include_void: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            include_void: false,
        }
    }
}

/// Pre-processor output (before any sigmoid) for one `[1, H, W]` image.
pub fn preprocessor_output<T: Element>(
    model: &mut ModelGraph<T>,
    image: &Tensor<f32>,
) -> Result<Tensor<T>> {
    let [_, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let mut g = Graph::new();
    let x = g.input(image.cast::<T>().reshape(&[1, 1, h, w])?);
    let mut rng = SeedSource::new(0).stream("analysis", 0);
    let row = match model.arch {
        Arch::Pipeline => model
            .preprocessor_output
            .expect("pipelines record the pre-processor row"),
        Arch::Fcn => model.rows.len() - 1,
        Arch::FcResnet => {
            return Err(Error::invalid(
                "an FC-ResNet alone has no pre-processor to analyse",
            ))
        }
    };
    let trace = model.forward_prefix(&mut g, x, Mode::Eval, &mut rng, row + 1)?;
    Ok(g.value(trace.rows[row]).clone())
}

/// Histograms of raw input and pre-processor output per class over
/// `samples`. Pixels are attributed by the sample masks; void is excluded
/// unless requested.
pub fn analyze_normalization<T: Element>(
    model: &mut ModelGraph<T>,
    samples: &[Sample],
    classes: &[ClassEntry],
    cfg: &AnalysisConfig,
    untrained: bool,
) -> Result<HistogramReport> {
    let mut class_list: Vec<(u8, String)> =
        classes.iter().map(|c| (c.label, c.name.clone())).collect();
    if cfg.include_void {
        class_list.push((VOID, "void".into()));
    }
    let mut values = vec![(Vec::new(), Vec::new()); class_list.len()];
    for s in samples {
        let m = s.require_mask()?;
        let out = preprocessor_output(model, &s.image)?;
        for ((&l, &x), &o) in m.labels().iter().zip(s.image.data()).zip(out.data()) {
            if let Some(k) = class_list.iter().position(|(c, _)| *c == l) {
                values[k].0.push(f64::from(x));
                values[k].1.push(o.to_f64().unwrap_or(f64::NAN));
            }
        }
    }
    let mut histograms = Vec::new();
    for stage in [HistStage::Input, HistStage::Preprocessor] {
        for ((label, name), (vin, vout)) in class_list.iter().zip(&values) {
            let v = if stage == HistStage::Input { vin } else { vout };
            histograms.push(Histogram::build(stage, *label, name, v, cfg.bins)?);
        }
    }
    Ok(HistogramReport {
        bins: cfg.bins,
        untrained,
        histograms,
    })
}

/// Restores `ck` and analyses it; flags checkpoints that never took an
/// optimizer step.
pub fn analyze_checkpoint(
    ck: &Checkpoint,
    samples: &[Sample],
    classes: &[ClassEntry],
    cfg: &AnalysisConfig,
) -> Result<HistogramReport> {
    let mut model = ck.to_model::<f32>()?;
    let untrained = ck.meta()?.step == 0;
    analyze_normalization(&mut model, samples, classes, cfg, untrained)
}
