use std::fmt::Write as _;

use serde::Serialize;

use super::model::{Arch, ModelGraph};
use super::spec::LayerKind;
use crate::error::Result;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SummaryRow {
    pub section: String,
    pub name: String,
    pub kind: LayerKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub repetition: usize,
    pub params: usize,
    pub cumulative: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelSummary {
    pub arch: Arch,
    pub input: (usize, usize),
    pub rows: Vec<SummaryRow>,
    pub total_params: usize,
    pub residual_path_convs: usize,
    pub projection_convs: usize,
}

/// Per-row output resolution, width and parameter count for an `h×w` input.
/// Long-skip projections are counted in the row they feed.
pub fn summarize<T: Element>(model: &ModelGraph<T>, h: usize, w: usize) -> Result<ModelSummary> {
    let shapes = model.infer_shapes(h, w)?;
    let mut cumulative = 0;
    let rows = model
        .rows
        .iter()
        .zip(shapes)
        .enumerate()
        .map(|(i, (row, (oh, ow, c)))| {
            let params = model.row_params(i);
            cumulative += params;
            SummaryRow {
                section: row.section.to_string(),
                name: row.spec.name.clone(),
                kind: row.spec.kind,
                height: oh,
                width: ow,
                channels: c,
                repetition: row.spec.repetition,
                params,
                cumulative,
            }
        })
        .collect();
    Ok(ModelSummary {
        arch: model.arch,
        input: (h, w),
        rows,
        total_params: cumulative,
        residual_path_convs: model.residual_path_convs(),
        projection_convs: model.projection_convs(),
    })
}

impl ModelSummary {
    pub fn row(&self, section: &str, name: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.section == section && r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:<11} {:<19} {:>11} {:>6} {:>4} {:>10} {:>11}",
            "section", "layer", "type", "output", "width", "rep", "params", "cumulative"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:<11} {:<19} {:>11} {:>6} {:>4} {:>10} {:>11}",
                r.section,
                r.name,
                r.kind.label(),
                format!("{}x{}", r.height, r.width),
                r.channels,
                r.repetition,
                r.params,
                r.cumulative
            );
        }
        let _ = writeln!(s, "total trainable parameters: {}", self.total_params);
        if self.arch != Arch::Fcn {
            let _ = writeln!(
                s,
                "residual-path convolutions: {} (plus {} projections)",
                self.residual_path_convs, self.projection_convs
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("section,layer,type,height,width,channels,repetition,params,cumulative\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.section,
                r.name,
                r.kind.label(),
                r.height,
                r.width,
                r.channels,
                r.repetition,
                r.params,
                r.cumulative
            );
        }
        let _ = writeln!(s, "total,,,,,,,{},{}", self.total_params, self.total_params);
        s
    }
}
