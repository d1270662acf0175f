//! Declarative layer tables for the pre-processor and the FC-ResNet.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv3,
    Conv2,
    Conv1,
    SimpleBlock,
    BottleneckBlock,
    MaxPool,
    Upsample,
    ConcatMerge,
    SumSkip,
    Classifier,
}

impl LayerKind {
    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Input => "-",
            LayerKind::Conv3 => "conv 3x3",
            LayerKind::Conv2 => "conv 2x2",
            LayerKind::Conv1 => "conv 1x1",
            LayerKind::SimpleBlock => "simple block",
            LayerKind::BottleneckBlock => "bottleneck",
            LayerKind::MaxPool => "maxpooling",
            LayerKind::Upsample => "upsampling",
            LayerKind::ConcatMerge => "concatenate",
            LayerKind::SumSkip => "sum",
            LayerKind::Classifier => "conv 1x1 + sigmoid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    None,
    Down,
    Up,
}

/// One row of an architecture table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub output_width: usize,
    pub repetition: usize,
    pub resample: Resample,
    /// Row whose output is concatenated (merge rows) with this row's input.
    pub merge_from: Option<usize>,
}

impl LayerSpec {
    fn new(
        name: &str,
        kind: LayerKind,
        width: usize,
        repetition: usize,
        resample: Resample,
    ) -> Self {
        Self {
            name: name.to_string(),
            kind,
            output_width: width,
            repetition,
            resample,
            merge_from: None,
        }
    }

    fn merge(name: &str, from: usize) -> Self {
        Self {
            merge_from: Some(from),
            ..Self::new(name, LayerKind::ConcatMerge, 0, 1, Resample::None)
        }
    }
}

/// UNet-like pre-processor at full width. Merge widths are left at 0 and
/// derived from the concatenated inputs.
pub fn fcn_table() -> Vec<LayerSpec> {
    use LayerKind::*;
    use Resample::None as Keep;
    vec![
        LayerSpec::new("Input", Input, 1, 1, Keep),
        LayerSpec::new("Down 1", Conv3, 16, 2, Keep),
        LayerSpec::new("Pooling 1", MaxPool, 16, 1, Resample::Down),
        LayerSpec::new("Down 2", Conv3, 32, 2, Keep),
        LayerSpec::new("Pooling 2", MaxPool, 32, 1, Resample::Down),
        LayerSpec::new("Down 3", Conv3, 64, 2, Keep),
        LayerSpec::new("Pooling 3", MaxPool, 64, 1, Resample::Down),
        LayerSpec::new("Down 4", Conv3, 128, 2, Keep),
        LayerSpec::new("Pooling 4", MaxPool, 128, 1, Resample::Down),
        LayerSpec::new("Across", Conv3, 256, 2, Keep),
        LayerSpec::new("Up 1", Upsample, 256, 1, Resample::Up),
        LayerSpec::merge("Merge 1", 7),
        LayerSpec::new("Up 2", Conv2, 128, 1, Keep),
        LayerSpec::new("Up 3", Conv3, 128, 2, Keep),
        LayerSpec::new("Up 4", Upsample, 128, 1, Resample::Up),
        LayerSpec::merge("Merge 2", 5),
        LayerSpec::new("Up 5", Conv2, 64, 1, Keep),
        LayerSpec::new("Up 6", Conv3, 64, 2, Keep),
        LayerSpec::new("Up 7", Upsample, 64, 1, Resample::Up),
        LayerSpec::merge("Merge 3", 3),
        LayerSpec::new("Up 8", Conv2, 32, 1, Keep),
        LayerSpec::new("Up 9", Conv3, 32, 2, Keep),
        LayerSpec::new("Up 10", Upsample, 32, 1, Resample::Up),
        LayerSpec::merge("Merge 4", 1),
        LayerSpec::new("Up 11", Conv2, 16, 1, Keep),
        LayerSpec::new("Up 12", Conv3, 16, 2, Keep),
        LayerSpec::new("Output", Conv3, 1, 1, Keep),
    ]
}

/// FC-ResNet at full width.
pub fn fc_resnet_table() -> Vec<LayerSpec> {
    use LayerKind::*;
    use Resample::*;
    vec![
        LayerSpec::new("Down 1", Conv3, 32, 1, None),
        LayerSpec::new("Down 2", SimpleBlock, 32, 1, Down),
        LayerSpec::new("Down 3", BottleneckBlock, 128, 3, Down),
        LayerSpec::new("Down 4", BottleneckBlock, 256, 8, Down),
        LayerSpec::new("Down 5", BottleneckBlock, 512, 10, Down),
        LayerSpec::new("Across", BottleneckBlock, 1024, 3, None),
        LayerSpec::new("Up 1", BottleneckBlock, 512, 10, Up),
        LayerSpec::new("Up 2", BottleneckBlock, 256, 8, Up),
        LayerSpec::new("Up 3", BottleneckBlock, 128, 3, Up),
        LayerSpec::new("Up 4", SimpleBlock, 32, 1, Up),
        LayerSpec::new("Up 5", Conv3, 32, 1, None),
        LayerSpec::new("Classifier", Classifier, 1, 1, None),
    ]
}

/// Long skips of the FC-ResNet as `(contracting row, expanding row)`: the
/// contracting stage output is summed into the input of the expanding stage
/// that consumes features at the same resolution. The output of Down 5 feeds
/// Across directly, so it gets no long skip.
pub fn fc_resnet_long_skips() -> Vec<(usize, usize)> {
    vec![(3, 7), (2, 8), (1, 9), (0, 10)]
}

/// Scales a channel width, rejecting zero.
pub fn scale_width(name: &str, width: usize, scale: f64) -> Result<usize> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(format!(
            "width scale {scale} outside (0, 1]"
        )));
    }
    let w = (width as f64 * scale).round() as usize;
    if w == 0 {
        return Err(Error::invalid(format!(
            "scale {scale} gives layer `{name}` zero width"
        )));
    }
    Ok(w)
}
