//! Pre-activation residual blocks.

use serde::{Deserialize, Serialize};

use super::layers::{Builder, ConvUnit};
use super::spec::Resample;
use crate::autodiff::{BnConfig, Graph, Mode, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    Simple,
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockCfg {
    pub variant: BlockVariant,
    pub in_width: usize,
    pub out_width: usize,
    pub resample: Resample,
    pub dropout: f64,
}

impl ResidualBlockCfg {
    pub fn bottleneck_width(&self) -> usize {
        self.out_width / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_width == 0 || self.out_width == 0 {
            return Err(Error::invalid("residual block with zero width"));
        }
        if self.variant == BlockVariant::Bottleneck && !self.out_width.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "bottleneck output width {} is not divisible by 4",
                self.out_width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// `x_out = shortcut(x) + H(x)`, where `H` chains BN→ReLU→conv units.
///
/// Simple blocks max-pool before both paths when downsampling; bottlenecks
/// stride their 3×3 conv and project the shortcut with a stride-2 1×1 conv.
/// Upsampling blocks repeat-upsample before both paths.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub cfg: ResidualBlockCfg,
    pub units: Vec<ConvUnit>,
    pub shortcut: Option<ConvUnit>,
}

impl ResidualBlock {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        prefix: &str,
        cfg: ResidualBlockCfg,
    ) -> Result<Self> {
        cfg.validate()?;
        let (i, o) = (cfg.in_width, cfg.out_width);
        let strided = cfg.variant == BlockVariant::Bottleneck && cfg.resample == Resample::Down;
        let units = match cfg.variant {
            BlockVariant::Simple => vec![
                b.conv(&format!("{prefix}.conv1"), i, o, 3, 1, true, false)?,
                b.conv(&format!("{prefix}.conv2"), o, o, 3, 1, true, false)?,
            ],
            BlockVariant::Bottleneck => {
                let m = cfg.bottleneck_width();
                vec![
                    b.conv(&format!("{prefix}.conv1"), i, m, 1, 1, true, false)?,
                    b.conv(
                        &format!("{prefix}.conv2"),
                        m,
                        m,
                        3,
                        if strided { 2 } else { 1 },
                        true,
                        false,
                    )?,
                    b.conv(&format!("{prefix}.conv3"), m, o, 1, 1, true, false)?,
                ]
            }
        };
        let shortcut = if i != o || strided {
            let stride = if strided { 2 } else { 1 };
            Some(b.conv(&format!("{prefix}.shortcut"), i, o, 1, stride, false, false)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            units,
            shortcut,
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
        mode: Mode,
        bn: BnConfig,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let width = g.value(x).dims4()?[1];
        if width != self.cfg.in_width {
            return Err(Error::ShapeMismatch {
                op: "residual block",
                left: g.value(x).shape().to_vec(),
                right: vec![self.cfg.in_width],
            });
        }
        let x = match (self.cfg.variant, self.cfg.resample) {
            (BlockVariant::Simple, Resample::Down) => g.maxpool2(x)?,
            (_, Resample::Up) => g.upsample2(x)?,
            _ => x,
        };
        let mut h = x;
        let last = self.units.len() - 1;
        for (k, unit) in self.units.iter().enumerate() {
            if k == last && self.cfg.dropout > 0.0 {
                let pre = unit.pre.as_ref().expect("residual units are pre-activated");
                h = pre.forward(g, store, h, mode, bn)?;
                h = g.relu(h);
                h = g.dropout(h, self.cfg.dropout, mode, rng)?;
                h = unit.conv_only(g, store, h)?;
            } else {
                h = unit.forward(g, store, h, mode, bn)?;
            }
        }
        let s = match &self.shortcut {
            Some(p) => p.forward(g, store, x, mode, bn)?,
            None => x,
        };
        g.add(s, h)
    }

    /// Number of convolutions on the residual path (projections excluded).
    pub fn residual_convs(&self) -> usize {
        self.units.len()
    }

    pub fn num_params<T: Element>(&self, store: &ParamStore<T>) -> usize {
        self.units
            .iter()
            .chain(self.shortcut.as_ref())
            .map(|u| u.num_params(store))
            .sum()
    }

    /// Zeroes the final convolution of the residual function, so the block
    /// reduces to its shortcut.
    pub fn zero_residual<T: Element>(&self, store: &mut ParamStore<T>) {
        self.units.last().expect("non-empty").zero(store);
    }
}

/// Builds a standalone block in its own store.
pub fn residual_block<T: Element>(
    store: &mut ParamStore<T>,
    seeds: crate::rng::SeedSource,
    prefix: &str,
    cfg: ResidualBlockCfg,
) -> Result<ResidualBlock> {
    let mut b = Builder {
        store,
        seeds,
        init: crate::tensor::InitScheme::HeNormal,
    };
    ResidualBlock::build(&mut b, prefix, cfg)
}
