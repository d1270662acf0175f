use serde::{Deserialize, Serialize};

use super::block::{BlockVariant, ResidualBlock, ResidualBlockCfg};
use super::layers::{Builder, ConvUnit};
use super::spec::{
    fc_resnet_long_skips, fc_resnet_table, fcn_table, scale_width, LayerKind, LayerSpec, Resample,
};
use crate::autodiff::{BnConfig, Graph, Mode, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{Rng, SeedSource};
use crate::tensor::{Element, InitScheme, Tensor};

/// Input extents must be multiples of this (four 2× reductions).
pub const SPATIAL_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Fcn,
    FcResnet,
    Pipeline,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Fcn => "fcn",
            Arch::FcResnet => "fc_resnet",
            Arch::Pipeline => "pipeline",
        }
    }
}

/// Which FC-ResNet long skips to wire.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongSkips {
    None,
    /// Every contracting stage except the deepest one.
    #[default]
    Standard,
    /// Also the deepest stage into the first expanding stage (needs a wide
    /// projection).
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub scale: f64,
    pub long_skips: LongSkips,
    pub dropout: f64,
    pub init: InitScheme,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            long_skips: LongSkips::Standard,
            dropout: 0.0,
            init: InitScheme::HeNormal,
        }
    }
}

impl ArchConfig {
    pub fn with_scale(scale: f64) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    Concat,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipConnection {
    pub from: usize,
    pub to: usize,
    pub mode: SkipMode,
}

#[derive(Clone, Debug)]
pub enum Stage {
    Input,
    Convs(Vec<ConvUnit>),
    MaxPool,
    Upsample,
    Merge,
    Blocks(Vec<ResidualBlock>),
    Classifier(ConvUnit),
}

#[derive(Clone, Debug)]
pub struct Row {
    /// "FCN" or "FC-ResNet".
    pub section: &'static str,
    /// Scaled spec; merge rows carry their derived width.
    pub spec: LayerSpec,
    pub stage: Stage,
    /// Projection applied to a summed long skip entering this row.
    pub skip_proj: Option<ConvUnit>,
}

impl Row {
    fn convs(&self) -> Vec<&ConvUnit> {
        match &self.stage {
            Stage::Convs(u) => u.iter().collect(),
            Stage::Classifier(u) => vec![u],
            Stage::Blocks(bs) => bs
                .iter()
                .flat_map(|b| b.units.iter().chain(b.shortcut.as_ref()))
                .collect(),
            _ => Vec::new(),
        }
        .into_iter()
        .chain(self.skip_proj.as_ref())
        .collect()
    }
}

/// Node ids recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub rows: Vec<NodeId>,
    /// `(row, input, output)` per residual block.
    pub blocks: Vec<(usize, NodeId, NodeId)>,
    /// Sigmoid probabilities.
    pub output: NodeId,
}

/// A built network: rows in table order, parameters and skip wiring.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Element> {
    pub arch: Arch,
    pub config: ArchConfig,
    pub rows: Vec<Row>,
    pub skips: Vec<SkipConnection>,
    pub params: ParamStore<T>,
    pub bn: BnConfig,
    /// Row producing the pre-processor output in a pipeline.
    pub preprocessor_output: Option<usize>,
}

fn slug(name: &str) -> String {
    name.to_lowercase().replace(' ', "")
}

struct Assembler<'a, T: Element> {
    b: Builder<'a, T>,
    rows: Vec<Row>,
    skips: Vec<SkipConnection>,
    widths: Vec<usize>,
    cfg: ArchConfig,
}

impl<T: Element> Assembler<'_, T> {
    fn width(&self) -> usize {
        *self.widths.last().unwrap_or(&1)
    }

    fn push(
        &mut self,
        section: &'static str,
        mut spec: LayerSpec,
        stage: Stage,
        skip_proj: Option<ConvUnit>,
    ) {
        let w = match &stage {
            Stage::Input => 1,
            Stage::Convs(u) => u.last().expect("non-empty").cout,
            Stage::Classifier(u) => u.cout,
            Stage::Blocks(b) => b.last().expect("non-empty").cfg.out_width,
            Stage::MaxPool | Stage::Upsample => self.width(),
            Stage::Merge => self.width() + self.widths[spec.merge_from.expect("merge source")],
        };
        spec.output_width = w;
        self.widths.push(w);
        self.rows.push(Row {
            section,
            spec,
            stage,
            skip_proj,
        });
    }

    fn fcn(&mut self, prefix: &str) -> Result<()> {
        let offset = self.rows.len();
        let table = fcn_table();
        let last = table.len() - 1;
        for (i, mut spec) in table.into_iter().enumerate() {
            let name = format!("{prefix}.{}", slug(&spec.name));
            if let Some(src) = spec.merge_from.as_mut() {
                *src += offset;
                self.skips.push(SkipConnection {
                    from: *src,
                    to: offset + i,
                    mode: SkipMode::Concat,
                });
            }
            let stage = match spec.kind {
                LayerKind::Input => {
                    if offset != 0 {
                        return Err(Error::invalid("input row must come first"));
                    }
                    Stage::Input
                }
                LayerKind::MaxPool => Stage::MaxPool,
                LayerKind::Upsample => Stage::Upsample,
                LayerKind::ConcatMerge => Stage::Merge,
                LayerKind::Conv3 | LayerKind::Conv2 => {
                    let (k, relu) = if spec.kind == LayerKind::Conv2 {
                        (2, false)
                    } else {
                        (3, i != last)
                    };
                    let out = if i == last {
                        1
                    } else {
                        scale_width(&spec.name, spec.output_width, self.cfg.scale)?
                    };
                    let mut units = Vec::new();
                    let mut cin = self.width();
                    for r in 0..spec.repetition {
                        units.push(self.b.conv(
                            &format!("{name}.{r}"),
                            cin,
                            out,
                            k,
                            1,
                            false,
                            relu,
                        )?);
                        cin = out;
                    }
                    Stage::Convs(units)
                }
                k => {
                    return Err(Error::invalid(format!(
                        "unexpected layer kind {k:?} in the pre-processor"
                    )))
                }
            };
            self.push("FCN", spec, stage, None);
        }
        Ok(())
    }

    fn fc_resnet(&mut self, prefix: &str) -> Result<()> {
        let offset = self.rows.len();
        let mut skip_into: Vec<Option<usize>> = vec![None; fc_resnet_table().len()];
        let mut pairs = match self.cfg.long_skips {
            LongSkips::None => Vec::new(),
            LongSkips::Standard => fc_resnet_long_skips(),
            LongSkips::All => {
                let mut p = fc_resnet_long_skips();
                p.push((4, 6));
                p
            }
        };
        pairs.sort_unstable();
        for &(from, to) in &pairs {
            skip_into[to] = Some(from);
        }
        for (i, spec) in fc_resnet_table().into_iter().enumerate() {
            let name = format!("{prefix}.{}", slug(&spec.name));
            let skip_proj = match skip_into[i] {
                Some(from) => {
                    let (src_w, dst_w) = (self.widths[offset + from], self.width());
                    self.skips.push(SkipConnection {
                        from: offset + from,
                        to: offset + i,
                        mode: SkipMode::Sum,
                    });
                    if src_w != dst_w {
                        Some(self.b.conv(
                            &format!("{name}.skip"),
                            src_w,
                            dst_w,
                            1,
                            1,
                            false,
                            false,
                        )?)
                    } else {
                        None
                    }
                }
                None => None,
            };
            let stage = match spec.kind {
                LayerKind::Conv3 => {
                    let w = scale_width(&spec.name, spec.output_width, self.cfg.scale)?;
                    let entry = i == 0;
                    Stage::Convs(vec![self.b.conv(
                        &format!("{name}.0"),
                        self.width(),
                        w,
                        3,
                        1,
                        !entry,
                        false,
                    )?])
                }
                LayerKind::Classifier => {
                    Stage::Classifier(self.b.conv(&name, self.width(), 1, 1, 1, true, false)?)
                }
                LayerKind::SimpleBlock | LayerKind::BottleneckBlock => {
                    let variant = if spec.kind == LayerKind::SimpleBlock {
                        BlockVariant::Simple
                    } else {
                        BlockVariant::Bottleneck
                    };
                    let w = scale_width(&spec.name, spec.output_width, self.cfg.scale)?;
                    let mut blocks = Vec::new();
                    for r in 0..spec.repetition {
                        let cfg = ResidualBlockCfg {
                            variant,
                            in_width: self.width_before(&blocks),
                            out_width: w,
                            resample: if r == 0 {
                                spec.resample
                            } else {
                                Resample::None
                            },
                            dropout: self.cfg.dropout,
                        };
                        blocks.push(ResidualBlock::build(
                            &mut self.b,
                            &format!("{name}.{r}"),
                            cfg,
                        )?);
                    }
                    Stage::Blocks(blocks)
                }
                k => {
                    return Err(Error::invalid(format!(
                        "unexpected layer kind {k:?} in the FC-ResNet"
                    )))
                }
            };
            self.push("FC-ResNet", spec, stage, skip_proj);
        }
        Ok(())
    }

    fn width_before(&self, blocks: &[ResidualBlock]) -> usize {
        blocks.last().map_or(self.width(), |b| b.cfg.out_width)
    }
}

impl<T: Element> ModelGraph<T> {
    pub fn build(arch: Arch, config: ArchConfig, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::invalid(format!(
                "dropout rate {} outside [0, 1)",
                config.dropout
            )));
        }
        let mut params = ParamStore::new();
        let mut asm = Assembler {
            b: Builder {
                store: &mut params,
                seeds: SeedSource::new(seed),
                init: config.init,
            },
            rows: Vec::new(),
            skips: Vec::new(),
            widths: Vec::new(),
            cfg: config,
        };
        let mut preprocessor_output = None;
        match arch {
            Arch::Fcn => asm.fcn("fcn")?,
            Arch::FcResnet => asm.fc_resnet("resnet")?,
            Arch::Pipeline => {
                asm.fcn("fcn")?;
                preprocessor_output = Some(asm.rows.len() - 1);
                asm.fc_resnet("resnet")?;
            }
        }
        let (rows, skips) = (asm.rows, asm.skips);
        Ok(Self {
            arch,
            config,
            rows,
            skips,
            params,
            bn: BnConfig::default(),
            preprocessor_output,
        })
    }

    pub fn fcn(config: ArchConfig, seed: u64) -> Result<Self> {
        Self::build(Arch::Fcn, config, seed)
    }

    pub fn fc_resnet(config: ArchConfig, seed: u64) -> Result<Self> {
        Self::build(Arch::FcResnet, config, seed)
    }

    pub fn pipeline(config: ArchConfig, seed: u64) -> Result<Self> {
        Self::build(Arch::Pipeline, config, seed)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let bad = || Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!(
                "model input must be [B, 1, H, W] with H, W multiples of {SPATIAL_MULTIPLE}"
            ),
        };
        match shape {
            [_, 1, h, w] if h % SPATIAL_MULTIPLE == 0 && w % SPATIAL_MULTIPLE == 0 => Ok(()),
            _ => Err(bad()),
        }
    }

    /// Runs the network, recording every row output and residual block.
    pub fn forward_traced(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Trace> {
        self.forward_prefix(g, x, mode, rng, self.rows.len())
    }

    /// Like [`Self::forward_traced`] but stops after the first `rows` rows;
    /// `output` is the sigmoid of the last one.
    pub fn forward_prefix(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        mode: Mode,
        rng: &mut Rng,
        rows: usize,
    ) -> Result<Trace> {
        self.check_input(g.value(x).shape())?;
        if rows == 0 || rows > self.rows.len() {
            return Err(Error::invalid(format!(
                "cannot stop after row {rows} of {}",
                self.rows.len()
            )));
        }
        let bn = self.bn;
        let mut outs: Vec<NodeId> = Vec::with_capacity(self.rows.len());
        let mut blocks = Vec::new();
        let mut cur = x;
        for (i, row) in self.rows.iter().enumerate().take(rows) {
            if let Some(skip) = self
                .skips
                .iter()
                .find(|s| s.to == i && s.mode == SkipMode::Sum)
            {
                let mut s = outs[skip.from];
                if let Some(p) = &row.skip_proj {
                    s = p.forward(g, &mut self.params, s, mode, bn)?;
                }
                cur = g.add(cur, s)?;
            }
            cur = match &row.stage {
                Stage::Input => cur,
                Stage::MaxPool => g.maxpool2(cur)?,
                Stage::Upsample => g.upsample2(cur)?,
                Stage::Merge => {
                    g.concat_channels(cur, outs[row.spec.merge_from.expect("merge source")])?
                }
                Stage::Convs(units) => {
                    for u in units {
                        cur = u.forward(g, &mut self.params, cur, mode, bn)?;
                    }
                    cur
                }
                Stage::Blocks(bs) => {
                    for b in bs {
                        let input = cur;
                        cur = b.forward(g, &mut self.params, cur, mode, bn, rng)?;
                        blocks.push((i, input, cur));
                    }
                    cur
                }
                Stage::Classifier(u) => u.forward(g, &mut self.params, cur, mode, bn)?,
            };
            outs.push(cur);
        }
        let output = g.sigmoid(cur);
        Ok(Trace {
            rows: outs,
            blocks,
            output,
        })
    }

    /// Per-pixel foreground probabilities. The FC-ResNet ends in its
    /// classifier's sigmoid; a standalone pre-processor gets one appended.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        Ok(self.forward_traced(g, x, mode, rng)?.output)
    }

    /// Eval-mode probabilities for a batch.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let mut rng = SeedSource::new(0).stream("predict", 0);
        let y = self.forward(&mut g, xi, Mode::Eval, &mut rng)?;
        Ok(g.value(y).clone())
    }

    /// All residual blocks in row order.
    pub fn blocks(&self) -> impl Iterator<Item = &ResidualBlock> {
        self.rows.iter().flat_map(|r| match &r.stage {
            Stage::Blocks(b) => b.as_slice(),
            _ => &[],
        })
    }

    /// Zeroes the final convolution of every residual function.
    pub fn zero_residuals(&mut self) {
        let blocks: Vec<ResidualBlock> = self.blocks().cloned().collect();
        for b in &blocks {
            b.zero_residual(&mut self.params);
        }
    }

    /// Convolutions on the FC-ResNet residual path: plain convs, residual
    /// function convs and the classifier. Projections are excluded.
    pub fn residual_path_convs(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.section == "FC-ResNet")
            .map(|r| match &r.stage {
                Stage::Convs(u) => u.len(),
                Stage::Classifier(_) => 1,
                Stage::Blocks(bs) => bs.iter().map(ResidualBlock::residual_convs).sum(),
                _ => 0,
            })
            .sum()
    }

    /// 1×1 projections on shortcuts and long skips.
    pub fn projection_convs(&self) -> usize {
        self.rows
            .iter()
            .map(|r| {
                let blocks = match &r.stage {
                    Stage::Blocks(bs) => bs.iter().filter(|b| b.shortcut.is_some()).count(),
                    _ => 0,
                };
                blocks + usize::from(r.skip_proj.is_some())
            })
            .sum()
    }

    pub fn row_params(&self, i: usize) -> usize {
        self.rows[i]
            .convs()
            .iter()
            .map(|u| u.num_params(&self.params))
            .sum()
    }

    /// `(height, width, channels)` after each row for an `h×w` input.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        self.check_input(&[1, 1, h, w])?;
        let (mut h, mut w) = (h, w);
        let mut out = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let down = matches!(row.stage, Stage::MaxPool) || row.spec.resample == Resample::Down;
            let up = matches!(row.stage, Stage::Upsample) || row.spec.resample == Resample::Up;
            if down {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            } else if up {
                h *= 2;
                w *= 2;
            }
            out.push((h, w, row.spec.output_width));
        }
        Ok(out)
    }

    /// Deterministic structural description (architecture, widths and every
    /// parameter name and shape), used to key checkpoints.
    pub fn descriptor(&self) -> String {
        let mut s = format!(
            "arch={} scale={} skips={:?} dropout={}\n",
            self.arch.name(),
            self.config.scale,
            self.config.long_skips,
            self.config.dropout
        );
        for p in self.params.iter() {
            s.push_str(&format!("{} {:?}\n", p.name, p.value.shape()));
        }
        for st in self.params.bn_states() {
            s.push_str(&format!("bn {} {:?}\n", st.name, st.running_mean.shape()));
        }
        s
    }
}
