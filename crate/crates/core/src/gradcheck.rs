//! Central finite-difference checks of every differentiable op, the residual
//! blocks and the full pipeline, all in f64.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{BnConfig, Graph, Mode, NodeId, OpKind, Padding};
use crate::error::{Error, Result};
use crate::loss::TRAIN_SMOOTHING;
use crate::mask::{Mask, VOID};
use crate::nn::{
    residual_block, ArchConfig, BlockVariant, ModelGraph, Resample, ResidualBlock, ResidualBlockCfg,
};
use crate::params::{ParamId, ParamStore};
use crate::rng::{Rng, SeedSource};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
pub const EPSILON: f64 = 1e-5;
/// Central-difference steps tried in order. An entry that disagrees at
/// `EPSILON` is retried with smaller steps, since a ReLU or max-pool switch
/// inside the interval corrupts the estimate. A wrong adjoint disagrees at
/// every step.
const STEPS: [f64; 4] = [EPSILON, 1e-6, 1e-7, 1e-8];
/// Denominator floor of the relative error, as a fraction of the largest
/// analytic gradient magnitude in the check. Entries far below that scale
/// (e.g. conv biases feeding a training-mode batch norm, whose true gradient
/// is exactly zero) are compared against it instead of against themselves,
/// since central differences cannot resolve them beyond round-off.
pub const ERROR_FLOOR: f64 = 1e-6;
const PIPELINE_SAMPLES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Ops,
    Blocks,
    Pipeline,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "pipeline" => Ok(Scope::Pipeline),
            _ => Err(Error::invalid(format!("unknown gradcheck scope `{s}`"))),
        }
    }
}

/// Parses an op name (`conv2d`, `maxpool2`, `batchnorm`, ...) for fault
/// injection.
pub fn parse_op_kind(s: &str) -> Result<OpKind> {
    Ok(match s {
        "conv2d" => OpKind::Conv2d,
        "maxpool2" => OpKind::MaxPool2,
        "upsample2" => OpKind::Upsample2,
        "batchnorm" => OpKind::BatchNorm,
        "relu" => OpKind::Relu,
        "sigmoid" => OpKind::Sigmoid,
        "dropout" => OpKind::Dropout,
        "concat" => OpKind::Concat,
        "add" => OpKind::Add,
        "sum" => OpKind::Sum,
        "mean" => OpKind::Mean,
        "weighted_sum" => OpKind::WeightedSum,
        "dice_loss" => OpKind::DiceLoss,
        _ => return Err(Error::invalid(format!("unknown op `{s}`"))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub entries: usize,
    /// Entries that only agreed at a smaller step.
    pub refined: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradReport {
    pub results: Vec<CheckResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<4} {:<34} max rel err {:.3e} (tol {:.0e}, {} entries, {} refined)",
                if r.passed { "ok" } else { "FAIL" },
                r.name,
                r.max_rel_error,
                r.tolerance,
                r.entries,
                r.refined
            );
        }
        s
    }
}

/// Something with parameters and a scalar objective.
trait Probe {
    fn store(&mut self) -> &mut ParamStore<f64>;
    fn objective(&mut self, g: &mut Graph<f64>) -> Result<NodeId>;
}

fn eval(p: &mut dyn Probe, fault: Option<OpKind>) -> Result<f64> {
    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    let root = p.objective(&mut g)?;
    Ok(g.value(root).data()[0])
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients with central differences. `sample` limits the
/// check to that many randomly drawn entries.
fn check(
    name: &str,
    p: &mut dyn Probe,
    tolerance: f64,
    fault: Option<OpKind>,
    sample: Option<(usize, &mut Rng)>,
) -> Result<CheckResult> {
    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    p.store().zero_grads();
    let root = p.objective(&mut g)?;
    if g.value(root).numel() != 1 {
        return Err(Error::invalid("gradient check objective must be scalar"));
    }
    g.backward(root, None, p.store())?;
    let analytic: Vec<Vec<f64>> = p.store().iter().map(|q| q.grad.data().to_vec()).collect();

    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (pi, a) in analytic.iter().enumerate() {
        entries.extend((0..a.len()).map(|e| (pi, e)));
    }
    if let Some((n, rng)) = sample {
        let mut picked = Vec::with_capacity(n);
        for _ in 0..n.min(entries.len()) {
            let k = rng.random_range(0..entries.len());
            picked.push(entries.swap_remove(k));
        }
        entries = picked;
    }
    let scale = analytic
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (ERROR_FLOOR * scale).max(f64::MIN_POSITIVE);
    let names: Vec<String> = p.store().iter().map(|q| q.name.clone()).collect();
    let mut worst = 0.0f64;
    let mut refined = 0;
    for &(pi, e) in &entries {
        let orig = p.store().by_name(&names[pi]).expect("param").value.data()[e];
        let set = |p: &mut dyn Probe, v: f64| {
            p.store()
                .by_name_mut(&names[pi])
                .expect("param")
                .value
                .data_mut()[e] = v;
        };
        let mut err = f64::INFINITY;
        for (k, step) in STEPS.iter().enumerate() {
            set(p, orig + step);
            let fp = eval(p, fault)?;
            set(p, orig - step);
            let fm = eval(p, fault)?;
            set(p, orig);
            err = err.min(rel_error(analytic[pi][e], (fp - fm) / (2.0 * step), floor));
            if err < tolerance {
                refined += usize::from(k > 0);
                break;
            }
        }
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
        entries: entries.len(),
        refined,
        passed: worst < tolerance,
    })
}

type Build =
    Box<dyn Fn(&mut Graph<f64>, &mut ParamStore<f64>, &[NodeId], &mut Rng) -> Result<NodeId>>;

/// Differentiable leaves held as parameters, combined by `build` and reduced
/// to a scalar by a fixed random weighting (unless `build` is scalar).
struct OpProbe {
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
    build: Build,
    weights: Option<Tensor<f64>>,
    seeds: SeedSource,
}

impl Probe for OpProbe {
    fn store(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    fn objective(&mut self, g: &mut Graph<f64>) -> Result<NodeId> {
        let leaves: Vec<NodeId> = self
            .ids
            .iter()
            .map(|&id| g.param(&self.store, id))
            .collect();
        let mut rng = self.seeds.stream("probe", 0);
        let out = (self.build)(g, &mut self.store, &leaves, &mut rng)?;
        if g.value(out).numel() == 1 {
            return Ok(out);
        }
        if self.weights.is_none() {
            let mut r = self.seeds.stream("weights", 0);
            self.weights = Some(normal(g.value(out).shape(), &mut r));
        }
        g.weighted_sum(out, self.weights.clone().expect("weights"))
    }
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng)).expect("shape")
}

fn op_probe(seeds: SeedSource, leaves: Vec<Tensor<f64>>, build: Build) -> OpProbe {
    let mut store = ParamStore::new();
    let ids = leaves
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("leaf{i}"), t, false).expect("unique"))
        .collect();
    OpProbe {
        store,
        ids,
        build,
        weights: None,
        seeds,
    }
}

fn ops_cases(seeds: SeedSource) -> Vec<(&'static str, OpProbe, f64)> {
    let mut r = seeds.stream("ops", 0);
    let mut n = |s: &[usize]| normal(s, &mut r);
    let mut cases: Vec<(&'static str, OpProbe, f64)> = Vec::new();
    let conv = |stride: usize, padding: Padding| -> Build {
        Box::new(move |g, _, l, _| g.conv2d(l[0], l[1], Some(l[2]), stride, padding))
    };
    cases.push((
        "conv2d 3x3 same",
        op_probe(
            seeds,
            vec![n(&[2, 3, 6, 6]), n(&[4, 3, 3, 3]), n(&[4])],
            conv(1, Padding::Same),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "conv2d 3x3 stride 2",
        op_probe(
            seeds,
            vec![n(&[2, 2, 7, 7]), n(&[3, 2, 3, 3]), n(&[3])],
            conv(2, Padding::Same),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "conv2d 3x3 valid",
        op_probe(
            seeds,
            vec![n(&[1, 2, 6, 5]), n(&[2, 2, 3, 3]), n(&[2])],
            conv(1, Padding::Valid),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "conv2d 2x2 same",
        op_probe(
            seeds,
            vec![n(&[2, 3, 5, 6]), n(&[2, 3, 2, 2]), n(&[2])],
            conv(1, Padding::Same),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "conv2d 1x1",
        op_probe(
            seeds,
            vec![n(&[2, 4, 4, 4]), n(&[3, 4, 1, 1]), n(&[3])],
            conv(1, Padding::Same),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "conv2d 1x1 stride 2",
        op_probe(
            seeds,
            vec![n(&[2, 4, 6, 6]), n(&[3, 4, 1, 1]), n(&[3])],
            conv(2, Padding::Same),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "maxpool2",
        op_probe(
            seeds,
            vec![n(&[2, 4, 8, 8])],
            Box::new(|g, _, l, _| g.maxpool2(l[0])),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "maxpool2 odd extent",
        op_probe(
            seeds,
            vec![n(&[1, 2, 5, 7])],
            Box::new(|g, _, l, _| g.maxpool2(l[0])),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "upsample2",
        op_probe(
            seeds,
            vec![n(&[2, 4, 4, 4])],
            Box::new(|g, _, l, _| g.upsample2(l[0])),
        ),
        OP_TOLERANCE,
    ));
    let bn = |mode: Mode| -> Build {
        Box::new(move |g, store, l, _| {
            let pos = store.bn_states().position(|s| s.name == "bn");
            let id = match pos {
                Some(i) => crate::params::BnId(i),
                None => store.add_bn("bn", 3)?,
            };
            if mode == Mode::Eval && store.bn(id).updates == 0 {
                let st = store.bn_mut(id);
                st.running_mean = Tensor::new(vec![3], vec![0.3, -0.2, 0.1])?;
                st.running_var = Tensor::new(vec![3], vec![0.8, 1.7, 0.5])?;
                st.updates = 1;
            }
            g.batchnorm(l[0], l[1], l[2], store, id, mode, BnConfig::default())
        })
    };
    cases.push((
        "batchnorm train",
        op_probe(
            seeds,
            vec![n(&[2, 3, 4, 4]), n(&[3]), n(&[3])],
            bn(Mode::Train),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "batchnorm eval",
        op_probe(
            seeds,
            vec![n(&[2, 3, 4, 4]), n(&[3]), n(&[3])],
            bn(Mode::Eval),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "relu",
        op_probe(
            seeds,
            vec![n(&[2, 4, 8, 8])],
            Box::new(|g, _, l, _| Ok(g.relu(l[0]))),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "sigmoid",
        op_probe(
            seeds,
            vec![n(&[2, 4, 8, 8])],
            Box::new(|g, _, l, _| Ok(g.sigmoid(l[0]))),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "dropout",
        op_probe(
            seeds,
            vec![n(&[2, 4, 8, 8])],
            Box::new(|g, _, l, rng| g.dropout(l[0], 0.3, Mode::Train, rng)),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "concat",
        op_probe(
            seeds,
            vec![n(&[2, 3, 4, 4]), n(&[2, 1, 4, 4])],
            Box::new(|g, _, l, _| g.concat_channels(l[0], l[1])),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "add",
        op_probe(
            seeds,
            vec![n(&[2, 4, 8, 8]), n(&[2, 4, 8, 8])],
            Box::new(|g, _, l, _| g.add(l[0], l[1])),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "sum",
        op_probe(
            seeds,
            vec![n(&[2, 4, 8, 8])],
            Box::new(|g, _, l, _| Ok(g.sum(l[0]))),
        ),
        OP_TOLERANCE,
    ));
    cases.push((
        "mean",
        op_probe(
            seeds,
            vec![n(&[2, 4, 8, 8])],
            Box::new(|g, _, l, _| Ok(g.mean(l[0]))),
        ),
        OP_TOLERANCE,
    ));

    let mut mr = seeds.stream("mask", 0);
    let labels: Vec<u8> = (0..2 * 8 * 8)
        .map(|_| match mr.random_range(0..10) {
            0 => VOID,
            1..=4 => 1,
            _ => 0,
        })
        .collect();
    let mask = Mask::new(vec![2, 1, 8, 8], labels).expect("mask");
    for (name, s) in [
        ("dice loss", TRAIN_SMOOTHING),
        ("dice loss unsmoothed", 0.0),
    ] {
        let m = mask.clone();
        let probs = Tensor::from_fn(&[2, 1, 8, 8], |_| mr.random_range(0.05..0.95)).expect("shape");
        cases.push((
            name,
            op_probe(
                seeds,
                vec![probs],
                Box::new(move |g, _, l, _| g.dice_loss(l[0], &m, s)),
            ),
            LOSS_TOLERANCE,
        ));
    }
    let m = mask.clone();
    cases.push((
        "sigmoid + dice loss",
        op_probe(
            seeds,
            vec![n(&[2, 1, 8, 8])],
            Box::new(move |g, _, l, _| {
                let p = g.sigmoid(l[0]);
                g.dice_loss(p, &m, TRAIN_SMOOTHING)
            }),
        ),
        LOSS_TOLERANCE,
    ));
    cases
}

struct BlockProbe {
    store: ParamStore<f64>,
    block: ResidualBlock,
    x: ParamId,
    weights: Tensor<f64>,
    seeds: SeedSource,
}

impl Probe for BlockProbe {
    fn store(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    fn objective(&mut self, g: &mut Graph<f64>) -> Result<NodeId> {
        let x = g.param(&self.store, self.x);
        let mut rng = self.seeds.stream("dropout", 0);
        let y = self.block.forward(
            g,
            &mut self.store,
            x,
            Mode::Train,
            BnConfig::default(),
            &mut rng,
        )?;
        g.weighted_sum(y, self.weights.clone())
    }
}

fn block_cases(seeds: SeedSource) -> Result<Vec<(String, BlockProbe)>> {
    use BlockVariant::*;
    use Resample::*;
    let configs = [
        (Simple, 4, 4, None, 0.0),
        (Simple, 4, 4, Down, 0.0),
        (Simple, 8, 4, Up, 0.0),
        (Bottleneck, 4, 8, None, 0.0),
        (Bottleneck, 4, 8, Down, 0.0),
        (Bottleneck, 8, 4, Up, 0.0),
        (Bottleneck, 8, 8, None, 0.25),
    ];
    let mut out = Vec::new();
    for (i, &(variant, cin, cout, resample, dropout)) in configs.iter().enumerate() {
        let cfg = ResidualBlockCfg {
            variant,
            in_width: cin,
            out_width: cout,
            resample,
            dropout,
        };
        let s = seeds.derive("block", i as u64);
        let mut store = ParamStore::new();
        let mut r = s.stream("data", 0);
        let side = 8;
        let x = store.add("x", normal(&[2, cin, side, side], &mut r), false)?;
        let block = residual_block(&mut store, s, "block", cfg)?;
        let out_side = match resample {
            Down => side / 2,
            Up => side * 2,
            None => side,
        };
        let weights = normal(&[2, cout, out_side, out_side], &mut r);
        let name = format!(
            "{} block {cin}->{cout} {}{}",
            if variant == Simple {
                "simple"
            } else {
                "bottleneck"
            },
            match resample {
                None => "same",
                Down => "down",
                Up => "up",
            },
            if dropout > 0.0 { " dropout" } else { "" }
        );
        out.push((
            name,
            BlockProbe {
                store,
                block,
                x,
                weights,
                seeds: s,
            },
        ));
    }
    Ok(out)
}

struct PipelineProbe {
    model: ModelGraph<f64>,
    x: Tensor<f64>,
    mask: Mask,
}

impl Probe for PipelineProbe {
    fn store(&mut self) -> &mut ParamStore<f64> {
        &mut self.model.params
    }

    fn objective(&mut self, g: &mut Graph<f64>) -> Result<NodeId> {
        let x = g.input(self.x.clone());
        let mut rng = SeedSource::new(0).stream("dropout", 0);
        let y = self.model.forward(g, x, Mode::Train, &mut rng)?;
        g.dice_loss(y, &self.mask, TRAIN_SMOOTHING)
    }
}

/// Pipeline at 1/8 width on a pair of 32×32 images with a disk mask.
fn pipeline_probe(seeds: SeedSource) -> Result<PipelineProbe> {
    const N: usize = 32;
    let model = ModelGraph::pipeline(ArchConfig::with_scale(0.125), seeds.seed())?;
    let mut r = seeds.stream("pipeline-data", 0);
    let mut labels = vec![0u8; 2 * N * N];
    for b in 0..2 {
        let (cy, cx) = (r.random_range(10.0..22.0), r.random_range(10.0..22.0));
        for y in 0..N {
            for x in 0..N {
                let d2: f64 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                labels[(b * N + y) * N + x] = u8::from(d2 < 49.0);
            }
        }
    }
    let x = Tensor::from_fn(&[2, 1, N, N], |i| {
        let n: f64 = StandardNormal.sample(&mut r);
        f64::from(labels[i]) * 2.0 + 0.5 * n
    })?;
    Ok(PipelineProbe {
        model,
        x,
        mask: Mask::new(vec![2, 1, N, N], labels)?,
    })
}

/// Runs one scope of the suite. `fault` corrupts the adjoint of one op kind
/// in every graph, which must make the affected checks fail.
pub fn run(scope: Scope, seed: u64, fault: Option<OpKind>) -> Result<GradReport> {
    let seeds = SeedSource::new(seed);
    let mut report = GradReport::default();
    match scope {
        Scope::Ops => {
            for (name, mut p, tol) in ops_cases(seeds) {
                report.results.push(check(name, &mut p, tol, fault, None)?);
            }
        }
        Scope::Blocks => {
            for (name, mut p) in block_cases(seeds)? {
                report
                    .results
                    .push(check(&name, &mut p, OP_TOLERANCE, fault, None)?);
            }
        }
        Scope::Pipeline => {
            let mut p = pipeline_probe(seeds)?;
            let mut rng = seeds.stream("sample", 0);
            let sample = Some((PIPELINE_SAMPLES, &mut rng));
            report.results.push(check(
                "pipeline (sampled parameters)",
                &mut p,
                PIPELINE_TOLERANCE,
                fault,
                sample,
            )?);
        }
    }
    Ok(report)
}
