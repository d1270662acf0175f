//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value and whatever forward context its adjoint needs. Nodes are
//! appended in evaluation order, so reverse creation order is a valid reverse
//! topological order. [`Graph::backward`] walks it once, accumulating
//! gradients at fan-out points, and adds parameter gradients into the
//! [`ParamStore`].

pub mod conv;
pub mod kernels;

use rand::Rng as _;

pub use conv::{conv2d_reference, ConvGeometry, Padding};
pub use kernels::BnConfig;

use crate::error::{Error, Result};
use crate::loss;
use crate::mask::Mask;
use crate::params::{BnId, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Operation tag of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    MaxPool2,
    Upsample2,
    BatchNorm,
    Relu,
    Sigmoid,
    Dropout,
    Concat,
    Add,
    Sum,
    Mean,
    WeightedSum,
    DiceLoss,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d(ConvGeometry),
    MaxPool2 {
        argmax: Vec<u32>,
    },
    Upsample2,
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu,
    Sigmoid,
    /// Per-element multipliers (0 or 1/(1−rate)); empty means identity.
    Dropout {
        scale: Vec<T>,
    },
    Concat {
        split: usize,
    },
    Add,
    Sum,
    Mean,
    WeightedSum {
        weights: Tensor<T>,
    },
    /// dL/dpred, computed in the forward pass.
    DiceLoss {
        grad: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2 => OpKind::Upsample2,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add => OpKind::Add,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::DiceLoss { .. } => OpKind::DiceLoss,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test fixture: makes the adjoint of every `kind` node wrong by a factor
    /// of 1.5 so gradient checks can be shown to fail.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to a leaf node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, Vec::new(), value)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.push(Op::Param(id), Vec::new(), store.get(id).value.clone())
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let geom = ConvGeometry::new(xv.dims4()?, wv.dims4()?, stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: self.value(b).shape().to_vec(),
                    right: vec![geom.cout],
                });
            }
        }
        let out = conv::conv2d_forward(&geom, xv, wv, bias.map(|b| self.value(b)));
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d(geom), inputs, out))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(x))?;
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x], out))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::upsample2_forward(self.value(x))?;
        Ok(self.push(Op::Upsample2, vec![x], out))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        store: &mut ParamStore<T>,
        bn: BnId,
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<NodeId> {
        let train = mode == Mode::Train;
        let f = kernels::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            store.bn_mut(bn),
            train,
            cfg,
        )?;
        Ok(self.push(
            Op::BatchNorm {
                xhat: f.xhat,
                inv_std: f.inv_std,
                train,
            },
            vec![x, gamma, beta],
            f.out,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(Op::Sigmoid, vec![x], out)
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1−rate)`. Identity in eval mode.
    pub fn dropout(&mut self, x: NodeId, rate: f64, mode: Mode, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            let out = self.value(x).clone();
            return Ok(self.push(Op::Dropout { scale: Vec::new() }, vec![x], out));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let scale: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&scale).map(|(&a, &s)| a * s).collect(),
        )?;
        Ok(self.push(Op::Dropout { scale }, vec![x], out))
    }

    /// Concatenates along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            out.extend_from_slice(&self.value(a).data()[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.push(Op::Concat { split: ca }, vec![a, b], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape() != bv.shape() {
                return Err(Error::ShapeMismatch {
                    op: "add",
                    left: av.shape().to_vec(),
                    right: bv.shape().to_vec(),
                });
            }
            av.add(bv)?
        };
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum_all());
        self.push(Op::Sum, vec![x], out)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).mean_all());
        self.push(Op::Mean, vec![x], out)
    }

    /// `Σ x ⊙ weights` for a constant `weights` tensor of the same shape.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        let s = self.value(x).mul(&weights)?.sum_all();
        Ok(self.push(Op::WeightedSum { weights }, vec![x], Tensor::scalar(s)))
    }

    /// Batch-level Dice loss of a probability map against a label mask.
    pub fn dice_loss(&mut self, pred: NodeId, mask: &Mask, smoothing: T) -> Result<NodeId> {
        let (l, grad) = loss::dice_loss(self.value(pred), mask, smoothing)?;
        Ok(self.push(Op::DiceLoss { grad }, vec![pred], Tensor::scalar(l)))
    }

    /// Reverse pass from `root`. With `seed = None` the root must be a scalar
    /// and is seeded with 1. Leaf gradients become available through
    /// [`Graph::grad`]; parameter gradients are added (`+=`) into `store`.
    pub fn backward(
        &mut self,
        root: NodeId,
        seed: Option<Tensor<T>>,
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        let seed = match seed {
            Some(s) => {
                if s.shape() != self.value(root).shape() {
                    return Err(Error::ShapeMismatch {
                        op: "backward seed",
                        left: s.shape().to_vec(),
                        right: self.value(root).shape().to_vec(),
                    });
                }
                s
            }
            None => {
                if self.value(root).numel() != 1 {
                    return Err(Error::invalid(
                        "backward without a seed needs a scalar root",
                    ));
                }
                Tensor::ones(self.value(root).shape())?
            }
        };
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let node = &self.nodes[i];
            assert!(
                node.inputs.iter().all(|inp| inp.0 < i),
                "graph is not acyclic"
            );
            match &node.op {
                Op::Input => {
                    self.nodes[i].grad = Some(g);
                    continue;
                }
                Op::Param(pid) => {
                    store.accumulate_grad(*pid, &g)?;
                    self.nodes[i].grad = Some(g);
                    continue;
                }
                _ => {}
            }
            let mut input_grads = self.adjoint(i, &g)?;
            if self.fault == Some(node.op.kind()) {
                if let Some((_, first)) = input_grads.first_mut() {
                    *first = first.scale(T::from_f64_lossy(1.5));
                }
            }
            for (inp, ig) in input_grads {
                match &mut self.nodes[inp.0].grad {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    fn adjoint(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let val = |k: usize| &self.nodes[ins[k].0].value;
        Ok(match &node.op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d(geom) => {
                let grads = conv::conv2d_backward(geom, val(0), val(1), g)?;
                let mut out = vec![(ins[0], grads.dx), (ins[1], grads.dweight)];
                if ins.len() == 3 {
                    out.push((ins[2], grads.dbias));
                }
                out
            }
            Op::MaxPool2 { argmax } => {
                vec![(
                    ins[0],
                    kernels::maxpool2_backward(val(0).shape(), argmax, g),
                )]
            }
            Op::Upsample2 => vec![(ins[0], kernels::upsample2_backward(g)?)],
            Op::BatchNorm {
                xhat,
                inv_std,
                train,
            } => {
                let grads = kernels::batchnorm_backward(g, val(1), xhat, inv_std, *train)?;
                vec![
                    (ins[0], grads.dx),
                    (ins[1], grads.dgamma),
                    (ins[2], grads.dbeta),
                ]
            }
            Op::Relu => {
                let x = val(0);
                let dx = Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                )?;
                vec![(ins[0], dx)]
            }
            Op::Sigmoid => {
                let y = &node.value;
                let dx = Tensor::new(
                    y.shape().to_vec(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                        .collect(),
                )?;
                vec![(ins[0], dx)]
            }
            Op::Dropout { scale } => {
                let dx = if scale.is_empty() {
                    g.clone()
                } else {
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(scale).map(|(&a, &s)| a * s).collect(),
                    )?
                };
                vec![(ins[0], dx)]
            }
            Op::Concat { split } => {
                let [b, c, h, w] = g.dims4()?;
                let plane = h * w;
                let (ca, cb) = (*split, c - split);
                let mut ga = Vec::with_capacity(b * ca * plane);
                let mut gb = Vec::with_capacity(b * cb * plane);
                for bi in 0..b {
                    let chunk = &g.data()[bi * c * plane..(bi + 1) * c * plane];
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                vec![
                    (ins[0], Tensor::new(vec![b, ca, h, w], ga)?),
                    (ins[1], Tensor::new(vec![b, cb, h, w], gb)?),
                ]
            }
            Op::Add => vec![(ins[0], g.clone()), (ins[1], g.clone())],
            Op::Sum => vec![(ins[0], Tensor::full(val(0).shape(), g.data()[0])?)],
            Op::Mean => {
                let n = T::from_usize(val(0).numel()).expect("count");
                vec![(ins[0], Tensor::full(val(0).shape(), g.data()[0] / n)?)]
            }
            Op::WeightedSum { weights } => vec![(ins[0], weights.scale(g.data()[0]))],
            Op::DiceLoss { grad } => vec![(ins[0], grad.scale(g.data()[0]))],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSource;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn derivative_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64).unwrap());
        let s = g.sum(x);
        g.backward(s, None, &mut store()).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 1, 1, 3], vec![-1.0, 0.5, 2.0]).unwrap());
        let f = g.relu(x);
        let h = g.sigmoid(x);
        let y = g.add(f, h).unwrap();
        let s = g.sum(y);
        g.backward(s, None, &mut store()).unwrap();
        let dx = g.grad(x).unwrap().data().to_vec();
        for (k, &xv) in [-1.0f64, 0.5, 2.0].iter().enumerate() {
            let sig = 1.0 / (1.0 + (-xv).exp());
            let want = if xv > 0.0 { 1.0 } else { 0.0 } + sig * (1.0 - sig);
            assert!((dx[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_tie_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        g.backward(y, Some(Tensor::ones(&[3]).unwrap()), &mut store())
            .unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_midpoint_and_dropout_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1]).unwrap());
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
        let mut rng = SeedSource::new(0).stream("d", 0);
        let z = g.input(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64).unwrap());
        for mode in [Mode::Train, Mode::Eval] {
            let d = g.dropout(z, 0.0, mode, &mut rng).unwrap();
            assert_eq!(g.value(d), g.value(z));
        }
        let d = g.dropout(z, 0.7, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(d), g.value(z));
        assert!(g.dropout(z, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = SeedSource::new(5).stream("d", 0);
        let x = Tensor::<f64>::full(&[1, 1, 10, 10], 2.0).unwrap();
        let mut total = 0.0;
        let trials = 10_000;
        for _ in 0..trials {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let d = g.dropout(xi, 0.3, Mode::Train, &mut rng).unwrap();
            total += g.value(d).mean_all();
        }
        let mean = total / trials as f64;
        assert!((mean - 2.0).abs() < 0.02 * 2.0, "{mean}");
    }

    #[test]
    fn concat_and_add_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[1, 4, 8, 8]).unwrap());
        let b = g.input(Tensor::ones(&[1, 2, 8, 8]).unwrap());
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 6, 8, 8]);
        let bad = g.input(Tensor::ones(&[1, 2, 4, 4]).unwrap());
        assert!(g.concat_channels(a, bad).is_err());
        assert!(g.add(a, b).is_err());
        let z = g.input(Tensor::zeros(&[1, 2, 8, 8]).unwrap());
        let s = g.add(b, z).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn concat_backward_splits() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 1, 2, 2]).unwrap());
        let b = g.input(Tensor::zeros(&[2, 2, 2, 2]).unwrap());
        let c = g.concat_channels(a, b).unwrap();
        let seed = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64).unwrap();
        g.backward(c, Some(seed), &mut store()).unwrap();
        assert_eq!(
            g.grad(a).unwrap().data(),
            &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]
        );
        assert_eq!(g.grad(b).unwrap().shape(), &[2, 2, 2, 2]);
        assert_eq!(g.grad(b).unwrap().data()[..4], [4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn backward_twice_doubles_param_grads() {
        let mut st = ParamStore::<f64>::new();
        let mut rng = SeedSource::new(1).stream("w", 0);
        let w = st
            .add(
                "w",
                crate::tensor::init_weights(
                    crate::tensor::InitScheme::HeNormal,
                    &[2, 1, 3, 3],
                    &mut rng,
                )
                .unwrap(),
                false,
            )
            .unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64).sin()).unwrap());
        let wn = g.param(&st, w);
        let y = g.conv2d(x, wn, None, 1, Padding::Same).unwrap();
        let s = g.sum(y);
        g.backward(s, None, &mut st).unwrap();
        let once = st.get(w).grad.clone();
        g.backward(s, None, &mut st).unwrap();
        let twice = &st.get(w).grad;
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_root_needs_seed() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]).unwrap());
        assert!(g.backward(x, None, &mut store()).is_err());
        assert!(g
            .backward(x, Some(Tensor::zeros(&[3]).unwrap()), &mut store())
            .is_err());
    }
}
