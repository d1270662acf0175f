//! Dense row-major tensors.
//!
//! The layout convention for images and feature maps is batch × channel ×
//! height × width. Broadcasting is limited to scalars and per-channel
//! `[1, C, 1, 1]` operands.

mod element;
pub mod init;
pub mod io;

pub use element::{gemm, DType, Element, MatRef};
pub use init::{init_weights, InitScheme};
pub use io::{read_sgt1, write_sgt1, AnyTensor};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// What happens on `x / 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DivPolicy {
    #[default]
    Strict,
    Permissive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Right-hand side of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<'a, T> From<&'a Tensor<T>> for Operand<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        Operand::Tensor(t)
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_ORDER {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("order must be between 1 and {MAX_ORDER}"),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero extent".into(),
        });
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expects {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    /// Same shape as `self`, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// `[B, C, H, W]` extents, or an error for other orders.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a 4-d batch×channel×height×width tensor".into(),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        flat_index(&self.shape, index)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cs, hs, ws] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((b * cs + c) * hs + h) * ws + w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Strict-mode elementwise op; see [`Tensor::elementwise_with`].
    pub fn elementwise<'a>(&self, op: BinaryOp, rhs: impl Into<Operand<'a, T>>) -> Result<Self>
    where
        T: 'a,
    {
        self.elementwise_with(op, rhs, DivPolicy::Strict)
    }

    /// Applies `op` pointwise. `rhs` may be a scalar, a tensor of the same
    /// shape, or a `[1, C, 1, 1]` per-channel tensor against a 4-d `self`.
    pub fn elementwise_with<'a>(
        &self,
        op: BinaryOp,
        rhs: impl Into<Operand<'a, T>>,
        policy: DivPolicy,
    ) -> Result<Self>
    where
        T: 'a,
    {
        let apply = |a: T, b: T, index: usize| -> Result<T> {
            Ok(match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Max => a.max(b),
                BinaryOp::Div => {
                    if b == T::zero() && policy == DivPolicy::Strict {
                        return Err(Error::DivisionByZero { index });
                    }
                    a / b
                }
            })
        };
        let mut out = Vec::with_capacity(self.data.len());
        match rhs.into() {
            Operand::Scalar(s) => {
                for (i, &a) in self.data.iter().enumerate() {
                    out.push(apply(a, s, i)?);
                }
            }
            Operand::Tensor(t) if t.shape == self.shape => {
                for (i, (&a, &b)) in self.data.iter().zip(&t.data).enumerate() {
                    out.push(apply(a, b, i)?);
                }
            }
            Operand::Tensor(t) if is_channel_broadcast(&self.shape, &t.shape) => {
                let [_, c, h, w] = self.dims4()?;
                let plane = h * w;
                for (i, &a) in self.data.iter().enumerate() {
                    out.push(apply(a, t.data[(i / plane) % c], i)?);
                }
            }
            Operand::Tensor(t) => {
                return Err(Error::ShapeMismatch {
                    op: "elementwise",
                    left: self.shape.clone(),
                    right: t.shape.clone(),
                })
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn unary(&self, op: UnaryOp) -> Self {
        self.map(|v| match op {
            UnaryOp::Exp => v.exp(),
            UnaryOp::Log => v.ln(),
            UnaryOp::Neg => -v,
        })
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Self> {
        self.elementwise(BinaryOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Self> {
        self.elementwise(BinaryOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Self> {
        self.elementwise(BinaryOp::Mul, rhs)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += rhs` for equal shapes.
    pub fn add_assign(&mut self, rhs: &Tensor<T>) -> Result<()> {
        if rhs.shape != self.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Reduces over `axes`. Reduced extents are kept as 1 with `keep_dims`,
    /// otherwise removed (a full reduction yields shape `[1]`).
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keep_dims: bool) -> Result<Self> {
        let nd = self.ndim();
        let mut reduced = [false; MAX_ORDER];
        for &ax in axes {
            if ax >= nd {
                return Err(Error::AxisOutOfRange { axis: ax, ndim: nd });
            }
            if reduced[ax] {
                return Err(Error::invalid(format!("axis {ax} listed twice")));
            }
            reduced[ax] = true;
        }
        let kept_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if reduced[i] { 1 } else { d })
            .collect();
        let out_len: usize = kept_shape.iter().product();
        let init = match op {
            ReduceOp::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut acc = vec![init; out_len];
        let out_strides = strides(&kept_shape);
        let mut idx = vec![0usize; nd];
        for &v in &self.data {
            let mut o = 0;
            for d in 0..nd {
                if !reduced[d] {
                    o += idx[d] * out_strides[d];
                }
            }
            acc[o] = match op {
                ReduceOp::Max => acc[o].max(v),
                _ => acc[o] + v,
            };
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let count = T::from_usize(self.numel() / out_len).expect("count");
            for a in &mut acc {
                *a = *a / count;
            }
        }
        let shape = if keep_dims {
            kept_shape
        } else {
            let s: Vec<usize> = (0..nd)
                .filter(|&d| !reduced[d])
                .map(|d| self.shape[d])
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        Ok(Self { shape, data: acc })
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::from_usize(self.numel()).expect("count")
    }

    pub fn max_all(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| a.max(b))
    }
}

fn is_channel_broadcast(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs.len() == 4
        && rhs.len() == 4
        && rhs[0] == 1
        && rhs[1] == lhs[1]
        && rhs[2] == 1
        && rhs[3] == 1
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Row-major linearization of a multi-index.
pub fn flat_index(shape: &[usize], index: &[usize]) -> Result<usize> {
    if index.len() != shape.len() || index.iter().zip(shape).any(|(&i, &d)| i >= d) {
        return Err(Error::invalid(format!(
            "index {index:?} out of bounds for shape {shape:?}"
        )));
    }
    Ok(index.iter().zip(strides(shape)).map(|(&i, s)| i * s).sum())
}

/// Inverse of [`flat_index`].
pub fn unravel_index(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        out[d] = flat % shape[d];
        flat /= shape[d];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn constant_fills() {
        let z = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert_eq!(z.numel(), 6);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(Tensor::<f64>::full(&[1], 7.5).unwrap().data(), &[7.5]);
        assert_eq!(Tensor::<f64>::ones(&[1, 1, 2, 2]).unwrap().sum_all(), 4.0);
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let c = Tensor::<f64>::full(&[2, 2], 3.0).unwrap();
        let z = c.elementwise(BinaryOp::Mul, Operand::Scalar(0.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(t(&[1], &[0.0]).unary(UnaryOp::Exp).data(), &[1.0]);
        assert!(a.add(&t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn division_policy() {
        let a = t(&[2], &[1.0, -1.0]);
        let z = t(&[2], &[2.0, 0.0]);
        assert!(matches!(
            a.elementwise(BinaryOp::Div, &z),
            Err(Error::DivisionByZero { index: 1 })
        ));
        let p = a
            .elementwise_with(BinaryOp::Div, &z, DivPolicy::Permissive)
            .unwrap();
        assert_eq!(p.data()[0], 0.5);
        assert_eq!(p.data()[1], f64::NEG_INFINITY);
    }

    #[test]
    fn reductions() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            a.reduce(ReduceOp::Sum, &[0, 1], false).unwrap().data(),
            &[10.0]
        );
        assert_eq!(
            t(&[2], &[2.0, 4.0])
                .reduce(ReduceOp::Mean, &[0], false)
                .unwrap()
                .data(),
            &[3.0]
        );
        let m = t(&[2, 2], &[1.0, 5.0, 3.0, 2.0])
            .reduce(ReduceOp::Max, &[1], false)
            .unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[5.0, 3.0]);
        let k = a.reduce(ReduceOp::Sum, &[0], true).unwrap();
        assert_eq!(k.shape(), &[1, 2]);
        assert_eq!(k.data(), &[4.0, 6.0]);
        assert_eq!(a.reduce(ReduceOp::Sum, &[], false).unwrap(), a);
        assert!(matches!(
            a.reduce(ReduceOp::Sum, &[2], false),
            Err(Error::AxisOutOfRange { .. })
        ));
        assert!(a.reduce(ReduceOp::Sum, &[1, 1], false).is_err());
    }

    fn reference_bias_add(x: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
        let [b, c, h, w] = x.dims4().unwrap();
        let mut out = Vec::new();
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out.push(x.at4(bi, ci, hi, wi) + bias.data()[ci]);
                    }
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn linearization_round_trip(shape in prop::collection::vec(1usize..6, 1..=4), seed in 0usize..10_000) {
            let n: usize = shape.iter().product();
            let flat = seed % n;
            let idx = unravel_index(&shape, flat);
            prop_assert_eq!(flat_index(&shape, &idx).unwrap(), flat);
        }

        #[test]
        fn channel_broadcast_matches_loops(b in 1usize..=2, c in 1usize..=4, h in 1usize..=8, w in 1usize..=8,
                                           vals in prop::collection::vec(-10.0f64..10.0, 2 * 4 * 8 * 8 + 4)) {
            let n = b * c * h * w;
            let x = Tensor::new(vec![b, c, h, w], vals[..n].to_vec()).unwrap();
            let bias = Tensor::new(vec![1, c, 1, 1], vals[n..n + c].to_vec()).unwrap();
            let got = x.add(&bias).unwrap();
            prop_assert_eq!(got.data(), &reference_bias_add(&x, &bias)[..]);
        }

        #[test]
        fn mean_is_sum_over_count(vals in prop::collection::vec(-100.0f32..100.0, 1..200)) {
            let x = Tensor::new(vec![vals.len()], vals).unwrap();
            let mean = x.reduce(ReduceOp::Mean, &[0], false).unwrap().data()[0];
            let via_sum = x.sum_all() / x.numel() as f32;
            let scale = x.data().iter().map(|v| v.abs()).sum::<f32>() / x.numel() as f32;
            prop_assert!((mean - via_sum).abs() <= 1e-6 * scale.max(1.0));
        }
    }
}
