//! Integer label maps aligned with image tensors.

use crate::error::{Error, Result};
use crate::tensor::{check_shape, Element, Tensor};

pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 1;
/// Pixels carrying this label are excluded from losses and metrics.
pub const VOID: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, labels: Vec<u8>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != labels.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("mask has {} labels", labels.len()),
            });
        }
        Ok(Self { shape, labels })
    }

    pub fn filled(shape: &[usize], label: u8) -> Result<Self> {
        Self::new(shape.to_vec(), vec![label; shape.iter().product()])
    }

    /// Reads labels stored as whole-number floats.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let labels = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let f = v.to_f64().unwrap_or(f64::NAN);
                if f.fract() == 0.0 && (0.0..=255.0).contains(&f) {
                    Ok(f as u8)
                } else {
                    Err(Error::invalid(format!(
                        "mask value {f} at {i} is not a label"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(t.shape().to_vec(), labels)
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.labels
                .iter()
                .map(|&l| T::from_u8(l).expect("label"))
                .collect(),
        )
        .expect("mask shape is valid")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.labels.len() {
            return Err(Error::ShapeMismatch {
                op: "mask reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn non_void(&self) -> usize {
        self.labels.len() - self.count(VOID)
    }

    /// Rejects labels outside `allowed` (void is always allowed).
    pub fn validate(&self, allowed: &[u8]) -> Result<()> {
        match self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l != VOID && !allowed.contains(&l))
        {
            Some((index, &l)) => Err(Error::UnknownLabel {
                label: u32::from(l),
                index,
            }),
            None => Ok(()),
        }
    }
}
