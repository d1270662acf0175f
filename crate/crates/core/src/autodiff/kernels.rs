//! Pooling, repeat-upsampling and batch-norm kernels on `[B, C, H, W]` data.

use crate::error::{Error, Result};
use crate::params::BnState;
use crate::tensor::{Element, Tensor};

/// 2×2 / stride-2 max pooling. Odd extents are padded with −∞ (the output
/// extent is rounded up). Returns the output and, per output element, the
/// flat input index of the first row-major maximum of its window.
pub fn maxpool2_forward<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [b, c, h, w] = x.dims4()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = None;
                for dh in 0..2 {
                    let ih = 2 * oh + dh;
                    if ih >= h {
                        continue;
                    }
                    for dw in 0..2 {
                        let iw = 2 * ow + dw;
                        if iw >= w {
                            continue;
                        }
                        let idx = base + ih * w + iw;
                        if best_idx.is_none() || xd[idx] > best {
                            best = xd[idx];
                            best_idx = Some(idx);
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx.expect("non-empty window") as u32);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, ho, wo], out)?, argmax))
}

pub fn maxpool2_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx[i as usize] = dx[i as usize] + g;
    }
    Tensor::new(input_shape.to_vec(), dx).expect("pool input shape")
}

/// Nearest-neighbour ×2 upsampling: every pixel becomes a 2×2 block.
pub fn upsample2_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oh in 0..ho {
            let srow = &src[(oh / 2) * w..(oh / 2 + 1) * w];
            for (ow, d) in dst[oh * wo..(oh + 1) * wo].iter_mut().enumerate() {
                *d = srow[ow / 2];
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn upsample2_backward<T: Element>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, ho, wo] = dy.dims4()?;
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let src = &dy.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let d = &mut dst[(oh / 2) * w + ow / 2];
                *d = *d + src[oh * wo + ow];
            }
        }
    }
    Tensor::new(vec![b, c, h, w], dx)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub epsilon: f64,
    /// Weight of the new batch statistic in the running average.
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

pub struct BnForward<T> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalization. In training mode the batch statistics (biased
/// variance over batch and spatial axes) are used and folded into `state`;
/// otherwise the running statistics are used.
pub fn batchnorm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BnState<T>,
    train: bool,
    cfg: BnConfig,
) -> Result<BnForward<T>> {
    let [b, c, h, w] = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let plane = h * w;
    let n = b * plane;
    let eps = T::from_f64_lossy(cfg.epsilon);
    let (mean, var) = if train {
        if n < 2 {
            return Err(Error::invalid(format!(
                "batch norm `{}` needs at least 2 values per channel in training",
                state.name
            )));
        }
        let nf = T::from_usize(n).expect("count");
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s = s + x.data()[(bi * c + ci) * plane..][..plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            let m = s / nf;
            let mut v = T::zero();
            for bi in 0..b {
                for &xv in &x.data()[(bi * c + ci) * plane..][..plane] {
                    v = v + (xv - m) * (xv - m);
                }
            }
            mean[ci] = m;
            var[ci] = v / nf;
        }
        let mom = T::from_f64_lossy(cfg.momentum);
        let keep = T::one() - mom;
        for ci in 0..c {
            let rm = &mut state.running_mean.data_mut()[ci];
            *rm = keep * *rm + mom * mean[ci];
            let rv = &mut state.running_var.data_mut()[ci];
            *rv = keep * *rv + mom * var[ci];
        }
        state.updates += 1;
        (mean, var)
    } else {
        if state.updates == 0 {
            return Err(Error::MissingRunningStats {
                name: state.name.clone(),
            });
        }
        (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        )
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    for (i, &xv) in x.data().iter().enumerate() {
        let ci = (i / plane) % c;
        let xh = (xv - mean[ci]) * inv_std[ci];
        xhat[i] = xh;
        out[i] = gamma.data()[ci] * xh + beta.data()[ci];
    }
    Ok(BnForward {
        out: Tensor::new(x.shape().to_vec(), out)?,
        xhat,
        inv_std,
    })
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

/// Batch-norm adjoint. In training mode the gradient also flows through the
/// batch mean and variance.
pub fn batchnorm_backward<T: Element>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
) -> Result<BnGrads<T>> {
    let [b, c, h, w] = dy.dims4()?;
    let plane = h * w;
    let nf = T::from_usize(b * plane).expect("count");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, &g) in dy.data().iter().enumerate() {
        let ci = (i / plane) % c;
        dgamma[ci] = dgamma[ci] + g * xhat[i];
        dbeta[ci] = dbeta[ci] + g;
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for (i, &g) in dy.data().iter().enumerate() {
        let ci = (i / plane) % c;
        let scale = gamma.data()[ci] * inv_std[ci];
        dx[i] = if train {
            scale * (g - dbeta[ci] / nf - xhat[i] * dgamma[ci] / nf)
        } else {
            scale * g
        };
    }
    Ok(BnGrads {
        dx: Tensor::new(vec![b, c, h, w], dx)?,
        dgamma: Tensor::new(vec![c], dgamma)?,
        dbeta: Tensor::new(vec![c], dbeta)?,
    })
}
