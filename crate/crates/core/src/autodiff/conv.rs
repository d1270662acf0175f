//! 2-d convolution (cross-correlation) kernels.
//!
//! The fast path lowers each image to a column matrix (im2col) and calls
//! GEMM; [`conv2d_reference`] is the direct seven-loop definition and is kept
//! as the semantic oracle for the fast path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Total padding `k - 1` per axis; the odd pixel goes to the bottom/right.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(x: [usize; 4], weight: [usize; 4], stride: usize, padding: Padding) -> Result<Self> {
        let [batch, cin, h, w] = x;
        let [cout, wcin, kh, kw] = weight;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.to_vec(),
                right: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (pt, pb, pl, pr) = match padding {
            Padding::Valid => (0, 0, 0, 0),
            Padding::Same => (
                (kh - 1) / 2,
                kh - 1 - (kh - 1) / 2,
                (kw - 1) / 2,
                kw - 1 - (kw - 1) / 2,
            ),
        };
        let (hp, wp) = (h + pt + pb, w + pl + pr);
        if kh > hp || kw > wp {
            return Err(Error::invalid(format!(
                "kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            )));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad_top: pt,
            pad_left: pl,
            h_out: (hp - kh) / stride + 1,
            w_out: (wp - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.h_out, self.w_out]
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, unpadded: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Input row for output row `oh` and kernel row `ki`, if inside the image.
    #[inline]
    fn src_row(&self, oh: usize, ki: usize) -> Option<usize> {
        (oh * self.stride + ki)
            .checked_sub(self.pad_top)
            .filter(|&r| r < self.h)
    }

    #[inline]
    fn src_col(&self, ow: usize, kj: usize) -> Option<usize> {
        (ow * self.stride + kj)
            .checked_sub(self.pad_left)
            .filter(|&c| c < self.w)
    }
}

fn im2col<T: Element>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                for oh in 0..g.h_out {
                    let dst = &mut row[oh * g.w_out..(oh + 1) * g.w_out];
                    match g.src_row(oh, ki) {
                        None => dst.iter_mut().for_each(|v| *v = T::zero()),
                        Some(ih) => {
                            let src = &plane[ih * g.w..(ih + 1) * g.w];
                            for (ow, d) in dst.iter_mut().enumerate() {
                                *d = g.src_col(ow, kj).map_or(T::zero(), |iw| src[iw]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                for oh in 0..g.h_out {
                    let Some(ih) = g.src_row(oh, ki) else {
                        continue;
                    };
                    for ow in 0..g.w_out {
                        if let Some(iw) = g.src_col(ow, kj) {
                            plane[ih * g.w + iw] = plane[ih * g.w + iw] + row[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (k, hw) = (g.k(), g.hw_out());
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * hw;
    let mut out = vec![T::zero(); g.batch * out_plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * hw]
    };
    let wmat = MatRef::new(weight.data(), g.cout, k);
    for b in 0..g.batch {
        let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
        let ob = &mut out[b * out_plane..(b + 1) * out_plane];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_exact_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data()[co]);
            }
        }
        let colmat = if g.is_pointwise() {
            MatRef::new(xb, k, hw)
        } else {
            im2col(g, xb, &mut cols);
            MatRef::new(&cols[..], k, hw)
        };
        gemm(wmat, colmat, ob, bias.is_some());
    }
    Tensor::new(g.output_shape().to_vec(), out).expect("conv output shape")
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    if dy.shape() != g.output_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            left: dy.shape().to_vec(),
            right: g.output_shape().to_vec(),
        });
    }
    let (k, hw) = (g.k(), g.hw_out());
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * hw;
    let mut dx = vec![T::zero(); g.batch * in_plane];
    let mut dw = vec![T::zero(); g.cout * k];
    let mut db = vec![T::zero(); g.cout];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * hw]
    };
    let mut dcols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * hw]
    };
    let wmat = MatRef::new(weight.data(), g.cout, k);
    for b in 0..g.batch {
        let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
        let dyb = &dy.data()[b * out_plane..(b + 1) * out_plane];
        for (co, chunk) in dyb.chunks_exact(hw).enumerate() {
            db[co] = db[co] + chunk.iter().copied().sum::<T>();
        }
        let dymat = MatRef::new(dyb, g.cout, hw);
        let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
        if g.is_pointwise() {
            gemm(dymat, MatRef::new(xb, k, hw).t(), &mut dw, true);
            gemm(wmat.t(), dymat, dxb, false);
        } else {
            im2col(g, xb, &mut cols);
            gemm(dymat, MatRef::new(&cols[..], k, hw).t(), &mut dw, true);
            gemm(wmat.t(), dymat, &mut dcols, false);
            col2im_add(g, &dcols, dxb);
        }
    }
    Ok(ConvGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dweight: Tensor::new(weight.shape().to_vec(), dw)?,
        dbias: Tensor::new(vec![g.cout], db)?,
    })
}

/// Direct-loop convolution, the reference semantics for [`conv2d_forward`].
pub fn conv2d_reference<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.dims4()?, weight.dims4()?, stride, padding)?;
    let mut out = Tensor::zeros(&g.output_shape())?;
    let od = out.data_mut();
    let mut idx = 0;
    for b in 0..g.batch {
        for co in 0..g.cout {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let mut acc = bias.map_or(T::zero(), |bb| bb.data()[co]);
                    for ci in 0..g.cin {
                        for ki in 0..g.kh {
                            let Some(ih) = g.src_row(oh, ki) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                let Some(iw) = g.src_col(ow, kj) else {
                                    continue;
                                };
                                acc = acc + x.at4(b, ci, ih, iw) * weight.at4(co, ci, ki, kj);
                            }
                        }
                    }
                    od[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}
