//! Geometric training-time augmentation applied identically to an image and
//! its mask.
//!
//! Every output pixel is mapped back into the source: a random flip, rotation
//! and shear about the image centre, plus an optional smooth displacement
//! field. Images are sampled bilinearly with edge replication, masks by
//! nearest neighbour with out-of-domain pixels set to void. A random crop
//! follows.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, FOREGROUND, VOID};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

const CROP_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    pub enabled: bool,
    pub grid_spacing: usize,
    pub sigma: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            grid_spacing: 64,
            sigma: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Maximum shear coefficient (off-diagonal of the shear matrix).
    pub shear_max: f64,
    /// Maximum rotation in degrees.
    pub rotation_max: f64,
    pub crop_size: Option<usize>,
    /// Re-draw crop origins until the crop holds foreground.
    pub crop_foreground: bool,
    pub warp: WarpConfig,
    /// Probability with which each enabled transform fires.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            shear_max: 0.0,
            rotation_max: 0.0,
            crop_size: None,
            crop_foreground: false,
            warp: WarpConfig::default(),
            probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shear_max >= 0.0 && self.shear_max.is_finite()) {
            return Err(Error::Config(format!(
                "shear_max must be non-negative, got {}",
                self.shear_max
            )));
        }
        if !(0.0..180.0).contains(&self.rotation_max) {
            return Err(Error::Config(format!(
                "rotation_max must lie in [0, 180), got {}",
                self.rotation_max
            )));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "probability must lie in [0, 1], got {}",
                self.probability
            )));
        }
        if self.crop_size == Some(0) {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if self.warp.grid_spacing < 2 || self.warp.sigma.is_nan() || self.warp.sigma < 0.0 {
            return Err(Error::Config(
                "warp needs grid_spacing >= 2 and sigma >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShearAxis {
    X,
    Y,
}

/// Dense backward displacement, `(dy, dx)` per output pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    pub h: usize,
    pub w: usize,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

/// One concrete draw of the random transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotation_deg: f64,
    pub shear: f64,
    pub shear_axis: ShearAxis,
    pub warp: Option<Displacement>,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            rotation_deg: 0.0,
            shear: 0.0,
            shear_axis: ShearAxis::X,
            warp: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_h
            && !self.flip_v
            && self.rotation_deg == 0.0
            && self.shear == 0.0
            && self.warp.is_none()
    }

    /// Source coordinate `(y, x)` of output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, cy: f64, cx: f64, rot: (f64, f64)) -> (f64, f64) {
        let (mut dy, mut dx) = (y as f64 - cy, x as f64 - cx);
        if self.flip_h {
            dx = -dx;
        }
        if self.flip_v {
            dy = -dy;
        }
        let (s, c) = rot;
        (dy, dx) = (c * dy + s * dx, -s * dy + c * dx);
        match self.shear_axis {
            ShearAxis::X => dx += self.shear * dy,
            ShearAxis::Y => dy += self.shear * dx,
        }
        let (mut sy, mut sx) = (dy + cy, dx + cx);
        if let Some(w) = &self.warp {
            sy += w.dy[y * w.w + x];
            sx += w.dx[y * w.w + x];
        }
        (sy, sx)
    }
}

fn fires(p: f64, rng: &mut Rng) -> bool {
    rng.random::<f64>() < p
}

/// Draws a transform for an `h×w` sample.
pub fn sample_transform(
    cfg: &AugmentConfig,
    h: usize,
    w: usize,
    rng: &mut Rng,
) -> Result<Transform> {
    cfg.validate()?;
    let p = cfg.probability;
    let mut t = Transform::identity();
    t.flip_h = cfg.flip_h && fires(p, rng);
    t.flip_v = cfg.flip_v && fires(p, rng);
    if cfg.rotation_max > 0.0 && fires(p, rng) {
        t.rotation_deg = rng.random_range(-cfg.rotation_max..=cfg.rotation_max);
    }
    if cfg.shear_max > 0.0 && fires(p, rng) {
        t.shear = rng.random_range(-cfg.shear_max..=cfg.shear_max);
        t.shear_axis = if rng.random::<bool>() {
            ShearAxis::X
        } else {
            ShearAxis::Y
        };
    }
    if cfg.warp.enabled && fires(p, rng) {
        t.warp = Some(displacement_field(
            h,
            w,
            cfg.warp.grid_spacing,
            cfg.warp.sigma,
            rng,
        )?);
    }
    Ok(t)
}

fn catmull_rom(p: [f64; 4], t: f64) -> f64 {
    let [p0, p1, p2, p3] = p;
    0.5 * (2.0 * p1
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
}

/// Gaussian displacements at coarse grid nodes (every `spacing` pixels, one
/// extra ring outside), interpolated to every pixel with a bicubic
/// Catmull-Rom spline.
pub fn displacement_field(
    h: usize,
    w: usize,
    spacing: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Displacement> {
    if spacing < 2 || sigma.is_nan() || sigma < 0.0 {
        return Err(Error::invalid(
            "warp needs grid_spacing >= 2 and sigma >= 0",
        ));
    }
    let gh = (h - 1) / spacing + 4;
    let gw = (w - 1) / spacing + 4;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut nodes = [vec![0.0; gh * gw], vec![0.0; gh * gw]];
    for grid in &mut nodes {
        for v in grid.iter_mut() {
            *v = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
        }
    }
    let s = spacing as f64;
    let mut out = [vec![0.0; h * w], vec![0.0; h * w]];
    for (grid, dense) in nodes.iter().zip(&mut out) {
        for y in 0..h {
            let ty = y as f64 / s;
            let iy = ty.floor() as usize;
            let fy = ty - iy as f64;
            for x in 0..w {
                let tx = x as f64 / s;
                let ix = tx.floor() as usize;
                let fx = tx - ix as f64;
                let mut col = [0.0; 4];
                for (k, c) in col.iter_mut().enumerate() {
                    let row = &grid[(iy + k) * gw..];
                    *c = catmull_rom([row[ix], row[ix + 1], row[ix + 2], row[ix + 3]], fx);
                }
                dense[y * w + x] = catmull_rom(col, fy);
            }
        }
    }
    let [dy, dx] = out;
    Ok(Displacement { h, w, dy, dx })
}

fn lerp<T: Element>(a: T, b: T, f: T) -> T {
    a + (b - a) * f
}

fn dims(image: &[usize]) -> Result<(usize, usize, usize)> {
    match image {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::InvalidShape {
            shape: image.to_vec(),
            reason: "samples are [C, H, W]".into(),
        }),
    }
}

/// Resamples an image `[C, H, W]` and its mask `[1, H, W]` through `t`.
pub fn apply_transform<T: Element>(
    image: &Tensor<T>,
    mask: &Mask,
    t: &Transform,
) -> Result<(Tensor<T>, Mask)> {
    let (c, h, w) = dims(image.shape())?;
    if mask.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "augment",
            left: image.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    if t.is_identity() {
        return Ok((image.clone(), mask.clone()));
    }
    if let Some(d) = &t.warp {
        if (d.h, d.w) != (h, w) {
            return Err(Error::invalid(
                "displacement field extent differs from the sample",
            ));
        }
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rot = t.rotation_deg.to_radians().sin_cos();
    let rot = if t.rotation_deg == 0.0 {
        (0.0, 1.0)
    } else {
        rot
    };
    let mut img = vec![T::zero(); image.numel()];
    let mut lab = vec![VOID; h * w];
    let src = image.data();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = t.source(y, x, cy, cx, rot);
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 {
                lab[y * w + x] = mask.labels()[ny as usize * w + nx as usize];
            }
            let cyc = sy.clamp(0.0, (h - 1) as f64);
            let cxc = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (cyc.floor() as usize, cxc.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let fy = T::from_f64_lossy(cyc - y0 as f64);
            let fx = T::from_f64_lossy(cxc - x0 as f64);
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let top = lerp(p[y0 * w + x0], p[y0 * w + x1], fx);
                let bot = lerp(p[y1 * w + x0], p[y1 * w + x1], fx);
                img[ch * h * w + y * w + x] = lerp(top, bot, fy);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, h, w], img)?,
        Mask::new(vec![1, h, w], lab)?,
    ))
}

/// Crops `size×size` at `(top, left)`.
pub fn crop<T: Element>(
    image: &Tensor<T>,
    mask: &Mask,
    top: usize,
    left: usize,
    size: usize,
) -> Result<(Tensor<T>, Mask)> {
    let (c, h, w) = dims(image.shape())?;
    if top + size > h || left + size > w {
        return Err(Error::invalid(format!(
            "crop {size} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    let mut img = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = ch * h * w + y * w;
            img.extend_from_slice(&image.data()[row + left..row + left + size]);
        }
    }
    let mut lab = Vec::with_capacity(size * size);
    for y in top..top + size {
        lab.extend_from_slice(&mask.labels()[y * w + left..y * w + left + size]);
    }
    Ok((
        Tensor::new(vec![c, size, size], img)?,
        Mask::new(vec![1, size, size], lab)?,
    ))
}

/// Random crop; with `foreground`, origins are re-drawn (up to 100 times)
/// until the crop contains a foreground pixel.
pub fn random_crop<T: Element>(
    image: &Tensor<T>,
    mask: &Mask,
    size: usize,
    foreground: bool,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Mask)> {
    let (_, h, w) = dims(image.shape())?;
    if size > h || size > w {
        return Err(Error::invalid(format!(
            "crop size {size} larger than the {h}x{w} sample"
        )));
    }
    let mut origin = (0, 0);
    for _ in 0..if foreground { CROP_TRIES } else { 1 } {
        origin = (
            rng.random_range(0..=h - size),
            rng.random_range(0..=w - size),
        );
        if !foreground {
            break;
        }
        let (top, left) = origin;
        let hit = (top..top + size)
            .any(|y| mask.labels()[y * w + left..y * w + left + size].contains(&FOREGROUND));
        if hit {
            break;
        }
    }
    crop(image, mask, origin.0, origin.1, size)
}

/// Full augmentation of one `(image [C,H,W], mask [1,H,W])` pair.
pub fn apply<T: Element>(
    image: &Tensor<T>,
    mask: &Mask,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Mask)> {
    let (_, h, w) = dims(image.shape())?;
    if let Some(size) = cfg.crop_size {
        if size > h || size > w {
            return Err(Error::invalid(format!(
                "crop size {size} larger than the {h}x{w} sample"
            )));
        }
    }
    let t = sample_transform(cfg, h, w, rng)?;
    let (img, m) = apply_transform(image, mask, &t)?;
    match cfg.crop_size {
        Some(size) if size < h || size < w => random_crop(&img, &m, size, cfg.crop_foreground, rng),
        _ => Ok((img, m)),
    }
}

/// Elastic warp alone.
pub fn spline_warp<T: Element>(
    image: &Tensor<T>,
    mask: &Mask,
    grid_spacing: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Mask)> {
    let (_, h, w) = dims(image.shape())?;
    let mut t = Transform::identity();
    t.warp = Some(displacement_field(h, w, grid_spacing, sigma, rng)?);
    apply_transform(image, mask, &t)
}
