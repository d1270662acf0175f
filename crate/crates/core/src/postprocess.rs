//! Largest-connected-component filtering of thresholded predictions.

use std::collections::VecDeque;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Neighbourhood used to connect foreground voxels. `Four` and `Eight` stay
/// within a slice; `Six` and `TwentySix` also link adjacent slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            6 => Ok(Self::Six),
            26 => Ok(Self::TwentySix),
            _ => Err(Error::invalid(format!(
                "connectivity must be 4, 8, 6 or 26, got {n}"
            ))),
        }
    }

    /// 26 for volumes, 8 for a single slice.
    pub fn default_for_depth(depth: usize) -> Self {
        if depth > 1 {
            Self::TwentySix
        } else {
            Self::Eight
        }
    }

    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nz = (dz != 0) as u8 + (dy != 0) as u8 + (dx != 0) as u8;
                    let keep = match self {
                        Self::Four => dz == 0 && nz == 1,
                        Self::Eight => dz == 0 && nz >= 1,
                        Self::Six => nz == 1,
                        Self::TwentySix => nz >= 1,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = s
            .parse::<u32>()
            .map_err(|_| Error::invalid(format!("connectivity `{s}` is not a number")))?;
        Self::from_count(n)
    }
}

/// Component id per voxel (0 = background, ids from 1 in raster order of
/// first voxel) and the size of each component.
pub fn label_components(
    fg: &[bool],
    dims: [usize; 3],
    conn: Connectivity,
) -> (Vec<u32>, Vec<usize>) {
    let [d, h, w] = dims;
    let offsets = conn.offsets();
    let mut labels = vec![0u32; fg.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (
                (i / (h * w)) as isize,
                ((i / w) % h) as isize,
                (i % w) as isize,
            );
            for &[dz, dy, dx] in &offsets {
                let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                if nz < 0
                    || ny < 0
                    || nx < 0
                    || nz >= d as isize
                    || ny >= h as isize
                    || nx >= w as isize
                {
                    continue;
                }
                let j = (nz as usize * h + ny as usize) * w + nx as usize;
                if fg[j] && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Binarizes `pred` (`[D, H, W]` or `[H, W]`) at `threshold` (`p ≥ t` is
/// foreground) and keeps only the largest connected component. Ties go to
/// the component met first in raster order. An empty prediction stays empty.
pub fn largest_component<T: Element>(
    pred: &Tensor<T>,
    threshold: f64,
    conn: Connectivity,
) -> Result<Tensor<T>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let dims = match *pred.shape() {
        [d, h, w] => [d, h, w],
        [h, w] => [1, h, w],
        _ => {
            return Err(Error::InvalidShape {
                shape: pred.shape().to_vec(),
                reason: "expected [D, H, W] or [H, W]".into(),
            })
        }
    };
    let t = T::from_f64_lossy(threshold);
    let fg: Vec<bool> = pred.data().iter().map(|&v| v >= t).collect();
    let (labels, sizes) = label_components(&fg, dims, conn);
    let mut keep = 0u32;
    let mut best = 0usize;
    for (k, &s) in sizes.iter().enumerate() {
        if s > best {
            best = s;
            keep = k as u32 + 1;
        }
    }
    let data = labels
        .iter()
        .map(|&l| {
            if l != 0 && l == keep {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}
