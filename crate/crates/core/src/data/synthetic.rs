//! Synthetic segmentation tasks with known ground truth.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{default_classes, DatasetManifest, RecordEntry};
use crate::error::{Error, Result};
use crate::mask::{BACKGROUND, FOREGROUND, VOID};
use crate::rng::{Rng, SeedSource};
use crate::tensor::io::write_atomic;
use crate::tensor::{write_sgt1, AnyTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    /// Bright disks (foreground) on a darker textured background.
    Disks,
    /// Voronoi cell interiors (foreground) separated by dark boundaries.
    Membranes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskCfg {
    pub size: usize,
    pub count: usize,
    pub shape: ShapeKind,
    /// Mean background intensity.
    pub background: f64,
    /// Mean foreground intensity.
    pub foreground: f64,
    /// Every pixel is clamped into this range.
    pub range: [f64; 2],
    pub noise_sigma: f64,
    /// Adds a smooth sinusoidal pattern to the background.
    pub texture: bool,
    pub texture_amplitude: f64,
    /// Blends disk edges by sub-pixel coverage.
    pub antialias: bool,
    pub min_disks: usize,
    pub max_disks: usize,
    /// Approximate number of cells per membrane image.
    pub cells: usize,
    /// Boundary half-width in pixels for membrane images.
    pub boundary: f64,
    pub seed: u64,
    pub split: Option<String>,
}

impl Default for SyntheticTaskCfg {
    fn default() -> Self {
        Self {
            size: 64,
            count: 8,
            shape: ShapeKind::Disks,
            background: 250.0,
            foreground: 1750.0,
            range: [0.0, 2000.0],
            noise_sigma: 250.0,
            texture: true,
            texture_amplitude: 100.0,
            antialias: true,
            min_disks: 1,
            max_disks: 3,
            cells: 12,
            boundary: 1.0,
            seed: 0,
            split: None,
        }
    }
}

impl SyntheticTaskCfg {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 16 {
            return bad(format!(
                "synthetic size must be at least 16, got {}",
                self.size
            ));
        }
        if !self.range.iter().all(|v| v.is_finite()) || self.range[0] >= self.range[1] {
            return bad(format!("invalid intensity range {:?}", self.range));
        }
        for (name, v) in [
            ("background", self.background),
            ("foreground", self.foreground),
        ] {
            if !(self.range[0]..=self.range[1]).contains(&v) {
                return bad(format!("{name} level {v} lies outside the intensity range"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            ));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite()) {
            return bad("texture_amplitude must be finite and non-negative".into());
        }
        if self.min_disks > self.max_disks || self.max_disks > 3 {
            return bad("disk count must satisfy min_disks <= max_disks <= 3".into());
        }
        if self.cells < 2 || self.boundary.is_nan() || self.boundary <= 0.0 {
            return bad("membranes need at least 2 cells and a positive boundary width".into());
        }
        Ok(())
    }

    /// Disk radii are drawn from `[size/12, size/5]`.
    pub fn radius_range(&self) -> (f64, f64) {
        (self.size as f64 / 12.0, self.size as f64 / 5.0)
    }
}

/// Geometry and pixels of one generated image.
pub struct Generated {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    /// `(cy, cx, r)` per disk; empty for membranes.
    pub disks: Vec<(f64, f64, f64)>,
}

const SUBSAMPLES: usize = 4;

fn disk_coverage(y: usize, x: usize, disks: &[(f64, f64, f64)]) -> f64 {
    let mut hit = 0;
    for sy in 0..SUBSAMPLES {
        for sx in 0..SUBSAMPLES {
            let py = y as f64 + (sy as f64 + 0.5) / SUBSAMPLES as f64;
            let px = x as f64 + (sx as f64 + 0.5) / SUBSAMPLES as f64;
            if disks
                .iter()
                .any(|&(cy, cx, r)| (py - cy).powi(2) + (px - cx).powi(2) <= r * r)
            {
                hit += 1;
            }
        }
    }
    hit as f64 / (SUBSAMPLES * SUBSAMPLES) as f64
}

fn texture_fn(cfg: &SyntheticTaskCfg, rng: &mut Rng) -> impl Fn(usize, usize) -> f64 {
    let waves: Vec<[f64; 3]> = (0..2)
        .map(|_| {
            [
                rng.random_range(2.0..6.0) / cfg.size as f64,
                rng.random_range(2.0..6.0) / cfg.size as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let amp = if cfg.texture {
        cfg.texture_amplitude / 2.0
    } else {
        0.0
    };
    move |y, x| {
        waves
            .iter()
            .map(|&[fy, fx, ph]| {
                amp * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + ph).sin()
            })
            .sum()
    }
}

/// Draws image `index` of the task.
pub fn generate_one(cfg: &SyntheticTaskCfg, index: u64) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = SeedSource::new(cfg.seed).stream("synthetic", index);
    let n = cfg.size;
    let tex = texture_fn(cfg, &mut rng);
    let mut coverage = vec![0.0; n * n];
    let mut labels = vec![BACKGROUND; n * n];
    let mut disks = Vec::new();
    match cfg.shape {
        ShapeKind::Disks => {
            let (rmin, rmax) = cfg.radius_range();
            let k = rng.random_range(cfg.min_disks..=cfg.max_disks);
            for _ in 0..k {
                let r = rng.random_range(rmin..=rmax);
                let cy = rng.random_range(r..=n as f64 - r);
                let cx = rng.random_range(r..=n as f64 - r);
                disks.push((cy, cx, r));
            }
            for y in 0..n {
                for x in 0..n {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    if disks
                        .iter()
                        .any(|&(cy, cx, r)| (py - cy).powi(2) + (px - cx).powi(2) <= r * r)
                    {
                        labels[y * n + x] = FOREGROUND;
                    }
                    coverage[y * n + x] = if cfg.antialias {
                        disk_coverage(y, x, &disks)
                    } else {
                        f64::from(labels[y * n + x])
                    };
                }
            }
        }
        ShapeKind::Membranes => {
            let sites: Vec<(f64, f64)> = (0..cfg.cells)
                .map(|_| {
                    (
                        rng.random_range(0.0..n as f64),
                        rng.random_range(0.0..n as f64),
                    )
                })
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
                    for &(sy, sx) in &sites {
                        let d = ((py - sy).powi(2) + (px - sx).powi(2)).sqrt();
                        if d < d1 {
                            d2 = d1;
                            d1 = d;
                        } else if d < d2 {
                            d2 = d;
                        }
                    }
                    // Distance to the bisector of the two nearest sites.
                    if (d2 - d1) / 2.0 > cfg.boundary {
                        labels[y * n + x] = FOREGROUND;
                        coverage[y * n + x] = 1.0;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let c = coverage[y * n + x];
            let bg = cfg.background + tex(y, x);
            let mut v = bg + c * (cfg.foreground - bg);
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v.clamp(cfg.range[0], cfg.range[1]) as f32);
        }
    }
    Ok(Generated {
        image: Tensor::new(vec![1, n, n], data)?,
        labels,
        disks,
    })
}

/// Writes `images/`, `masks/` and `manifest.json` under `out`.
pub fn generate_synthetic(cfg: &SyntheticTaskCfg, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for d in ["images", "masks"] {
        let p = out.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let g = generate_one(cfg, i as u64)?;
        let image = PathBuf::from(format!("images/img_{i:04}.sgt1"));
        let mask = PathBuf::from(format!("masks/img_{i:04}.sgt1"));
        let n = cfg.size;
        let m = Tensor::<f32>::new(
            vec![1, n, n],
            g.labels.iter().map(|&l| f32::from(l)).collect(),
        )?;
        write_sgt1(&out.join(&image), &AnyTensor::F32(g.image))?;
        write_sgt1(&out.join(&mask), &AnyTensor::F32(m))?;
        records.push(RecordEntry {
            image,
            mask: Some(mask),
            volume_id: None,
            slice_index: None,
        });
    }
    let manifest = DatasetManifest {
        records,
        classes: default_classes(),
        void_label: VOID,
        split: cfg.split.clone(),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    write_atomic(&path, text.as_bytes())?;
    Ok(manifest)
}
