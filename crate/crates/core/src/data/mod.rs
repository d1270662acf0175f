//! Datasets on disk, batching and slice-to-volume grouping.
//!
//! A dataset directory holds `images/`, `masks/` and `manifest.json`:
//!
//! ```json
//! {
//!   "records": [
//!     {"image": "images/img_000.sgt1", "mask": "masks/img_000.sgt1",
//!      "volume_id": null, "slice_index": null}
//!   ],
//!   "classes": [{"label": 0, "name": "background"}, {"label": 1, "name": "foreground"}],
//!   "void_label": 255,
//!   "split": "train"
//! }
//! ```
//!
//! Paths are relative to the manifest. Images and masks are SGT1 tensors of
//! shape `[H, W]` or `[1, H, W]`; mask values are whole-number labels.
//! Intensities are never rescaled.

mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use synthetic::{generate_one, generate_synthetic, Generated, ShapeKind, SyntheticTaskCfg};

use crate::augment::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::mask::{Mask, VOID};
use crate::rng::SeedSource;
use crate::tensor::{read_sgt1, Tensor};

/// Loaded samples are padded to multiples of this.
pub const PAD_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub label: u8,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub image: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub volume_id: Option<String>,
    #[serde(default)]
    pub slice_index: Option<usize>,
}

fn default_classes() -> Vec<ClassEntry> {
    vec![
        ClassEntry {
            label: 0,
            name: "background".into(),
        },
        ClassEntry {
            label: 1,
            name: "foreground".into(),
        },
    ]
}

fn default_void() -> u8 {
    VOID
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub records: Vec<RecordEntry>,
    #[serde(default = "default_classes")]
    pub classes: Vec<ClassEntry>,
    #[serde(default = "default_void")]
    pub void_label: u8,
    #[serde(default)]
    pub split: Option<String>,
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<u8> {
        self.classes.iter().map(|c| c.label).collect()
    }
}

/// One padded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`, H and W multiples of 32.
    pub image: Tensor<f32>,
    /// `[1, H, W]`; `None` for prediction-only records.
    pub mask: Option<Mask>,
    /// Extent before padding.
    pub original: (usize, usize),
    pub volume_id: Option<String>,
    pub slice_index: Option<usize>,
    pub image_path: PathBuf,
}

impl Sample {
    pub fn require_mask(&self) -> Result<&Mask> {
        self.mask.as_ref().ok_or_else(|| {
            Error::invalid(format!(
                "{} has no mask and cannot be used for training",
                self.image_path.display()
            ))
        })
    }
}

/// A manifest and its directory; samples are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

/// Opens a dataset from its manifest (or the directory holding
/// `manifest.json`).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: file.clone(),
        source: e,
    })?;
    if manifest.void_label != VOID {
        return Err(Error::Config(format!(
            "void label must be {VOID}, got {}",
            manifest.void_label
        )));
    }
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    for r in &manifest.records {
        for p in std::iter::once(&r.image).chain(&r.mask) {
            let full = root.join(p);
            if !full.is_file() {
                return Err(Error::io(
                    full,
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        }
    }
    Ok(Dataset { root, manifest })
}

fn plane(t: Tensor<f32>, path: &Path) -> Result<Tensor<f32>> {
    match *t.shape() {
        [h, w] => t.reshape(&[1, h, w]),
        [1, _, _] => Ok(t),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{}: expected [H, W] or [1, H, W]", path.display()),
        }),
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    /// Reads, validates and pads record `i`.
    pub fn sample(&self, i: usize) -> Result<Sample> {
        let r = &self.manifest.records[i];
        let ip = self.root.join(&r.image);
        let image = plane(read_sgt1(&ip)?.into_tensor::<f32>(), &ip)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let mask = match &r.mask {
            Some(mp) => {
                let mp = self.root.join(mp);
                let m = Mask::from_tensor(&plane(read_sgt1(&mp)?.into_tensor::<f32>(), &mp)?)?;
                if m.shape() != image.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "dataset record",
                        left: image.shape().to_vec(),
                        right: m.shape().to_vec(),
                    });
                }
                m.validate(&self.manifest.labels())?;
                Some(m)
            }
            None => None,
        };
        let (image, mask) = pad_to_multiple(&image, mask.as_ref(), PAD_MULTIPLE)?;
        Ok(Sample {
            image,
            mask,
            original: (h, w),
            volume_id: r.volume_id.clone(),
            slice_index: r.slice_index,
            image_path: ip,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }
}

/// Pads `[C, H, W]` on the bottom/right to multiples of `multiple`: the image
/// by edge replication, the mask with void.
pub fn pad_to_multiple(
    image: &Tensor<f32>,
    mask: Option<&Mask>,
    multiple: usize,
) -> Result<(Tensor<f32>, Option<Mask>)> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::invalid("padding expects [C, H, W]")),
    };
    let (ph, pw) = (
        h.div_ceil(multiple) * multiple,
        w.div_ceil(multiple) * multiple,
    );
    if (ph, pw) == (h, w) {
        return Ok((image.clone(), mask.cloned()));
    }
    let img = Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        image.data()[ch * h * w + y.min(h - 1) * w + x.min(w - 1)]
    })?;
    let mask = match mask {
        Some(m) => {
            let mut labels = vec![VOID; ph * pw];
            for y in 0..h {
                labels[y * pw..y * pw + w].copy_from_slice(&m.labels()[y * w..(y + 1) * w]);
            }
            Some(Mask::new(vec![1, ph, pw], labels)?)
        }
        None => None,
    };
    Ok((img, mask))
}

/// Top-left `h×w` region of a `[C, H, W]` or `[B, C, H, W]` tensor.
pub fn crop_back(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (lead, ph, pw) = match s.len() {
        3 | 4 => (
            s[..s.len() - 2].iter().product::<usize>(),
            s[s.len() - 2],
            s[s.len() - 1],
        ),
        _ => {
            return Err(Error::invalid(
                "crop_back expects [C, H, W] or [B, C, H, W]",
            ))
        }
    };
    if h > ph || w > pw || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "cannot crop {ph}x{pw} back to {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(lead * h * w);
    for p in 0..lead {
        for y in 0..h {
            let row = p * ph * pw + y * pw;
            out.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([h, w]);
    Tensor::new(shape, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 1, H, W]`.
    pub images: Tensor<f32>,
    /// `[B, 1, H, W]`.
    pub masks: Mask,
    /// Positions of the samples in the source list.
    pub indices: Vec<usize>,
}

/// Stacks `[1, H, W]` samples into a batch.
pub fn stack(pairs: &[(Tensor<f32>, Mask)], indices: Vec<usize>) -> Result<Batch> {
    let first = pairs.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let shape = first.0.shape().to_vec();
    let mut img = Vec::with_capacity(pairs.len() * first.0.numel());
    let mut lab = Vec::with_capacity(pairs.len() * first.1.len());
    for (i, m) in pairs {
        if i.shape() != shape.as_slice() || m.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "batch",
                left: shape,
                right: i.shape().to_vec(),
            });
        }
        img.extend_from_slice(i.data());
        lab.extend_from_slice(m.labels());
    }
    let mut bshape = vec![pairs.len()];
    bshape.extend(&shape);
    Ok(Batch {
        images: Tensor::new(bshape.clone(), img)?,
        masks: Mask::new(bshape, lab)?,
        indices,
    })
}

/// Batches of one epoch. The order is a permutation drawn from the
/// `("shuffle", epoch)` stream; sample `i` is augmented with the
/// `("augment/<epoch>", i)` stream, so the output depends only on the seed
/// and epoch. The final batch may be smaller.
pub struct BatchIter<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<&'a AugmentConfig>,
    seeds: SeedSource,
    epoch: u64,
}

pub fn batch_iterator<'a>(
    samples: &'a [Sample],
    batch_size: usize,
    shuffle: bool,
    augment: Option<&'a AugmentConfig>,
    seeds: SeedSource,
    epoch: u64,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        order.shuffle(&mut seeds.stream("shuffle", epoch));
    }
    Ok(BatchIter {
        samples,
        order,
        pos: 0,
        batch_size,
        augment,
        seeds,
        epoch,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let idx: Vec<usize> =
            self.order[self.pos..(self.pos + self.batch_size).min(self.order.len())].to_vec();
        self.pos += idx.len();
        let tag = format!("augment/{}", self.epoch);
        let pairs = idx
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                let m = s.require_mask()?;
                match self.augment {
                    Some(cfg) => {
                        augment::apply(&s.image, m, cfg, &mut self.seeds.stream(&tag, i as u64))
                    }
                    None => Ok((s.image.clone(), m.clone())),
                }
            })
            .collect::<Result<Vec<_>>>();
        Some(pairs.and_then(|p| stack(&p, idx)))
    }
}

/// Stacks per-slice predictions (`[H, W]` or `[1, H, W]`) into `[D, H, W]`
/// volumes, one per volume id in order of first appearance. Slice indices of
/// a volume must form a contiguous run.
pub fn group_slices_to_volume(
    predictions: &[Tensor<f32>],
    provenance: &[(String, usize)],
) -> Result<Vec<(String, Tensor<f32>)>> {
    if predictions.len() != provenance.len() {
        return Err(Error::invalid(
            "one provenance entry per prediction is required",
        ));
    }
    let mut ids: Vec<&String> = Vec::new();
    for (id, _) in provenance {
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let mut out = Vec::new();
    for id in ids {
        let mut slices: Vec<(usize, &Tensor<f32>)> = provenance
            .iter()
            .zip(predictions)
            .filter(|((v, _), _)| v == id)
            .map(|((_, s), p)| (*s, p))
            .collect();
        slices.sort_by_key(|&(s, _)| s);
        let start = slices[0].0;
        for (k, &(s, _)) in slices.iter().enumerate() {
            if k > 0 && s == slices[k - 1].0 {
                return Err(Error::invalid(format!("volume `{id}` has slice {s} twice")));
            }
            if s != start + k {
                return Err(Error::invalid(format!(
                    "volume `{id}` is missing slice {}",
                    start + k
                )));
            }
        }
        let plane_shape = slices[0]
            .1
            .shape()
            .iter()
            .rev()
            .take(2)
            .rev()
            .copied()
            .collect::<Vec<_>>();
        let mut data = Vec::new();
        for (_, p) in &slices {
            let ps = p.shape();
            if ps.iter().rev().take(2).rev().copied().collect::<Vec<_>>() != plane_shape
                || p.numel() != plane_shape.iter().product::<usize>()
            {
                return Err(Error::ShapeMismatch {
                    op: "group slices",
                    left: slices[0].1.shape().to_vec(),
                    right: ps.to_vec(),
                });
            }
            data.extend_from_slice(p.data());
        }
        let shape = vec![slices.len(), plane_shape[0], plane_shape[1]];
        out.push((id.clone(), Tensor::new(shape, data)?));
    }
    Ok(out)
}
