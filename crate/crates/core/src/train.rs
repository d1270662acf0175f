//! Training loop, early stopping and ensembles.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::autodiff::{Graph, Mode};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{batch_iterator, Sample};
use crate::error::{Error, Result};
use crate::loss::{dice_coefficient, dice_loss, DEFAULT_THRESHOLD, TRAIN_SMOOTHING};
use crate::nn::{Arch, ArchConfig, ModelGraph};
use crate::optim::{OptimConfig, RmsProp};
use crate::rng::SeedSource;
use crate::tensor::io::write_atomic;
use crate::tensor::{Element, Tensor};

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_dice,lr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub patience: usize,
    pub max_epochs: usize,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            patience: 50,
            max_epochs: 500,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    /// Learning rate at the end of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_dice, e.lr
            );
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .fold(None, |b: Option<&EpochRecord>, e| match b {
                Some(b) if b.val_dice >= e.val_dice => Some(b),
                _ => Some(e),
            })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the highest validation Dice.
    pub best: Checkpoint,
    pub best_epoch: u64,
    pub best_dice: f64,
    pub history: History,
    /// True when training ended through patience rather than `max_epochs`.
    pub stopped_early: bool,
}

/// Validation loss and mean per-image Dice, one image at a time in eval mode.
pub fn evaluate<T: Element>(model: &mut ModelGraph<T>, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let (mut loss, mut dice) = (0.0, 0.0);
    for s in samples {
        let m = s.require_mask()?;
        let [_, h, w] = [s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]];
        let x: Tensor<T> = s.image.cast::<T>().reshape(&[1, 1, h, w])?;
        let y = model.predict(&x)?;
        let m = m.clone().reshape(&[1, 1, h, w])?;
        let (l, _) = dice_loss(&y, &m, T::from_f64_lossy(TRAIN_SMOOTHING))?;
        loss += l.to_f64().unwrap_or(f64::NAN);
        dice += dice_coefficient(&y, &m, T::from_f64_lossy(DEFAULT_THRESHOLD))?;
    }
    let n = samples.len() as f64;
    Ok((loss / n, dice / n))
}

/// Trains `model` on `train`, keeping the parameters of the epoch with the
/// highest validation Dice (left loaded in `model` on return). With `out`,
/// `history.csv` and `best.sgc1` are written there after every epoch.
pub fn train<T: Element>(
    model: &mut ModelGraph<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    seeds: SeedSource,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(
            "training and validation splits must be nonempty",
        ));
    }
    for s in train.iter().chain(val) {
        s.require_mask()?;
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut opt = RmsProp::new(cfg.optim.clone(), &model.params);
    let smoothing = T::from_f64_lossy(TRAIN_SMOOTHING);
    let mut history = History::default();
    let mut best: Option<(Checkpoint, u64, f64)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs as u64 {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in batch_iterator(
            train,
            cfg.optim.batch_size,
            true,
            cfg.augment.as_ref(),
            seeds,
            epoch,
        )? {
            let batch = batch?;
            let mut g = Graph::new();
            let x = g.input(batch.images.cast::<T>());
            let mut rng = seeds.stream("dropout", opt.step);
            let y = model.forward(&mut g, x, Mode::Train, &mut rng)?;
            let l = g.dice_loss(y, &batch.masks, smoothing)?;
            let lv = g.value(l).data()[0].to_f64().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}"),
                });
            }
            model.params.zero_grads();
            g.backward(l, None, &mut model.params)?;
            opt.step(&mut model.params)?;
            loss_sum += lv;
            batches += 1;
        }
        let (val_loss, val_dice) = evaluate(model, val)?;
        if !val_dice.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("validation at epoch {epoch}"),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_dice,
            lr: opt.lr(),
        });
        let improved = best.as_ref().is_none_or(|(_, _, d)| val_dice > *d);
        if improved {
            let meta = CheckpointMeta {
                epoch,
                step: opt.step,
                metric: val_dice,
            };
            let ck = Checkpoint::capture(model, Some(&opt), meta);
            if let Some(dir) = out {
                ck.save(&dir.join("best.sgc1"))?;
            }
            best = Some((ck, epoch, val_dice));
            since_best = 0;
        } else if since_best == cfg.patience {
            stopped_early = true;
        } else {
            since_best += 1;
        }
        if let Some(dir) = out {
            write_atomic(&dir.join("history.csv"), history.to_csv().as_bytes())?;
        }
        if stopped_early {
            break;
        }
    }
    let (ck, best_epoch, best_dice) = best.expect("at least one epoch ran");
    ck.restore(model, None)?;
    Ok(TrainOutcome {
        best: ck,
        best_epoch,
        best_dice,
        history,
        stopped_early,
    })
}

/// Worker threads allowed by `SEGPIPE_THREADS` (default: all cores).
pub fn thread_limit() -> usize {
    std::env::var("SEGPIPE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Random 80/20 train/validation split of `n` indices.
pub fn split_indices(n: usize, seeds: SeedSource) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid(
            "an ensemble member needs at least 2 samples to split",
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeds.stream("split", 0));
    let n_val = ((n as f64 * 0.2).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

#[derive(Clone, Debug)]
pub struct EnsembleMember {
    pub index: usize,
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub outcome: TrainOutcome,
    pub dir: Option<PathBuf>,
}

/// Trains `n` members, each with its own seed and train/validation split of
/// `samples`. Members run concurrently up to [`thread_limit`]; results do not
/// depend on the thread count.
pub fn train_ensemble<T: Element>(
    n: usize,
    base_seed: u64,
    arch: Arch,
    arch_cfg: ArchConfig,
    samples: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<EnsembleMember>> {
    if n == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let base = SeedSource::new(base_seed);
    let run = |k: usize| -> Result<EnsembleMember> {
        let seeds = base.derive("member", k as u64);
        let (ti, vi) = split_indices(samples.len(), seeds)?;
        let tr: Vec<Sample> = ti.iter().map(|&i| samples[i].clone()).collect();
        let va: Vec<Sample> = vi.iter().map(|&i| samples[i].clone()).collect();
        let mut model = ModelGraph::<T>::build(arch, arch_cfg, seeds.seed())?;
        let dir = out.map(|o| o.join(format!("member_{k:02}")));
        let outcome = train(&mut model, &tr, &va, cfg, seeds, dir.as_deref())?;
        Ok(EnsembleMember {
            index: k,
            seed: seeds.seed(),
            train_indices: ti,
            val_indices: vi,
            outcome,
            dir,
        })
    };
    let workers = thread_limit().min(n);
    let mut results: Vec<Option<Result<EnsembleMember>>> = (0..n).map(|_| None).collect();
    for chunk in (0..n).collect::<Vec<_>>().chunks(workers) {
        let done: Vec<(usize, Result<EnsembleMember>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&k| (k, s.spawn(move || run(k))))
                .collect();
            handles
                .into_iter()
                .map(|(k, h)| {
                    (
                        k,
                        h.join()
                            .unwrap_or_else(|_| Err(Error::invalid("ensemble worker panicked"))),
                    )
                })
                .collect()
        });
        for (k, r) in done {
            results[k] = Some(r);
        }
    }
    results
        .into_iter()
        .map(|r| r.expect("every member ran"))
        .collect()
}

/// Running mean of member probability maps. Identical members reproduce
/// their common output exactly.
pub fn average_predictions<T: Element>(preds: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = preds
        .first()
        .ok_or_else(|| Error::invalid("no predictions to average"))?;
    let mut mean = first.clone();
    for (k, p) in preds.iter().enumerate().skip(1) {
        if p.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "ensemble average",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        let inv = T::one() / T::from_usize(k + 1).expect("count");
        for (m, &v) in mean.data_mut().iter_mut().zip(p.data()) {
            *m = *m + (v - *m) * inv;
        }
    }
    Ok(mean)
}

/// Mean eval-mode probability map of the members for `x` (`[B, 1, H, W]`).
/// All members must share one architecture.
pub fn predict_ensemble<T: Element>(
    members: &mut [ModelGraph<T>],
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    if let Some(first) = members.first() {
        let d = first.descriptor();
        if members.iter().any(|m| m.descriptor() != d) {
            return Err(Error::CheckpointMismatch(
                "ensemble members differ in architecture".into(),
            ));
        }
    }
    let preds = members
        .iter_mut()
        .map(|m| m.predict(x))
        .collect::<Result<Vec<_>>>()?;
    average_predictions(&preds)
}
