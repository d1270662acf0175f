//! Dice loss and Dice overlap metrics with void-label masking.
//!
//! The loss is computed over the whole batch at once: the three sums run over
//! every non-void pixel of every sample.

use crate::error::{Error, Result};
use crate::mask::{Mask, FOREGROUND, VOID};
use crate::tensor::{Element, Tensor};

/// Denominator smoothing used while training, so all-background crops with an
/// all-zero prediction stay finite.
pub const TRAIN_SMOOTHING: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_pair<T: Element>(pred: &Tensor<T>, mask: &Mask) -> Result<()> {
    if pred.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice",
            left: pred.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    Ok(())
}

/// Sums `(Σ o·y, Σ o, Σ y)` over non-void pixels.
fn dice_sums<T: Element>(pred: &[T], labels: &[u8]) -> Result<(T, T, T)> {
    let (mut inter, mut so, mut sy) = (T::zero(), T::zero(), T::zero());
    let mut seen = false;
    for (&o, &l) in pred.iter().zip(labels) {
        if l == VOID {
            continue;
        }
        seen = true;
        so = so + o;
        if l == FOREGROUND {
            inter = inter + o;
            sy = sy + T::one();
        }
    }
    if !seen {
        return Err(Error::AllVoid);
    }
    Ok((inter, so, sy))
}

/// Soft Dice loss `−2Σo·y / (Σo + Σy + s)` and its gradient with respect to
/// `pred`. Void pixels get zero gradient. When the denominator is exactly zero
/// (empty prediction, empty foreground, `s = 0`) the overlap is perfect by
/// convention: the loss is −1 with zero gradient.
pub fn dice_loss<T: Element>(
    pred: &Tensor<T>,
    mask: &Mask,
    smoothing: T,
) -> Result<(T, Tensor<T>)> {
    check_pair(pred, mask)?;
    let (inter, so, sy) = dice_sums(pred.data(), mask.labels())?;
    let denom = so + sy + smoothing;
    let two = T::one() + T::one();
    if denom == T::zero() {
        return Ok((-T::one(), pred.zeros_like()));
    }
    let loss = -two * inter / denom;
    let d2 = denom * denom;
    let grad = pred
        .data()
        .iter()
        .zip(mask.labels())
        .map(|(_, &l)| match l {
            VOID => T::zero(),
            FOREGROUND => -two * (denom - inter) / d2,
            _ => two * inter / d2,
        })
        .collect();
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Hard Dice `2|P∩G| / (|P| + |G|)` after thresholding `pred` (`o ≥ t` is
/// foreground). Returns 1.0 when both sets are empty.
pub fn dice_coefficient<T: Element>(pred: &Tensor<T>, mask: &Mask, threshold: T) -> Result<f64> {
    check_pair(pred, mask)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&o, &l) in pred.data().iter().zip(mask.labels()) {
        if l == VOID {
            continue;
        }
        let p = o >= threshold;
        let g = l == FOREGROUND;
        np += usize::from(p);
        ng += usize::from(g);
        inter += usize::from(p && g);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Binarizes `pred` at `threshold` into a 0/1 tensor.
pub fn binarize<T: Element>(pred: &Tensor<T>, threshold: T) -> Tensor<T> {
    pred.map(|v| if v >= threshold { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(labels: &[u8]) -> Mask {
        Mask::new(vec![1, 1, 1, labels.len()], labels.to_vec()).unwrap()
    }

    fn pred(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_minus_one() {
        let m = mask(&[0, 1, 1, 0, 1]);
        let (l, _) = dice_loss(&pred(&[0.0, 1.0, 1.0, 0.0, 1.0]), &m, 0.0).unwrap();
        assert_eq!(l, -1.0);
    }

    #[test]
    fn zero_prediction_is_zero() {
        let (l, _) = dice_loss(&pred(&[0.0; 4]), &mask(&[0, 1, 0, 1]), 0.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn half_overlap_closed_form() {
        let n = 64;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let (l, _) = dice_loss(&pred(&vec![0.5; n]), &mask(&labels), 0.0).unwrap();
        assert!((l + 0.5).abs() < 1e-6);
    }

    #[test]
    fn void_is_excluded() {
        let m = mask(&[1, VOID, 0]);
        let (l, g) = dice_loss(&pred(&[1.0, 0.7, 0.0]), &m, 0.0).unwrap();
        assert_eq!(l, -1.0);
        assert_eq!(g.data()[1], 0.0);
        assert!(matches!(
            dice_loss(&pred(&[0.3, 0.2]), &mask(&[VOID, VOID]), 0.0),
            Err(Error::AllVoid)
        ));
    }

    #[test]
    fn saturated_predictions_stay_finite() {
        let (l, g) = dice_loss(
            &pred(&[0.0, 1.0, 1.0, 0.0]),
            &mask(&[0, 0, 1, 1]),
            TRAIN_SMOOTHING,
        )
        .unwrap();
        assert!(l.is_finite() && g.all_finite());
        let (l, g) = dice_loss(&pred(&[0.0, 0.0]), &mask(&[0, 0]), TRAIN_SMOOTHING).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.all_finite());
    }

    #[test]
    fn coefficient_cases() {
        let m = mask(&[0, 1, 1, 0]);
        assert_eq!(
            dice_coefficient(&pred(&[0.1, 0.9, 0.8, 0.2]), &m, 0.5).unwrap(),
            1.0
        );
        assert_eq!(
            dice_coefficient(&pred(&[0.9, 0.1, 0.1, 0.9]), &m, 0.5).unwrap(),
            0.0
        );
        assert_eq!(
            dice_coefficient(&pred(&[0.0; 4]), &mask(&[0; 4]), 0.5).unwrap(),
            1.0
        );
    }

    #[test]
    fn shifted_square_overlap() {
        // 3×3 square vs the same square shifted one column on a 5×5 grid.
        let (h, w) = (5, 5);
        let mut p = vec![0.0; h * w];
        let mut g = vec![0u8; h * w];
        for r in 1..4 {
            for c in 0..3 {
                p[r * w + c] = 1.0;
                g[r * w + c + 1] = 1;
            }
        }
        let p = Tensor::new(vec![1, 1, h, w], p).unwrap();
        let m = Mask::new(vec![1, 1, h, w], g).unwrap();
        let d = dice_coefficient(&p, &m, 0.5).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..=1.0, n),
                prop::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(VOID)], n),
            )
        })
    }

    proptest! {
        #[test]
        fn loss_is_bounded((o, y) in arb_case(), s in 0.0f64..1.0) {
            let m = mask(&y);
            prop_assume!(m.non_void() > 0);
            let (l, _) = dice_loss(&pred(&o), &m, s).unwrap();
            prop_assert!((-1.0..=0.0).contains(&l));
        }

        #[test]
        fn coefficient_matches_binarized_loss((o, y) in arb_case()) {
            let m = mask(&y);
            prop_assume!(m.count(FOREGROUND) > 0);
            let p = pred(&o);
            let d = dice_coefficient(&p, &m, 0.5).unwrap();
            let (l, _) = dice_loss(&binarize(&p, 0.5), &m, 0.0).unwrap();
            prop_assert!((d + l).abs() < 1e-12);
        }

        #[test]
        fn permutation_invariant((o, y) in arb_case(), rot in 0usize..40) {
            let m = mask(&y);
            prop_assume!(m.non_void() > 0);
            let k = rot % o.len();
            let mut o2 = o.clone();
            let mut y2 = y.clone();
            o2.rotate_left(k);
            y2.rotate_left(k);
            let (l1, _) = dice_loss(&pred(&o), &m, 1e-5).unwrap();
            let (l2, _) = dice_loss(&pred(&o2), &mask(&y2), 1e-5).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-12);
            let d1 = dice_coefficient(&pred(&o), &m, 0.5).unwrap();
            let d2 = dice_coefficient(&pred(&o2), &mask(&y2), 0.5).unwrap();
            prop_assert_eq!(d1, d2);
        }

        #[test]
        fn raising_foreground_output_never_hurts((o, y) in arb_case(), pick in 0usize..40, bump in 0.0f64..1.0) {
            let m = mask(&y);
            let fg: Vec<usize> = (0..y.len()).filter(|&i| y[i] == FOREGROUND).collect();
            prop_assume!(!fg.is_empty());
            let i = fg[pick % fg.len()];
            let mut o2 = o.clone();
            o2[i] = (o2[i] + bump).min(1.0);
            let (l1, _) = dice_loss(&pred(&o), &m, 1e-5).unwrap();
            let (l2, _) = dice_loss(&pred(&o2), &m, 1e-5).unwrap();
            prop_assert!(l2 <= l1 + 1e-12);
        }
    }
}
