use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_shape, Element, Tensor};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    HeNormal,
    GlorotUniform,
    Zeros,
}

/// `(fan_in, fan_out)` for a weight of the given shape. Convolution weights
/// are `[out, in, kh, kw]`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [n] => (n, n),
        [o, i] => (i, o),
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

pub fn init_weights<T: Element>(
    scheme: InitScheme,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    check_shape(shape)?;
    let (fan_in, fan_out) = fans(shape);
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::HeNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
        }
        InitScheme::GlorotUniform => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                T::from_f64_lossy(rng.random_range(-bound..bound))
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSource;

    #[test]
    fn zeros_scheme() {
        let mut rng = SeedSource::new(1).stream("t", 0);
        let w: Tensor<f32> = init_weights(InitScheme::Zeros, &[4, 2, 3, 3], &mut rng).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_normal_moments() {
        let mut rng = SeedSource::new(42).stream("he", 0);
        let mut samples = Vec::new();
        while samples.len() < 100_000 {
            let w: Tensor<f64> =
                init_weights(InitScheme::HeNormal, &[16, 1, 3, 3], &mut rng).unwrap();
            samples.extend_from_slice(w.data());
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0f64 / 9.0).sqrt();
        assert!(
            (std - expected).abs() < 0.2 * expected,
            "std {std} vs {expected}"
        );
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn glorot_bound() {
        let mut rng = SeedSource::new(3).stream("g", 0);
        let bound = (6.0f64 / (72.0 + 72.0)).sqrt();
        let w: Tensor<f64> =
            init_weights(InitScheme::GlorotUniform, &[8, 8, 3, 3], &mut rng).unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        // The sample fills most of the interval.
        assert!(w.max_all() > 0.9 * bound);
        assert!(w.data().iter().copied().fold(f64::INFINITY, f64::min) < -0.9 * bound);
    }

    #[test]
    fn deterministic() {
        let a: Tensor<f32> = init_weights(
            InitScheme::HeNormal,
            &[8, 4, 3, 3],
            &mut SeedSource::new(9).stream("w", 1),
        )
        .unwrap();
        let b: Tensor<f32> = init_weights(
            InitScheme::HeNormal,
            &[8, 4, 3, 3],
            &mut SeedSource::new(9).stream("w", 1),
        )
        .unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
