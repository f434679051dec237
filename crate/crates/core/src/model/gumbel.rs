//! Gumbel-softmax sampling of a categorical from a logits row.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::diff::{argmax, softmax_row};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    /// `softmax((z + g) / tau)`.
    pub soft: Array1<f64>,
    /// Argmax of `soft`; in training the straight-through estimator passes
    /// gradients to `soft` while the forward value is this index.
    pub hard: usize,
}

/// Draws fresh standard Gumbel noise and perturbs `logits`.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(logits: ArrayView1<f64>, tau: f64, rng: &mut R) -> Result<GumbelSample> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale");
    let noise: Array1<f64> = (0..logits.len()).map(|_| gumbel.sample(rng)).collect();
    gumbel_softmax_with_noise(logits, noise.view(), tau)
}

/// Deterministic core of [`gumbel_softmax_sample`] for a given noise vector.
pub fn gumbel_softmax_with_noise(logits: ArrayView1<f64>, noise: ArrayView1<f64>, tau: f64) -> Result<GumbelSample> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let perturbed = (&logits + &noise) / tau;
    let soft = softmax_row(perturbed.view());
    let hard = argmax(soft.view());
    Ok(GumbelSample { soft, hard })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn peaked_logits_almost_always_pick_the_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = array![10.0, 0.0];
        let hits = (0..10_000)
            .filter(|_| gumbel_softmax_sample(z.view(), 0.1, &mut rng).unwrap().hard == 0)
            .count();
        // P(index 1) = 1 / (1 + e^10) ~ 4.5e-5
        assert!(hits >= 9_990, "{hits}");
    }

    #[test]
    fn constant_logits_sample_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = array![0.3, 0.3, 0.3, 0.3];
        let draws = 40_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[gumbel_softmax_sample(z.view(), 1.0, &mut rng).unwrap().hard] += 1;
        }
        let mean = draws as f64 / 4.0;
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn soft_is_normalized_and_hard_is_its_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let z: Array1<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let tau = rng.random_range(0.05..3.0);
            let s = gumbel_softmax_sample(z.view(), tau, &mut rng).unwrap();
            assert!((s.soft.sum() - 1.0).abs() < 1e-6);
            assert_eq!(s.hard, argmax(s.soft.view()));
        }
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = array![1.0, 2.0];
        assert!(matches!(gumbel_softmax_sample(z.view(), 0.0, &mut rng), Err(Error::Parameter(_))));
        assert!(gumbel_softmax_sample(z.view(), -1.0, &mut rng).is_err());
    }
}
