//! Self-supervised training on the penalty loss.
//!
//! Each training sample is a random assignment (respecting givens) with a
//! random destroy mask. Masked rows of the soft assignment are Gumbel-softmax
//! relaxations of the model's logits, unmasked rows are one-hot current
//! values, and the loss is the usual penalty loss of that mixture.

use ndarray::{Array2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use super::gumbel::gumbel_softmax_with_noise;
use super::{RepairModel, TokenInput};
use crate::csp::{self, CspInstance};
use crate::destroy;
use crate::diff::{self, softmax_backward};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TauSchedule {
    Constant,
    /// Geometric interpolation from `tau` to `final_tau` over `steps`.
    Exponential { final_tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub tau: f64,
    pub tau_schedule: TauSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Destruction rate of the training masks.
    pub rho: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 2000,
            tau: 1.0,
            tau_schedule: TauSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rho: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("temperature {}", self.tau)));
        }
        if let TauSchedule::Exponential { final_tau } = self.tau_schedule {
            if !(final_tau > 0.0) {
                return Err(Error::Parameter(format!("final temperature {final_tau}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Parameter(format!("rho {} outside (0, 1]", self.rho)));
        }
        Ok(())
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        match self.tau_schedule {
            TauSchedule::Constant => self.tau,
            TauSchedule::Exponential { final_tau } => {
                let frac = if self.steps <= 1 {
                    1.0
                } else {
                    (step.min(self.steps - 1)) as f64 / (self.steps - 1) as f64
                };
                self.tau * (final_tau / self.tau).powf(frac)
            }
        }
    }
}

/// One training state: current values, destroy flags and Gumbel noise for
/// every logit.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub values: Vec<usize>,
    pub mask: Vec<bool>,
    pub noise: Array2<f64>,
}

impl TrainSample {
    pub fn random<R: Rng + ?Sized>(instance: &CspInstance, rho: f64, rng: &mut R) -> Self {
        let values = csp::random_assignment(instance, rng).into_inner();
        let mask = destroy::bernoulli_mask(instance, &vec![rho; instance.n()], rng).into_flags();
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale");
        let noise = Array2::from_shape_simple_fn((instance.n(), instance.domain_size()), || gumbel.sample(rng));
        TrainSample { values, mask, noise }
    }
}

/// Loss of one sample and its gradient with respect to every parameter.
pub fn sample_loss_and_grad(
    model: &RepairModel,
    instance: &CspInstance,
    sample: &TrainSample,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; model.num_params()];
    let loss = accumulate_sample(model, instance, sample, tau, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_sample(
    model: &RepairModel,
    instance: &CspInstance,
    sample: &TrainSample,
    tau: f64,
    grads: &mut [f64],
) -> Result<f64> {
    model.check_compatible(instance)?;
    let conflicts = model.conflict_input(instance, &sample.values);
    let input = TokenInput {
        values: &sample.values,
        mask: &sample.mask,
        conflicts: &conflicts,
    };
    let (logits, cache) = model.forward_cached(input)?;
    let (n, d) = logits.dim();
    let mut q = Array2::zeros((n, d));
    let mut active = Vec::new();
    for i in 0..n {
        if sample.mask[i] && !instance.is_fixed(i) {
            let s = gumbel_softmax_with_noise(logits.row(i), sample.noise.row(i), tau)?;
            q.row_mut(i).assign(&s.soft);
            active.push(i);
        } else {
            q[[i, sample.values[i]]] = 1.0;
        }
    }
    let loss = csp::loss_raw(instance, q.view());
    let dq = diff::loss_grad_raw(instance, q.view());
    let mut dlogits = Array2::zeros((n, d));
    for &i in &active {
        let qi = q.row(i).insert_axis(Axis(0));
        let gi = dq.row(i).insert_axis(Axis(0));
        let dz = softmax_backward(qi, gi) / tau;
        dlogits.row_mut(i).assign(&dz.row(0));
    }
    model.backward(input, &cache, dlogits.view(), grads);
    Ok(loss)
}

/// A model together with its adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: RepairModel,
    cfg: TrainConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: usize,
}

impl Trainer {
    pub fn new(model: RepairModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = model.num_params();
        Ok(Trainer {
            model,
            cfg,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        })
    }

    pub fn model(&self) -> &RepairModel {
        &self.model
    }

    pub fn into_model(self) -> RepairModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer update on a batch; returns the mean sample loss.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[&CspInstance], rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty training batch".into()));
        }
        let tau = self.cfg.tau_at(self.step);
        let mut grads = vec![0.0; self.model.num_params()];
        let mut total = 0.0;
        for instance in batch {
            let sample = TrainSample::random(instance, self.cfg.rho, rng);
            total += accumulate_sample(&self.model, instance, &sample, tau, &mut grads)?;
        }
        let scale = 1.0 / batch.len() as f64;
        let loss = total * scale;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingFault(format!("non-finite loss or gradient at step {}", self.step)));
        }
        self.step += 1;
        self.apply_adam(&grads, scale);
        Ok(loss)
    }

    fn apply_adam(&mut self, grads: &[f64], scale: f64) {
        let TrainConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            ..
        } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let params = self.model.params_mut();
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let g = g * scale;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }

    /// Runs `cfg.steps` updates on batches drawn uniformly (with
    /// replacement) from `dataset`, calling `on_step(step, loss)` after each.
    pub fn fit<R, F>(&mut self, dataset: &[CspInstance], rng: &mut R, mut on_step: F) -> Result<Vec<f64>>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, f64),
    {
        if dataset.is_empty() {
            return Err(Error::Parameter("empty training set".into()));
        }
        let mut history = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            let batch: Vec<&CspInstance> = (0..self.cfg.batch_size)
                .map(|_| dataset.choose(rng).expect("nonempty"))
                .collect();
            let loss = self.train_step(&batch, rng)?;
            on_step(step, loss);
            history.push(loss);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csp::{Constraint, ProblemKind};
    use crate::diff::{central_difference, max_relative_error};
    use crate::model::ModelConfig;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> CspInstance {
        CspInstance::new(ProblemKind::GraphColoring, 2, 2, vec![Constraint::not_equal(0, 1)], vec![None; 2]).unwrap()
    }

    fn small(width: usize) -> ModelConfig {
        ModelConfig {
            num_values: 2,
            width,
            heads: 2,
            blocks: 1,
            max_len: 4,
            ff_width: 2 * width,
            positional: true,
            conflict_feature: false,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = RepairModel::new(small(8), &mut rng).unwrap();
        let before = model.params().to_vec();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let inst = pair();
        for _ in 0..5 {
            trainer.train_step(&[&inst, &inst], &mut rng).unwrap();
        }
        let after = trainer.model().params();
        assert!(before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn output_head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = pair();
        let model = RepairModel::new(small(4), &mut rng).unwrap();
        let sample = TrainSample {
            values: vec![0, 0],
            mask: vec![true, true],
            noise: Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0)),
        };
        let (_, grads) = sample_loss_and_grad(&model, &inst, &sample, 1.0).unwrap();
        let head = model.layout().tensor("output_head").unwrap();
        let point = Array2::from_shape_vec((head.rows, head.cols), model.params()[head.range()].to_vec()).unwrap();
        let numeric = central_difference(
            |p| {
                let mut m = model.clone();
                m.params_mut()[head.range()].copy_from_slice(p.as_slice().unwrap());
                sample_loss_and_grad(&m, &inst, &sample, 1.0).unwrap().0
            },
            &point,
            1e-5,
        );
        let err = max_relative_error(grads[head.range()].iter(), numeric.iter());
        assert!(err <= 1e-3, "relative error {err}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = RepairModel::new(small(4), &mut rng).unwrap();
        let mut trainer = Trainer::new(model, TrainConfig::default()).unwrap();
        assert!(trainer.train_step(&[], &mut rng).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let model = RepairModel::zeros(small(4)).unwrap();
        for cfg in [
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(Trainer::new(model.clone(), cfg).is_err());
        }
    }

    #[test]
    fn exponential_schedule_interpolates() {
        let cfg = TrainConfig {
            tau: 2.0,
            steps: 11,
            tau_schedule: TauSchedule::Exponential { final_tau: 0.5 },
            ..TrainConfig::default()
        };
        assert_eq!(cfg.tau_at(0), 2.0);
        assert!((cfg.tau_at(10) - 0.5).abs() < 1e-12);
        assert!((cfg.tau_at(5) - 1.0).abs() < 1e-12);
    }
}
