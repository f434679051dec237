//! Analytic gradients of the penalty loss.
//!
//! With `p_k = sum_{i<j in scope} <q_i, q_j>` and `L = sum_k w_k p_k^2`,
//! the derivative with respect to a row in the scope of `c_k` is
//! `2 w_k p_k (s_k - q_i)` where `s_k` is the sum of the scope's rows.
//! Logit gradients chain that through the row-wise softmax Jacobian.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::csp::{self, Assignment, CspInstance};
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-6;

/// Per-variable probability rows `q_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment(Array2<f64>);

impl SoftAssignment {
    pub fn new(q: Array2<f64>) -> Result<Self> {
        for (i, row) in q.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Domain(format!("row {i} has a negative or non-finite entry")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!("row {i} sums to {s}")));
            }
        }
        Ok(SoftAssignment(q))
    }

    pub(crate) fn from_array_unchecked(q: Array2<f64>) -> Self {
        SoftAssignment(q)
    }

    pub fn from_logits(z: &LogitMatrix) -> Self {
        SoftAssignment(softmax_rows(z.as_array().view()))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    /// Row-wise argmax, ties to the smallest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.0.rows().into_iter().map(argmax).collect()
    }
}

/// Pre-softmax scores `z_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(Array2<f64>);

impl LogitMatrix {
    pub fn new(z: Array2<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite logit".into()));
        }
        Ok(LogitMatrix(z))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMatrix(Array2<f64>);

impl GradMatrix {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// L1 norm of each row.
    pub fn row_l1(&self) -> Vec<f64> {
        self.0.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect()
    }
}

pub(crate) fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (v, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = v;
        }
    }
    best
}

pub(crate) fn softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = row.mapv(|v| (v - max).exp());
    let s = out.sum();
    out /= s;
    out
}

pub(crate) fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(z.dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&softmax_row(row));
    }
    out
}

/// `dL/dq` for an arbitrary matrix `q` (rows need not be normalized).
pub(crate) fn loss_grad_raw(instance: &CspInstance, q: ArrayView2<f64>) -> Array2<f64> {
    let mut grad = Array2::zeros(q.dim());
    let d = q.ncols();
    let mut scope_sum = Array1::zeros(d);
    for c in instance.constraints() {
        let p = csp::penalty_raw(c, q);
        if p == 0.0 {
            continue;
        }
        let coef = 2.0 * c.weight * p;
        scope_sum.fill(0.0);
        for &i in &c.scope {
            scope_sum += &q.row(i);
        }
        for &i in &c.scope {
            let mut g = grad.row_mut(i);
            g.scaled_add(coef, &scope_sum);
            g.scaled_add(-coef, &q.row(i));
        }
    }
    grad
}

/// Chains an upstream `dL/dq` through `q = softmax(z)` row-wise.
pub(crate) fn softmax_backward(q: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Array2<f64> {
    let inner = (&q * &upstream).sum_axis(Axis(1));
    let mut out = upstream.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row -= inner[i];
        row *= &q.row(i);
    }
    out
}

pub fn loss_grad_wrt_q(instance: &CspInstance, q: &SoftAssignment) -> GradMatrix {
    GradMatrix(loss_grad_raw(instance, q.as_array().view()))
}

/// `v_i = || dL(onehot(x)) / d onehot(x)_i ||_1`.
pub fn variable_violation_scores(instance: &CspInstance, x: &Assignment) -> Vec<f64> {
    let q = csp::one_hot(instance, x);
    loss_grad_wrt_q(instance, &q).row_l1()
}

pub fn loss_grad_wrt_logits(instance: &CspInstance, z: &LogitMatrix) -> GradMatrix {
    let q = softmax_rows(z.as_array().view());
    let dq = loss_grad_raw(instance, q.view());
    GradMatrix(softmax_backward(q.view(), dq.view()))
}

/// Where to evaluate a gradient check.
#[derive(Debug, Clone, Copy)]
pub enum GradPoint<'a> {
    /// A (possibly unnormalized) probability matrix; checks `dL/dq`.
    Probabilities(&'a Array2<f64>),
    /// Logits; checks `dL(softmax(z))/dz`.
    Logits(&'a Array2<f64>),
}

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn central_difference<F>(f: F, point: &Array2<f64>, h: f64) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> f64,
{
    let mut probe = point.clone();
    let mut out = Array2::zeros(point.dim());
    for idx in ndarray::indices(point.dim()) {
        let base = point[idx];
        probe[idx] = base + h;
        let up = f(&probe);
        probe[idx] = base - h;
        let down = f(&probe);
        probe[idx] = base;
        out[idx] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest entrywise `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn max_relative_error<'a>(
    analytic: impl IntoIterator<Item = &'a f64>,
    numeric: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient with central differences of step `h`.
pub fn finite_diff_check(instance: &CspInstance, point: GradPoint<'_>, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let (analytic, numeric) = match point {
        GradPoint::Probabilities(q) => (
            loss_grad_raw(instance, q.view()),
            central_difference(|p| csp::loss_raw(instance, p.view()), q, h),
        ),
        GradPoint::Logits(z) => {
            let analytic = loss_grad_wrt_logits(instance, &LogitMatrix(z.clone())).into_inner();
            let numeric = central_difference(
                |p| csp::loss_raw(instance, softmax_rows(p.view()).view()),
                z,
                h,
            );
            (analytic, numeric)
        }
    };
    Ok(max_relative_error(analytic.iter(), numeric.iter()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csp::{Constraint, ProblemKind};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(d: usize) -> CspInstance {
        CspInstance::new(ProblemKind::GraphColoring, 2, d, vec![Constraint::not_equal(0, 1)], vec![None; 2]).unwrap()
    }

    fn triangle() -> CspInstance {
        let cs = vec![Constraint::not_equal(0, 1), Constraint::not_equal(1, 2), Constraint::not_equal(0, 2)];
        CspInstance::new(ProblemKind::GraphColoring, 3, 3, cs, vec![None; 3]).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let mut q = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() + 0.05);
        for mut r in q.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        q
    }

    #[test]
    fn feasible_one_hot_has_zero_gradient() {
        let inst = triangle();
        let x = Assignment::new(&inst, vec![0, 1, 2]).unwrap();
        let g = loss_grad_wrt_q(&inst, &csp::one_hot(&inst, &x));
        assert!(g.as_array().iter().all(|&v| v == 0.0));
        assert_eq!(variable_violation_scores(&inst, &x), vec![0.0; 3]);
    }

    #[test]
    fn hand_expanded_not_equal_gradient() {
        let inst = pair(2);
        let q = SoftAssignment::new(array![[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let g = loss_grad_wrt_q(&inst, &q);
        assert_eq!(g.as_array().row(0).to_vec(), vec![2.0, 0.0]);
        assert_eq!(g.as_array().row(1).to_vec(), vec![2.0, 0.0]);
        let x = Assignment::new(&inst, vec![0, 0]).unwrap();
        assert_eq!(variable_violation_scores(&inst, &x), vec![2.0, 2.0]);
    }

    #[test]
    fn triangle_q_gradient_matches_finite_differences() {
        let inst = triangle();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let q = random_rows(&mut rng, 3, 3);
            let err = finite_diff_check(&inst, GradPoint::Probabilities(&q), 1e-5).unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn logit_gradient_hand_chain() {
        // variable 0 free, variable 1 fixed to value 0, d = 2, z_0 = (0, 0)
        let inst = CspInstance::new(
            ProblemKind::GraphColoring,
            2,
            2,
            vec![Constraint::not_equal(0, 1)],
            vec![None, Some(0)],
        )
        .unwrap();
        let z = LogitMatrix::new(array![[0.0, 0.0], [50.0, -50.0]]).unwrap();
        let g = loss_grad_wrt_logits(&inst, &z);
        // q0 = (1/2, 1/2), q1 ~ (1, 0): p = 1/2, dL/dq0 = 2p * q1 = (1, 0),
        // dL/dz0 = q0 * (dq - <dq, q0>) = (1/2 * 1/2, 1/2 * -1/2)
        let row = g.as_array().row(0);
        assert!((row[0] - 0.25).abs() < 1e-12);
        assert!((row[1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_loss_point_gives_zero_logit_gradient() {
        let inst = pair(2);
        let z = LogitMatrix::new(array![[800.0, 0.0], [0.0, 800.0]]).unwrap();
        let g = loss_grad_wrt_logits(&inst, &z);
        assert!(g.as_array().iter().all(|&v| v == 0.0));
        let err = finite_diff_check(&inst, GradPoint::Logits(z.as_array()), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn logit_rows_sum_to_zero_and_match_fd() {
        let inst = triangle();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let z = Array2::from_shape_fn((3, 3), |_| rng.random_range(-2.0..2.0));
            let g = loss_grad_wrt_logits(&inst, &LogitMatrix::new(z.clone()).unwrap());
            for r in g.as_array().rows() {
                assert!(r.sum().abs() < 1e-12);
            }
            let err = finite_diff_check(&inst, GradPoint::Logits(&z), 1e-5).unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let inst = triangle();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_rows(&mut rng, 3, 3);
        let mut analytic = loss_grad_raw(&inst, q.view());
        let numeric = central_difference(|p| csp::loss_raw(&inst, p.view()), &q, 1e-5);
        assert!(max_relative_error(analytic.iter(), numeric.iter()) <= 1e-4);
        analytic[[1, 2]] += 0.1;
        assert!(max_relative_error(analytic.iter(), numeric.iter()) > 1e-2);
    }

    #[test]
    fn doubling_weights_doubles_gradients() {
        let base = triangle();
        let doubled = CspInstance::new(
            ProblemKind::GraphColoring,
            3,
            3,
            base.constraints().iter().cloned().map(|c| c.with_weight(2.0)).collect(),
            vec![None; 3],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = SoftAssignment::new(random_rows(&mut rng, 3, 3)).unwrap();
        let a = loss_grad_wrt_q(&base, &q);
        let b = loss_grad_wrt_q(&doubled, &q);
        for (x, y) in a.as_array().iter().zip(b.as_array()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn rejects_bad_rows_and_steps() {
        assert!(SoftAssignment::new(array![[0.5, 0.6]]).is_err());
        assert!(SoftAssignment::new(array![[1.5, -0.5]]).is_err());
        let q = array![[0.5, 0.5], [0.5, 0.5]];
        assert!(finite_diff_check(&pair(2), GradPoint::Probabilities(&q), 0.0).is_err());
    }
}
