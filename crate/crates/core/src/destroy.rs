//! Destroy operators: choose the variables the repair step may change.
//!
//! All operators exclude fixed variables, never return an empty selection
//! while a free variable exists, and target a destroyed fraction `rho` of the
//! free variables. Greedy variants select `ceil(rho * n_free)` variables with
//! ties broken by ascending index; stochastic variants draw independent
//! Bernoulli flags whose mean probability matches `rho`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::csp::{Assignment, CspInstance, PenaltyReport};
use crate::diff::{self, softmax_rows, LogitMatrix};
use crate::error::{Error, Result};

const RESAMPLE_LIMIT: usize = 16;
const BISECTION_ROUNDS: usize = 20;
const RATE_TOL: f64 = 1e-3;

/// Selection flags `m`; fixed variables are never flagged.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DestroyMask(Vec<bool>);

impl DestroyMask {
    /// Builds a mask, clearing any flag set on a fixed variable.
    pub fn new(instance: &CspInstance, mut flags: Vec<bool>) -> Result<Self> {
        if flags.len() != instance.n() {
            return Err(Error::Structural(format!(
                "mask has length {} but instance has {} variables",
                flags.len(),
                instance.n()
            )));
        }
        for (i, f) in flags.iter_mut().enumerate() {
            if instance.is_fixed(i) {
                *f = false;
            }
        }
        Ok(DestroyMask(flags))
    }

    /// Wraps raw flags without clearing fixed variables. Repair operators
    /// still never change a fixed variable.
    pub fn from_flags(flags: Vec<bool>) -> Self {
        DestroyMask(flags)
    }

    /// All-false mask of length `n`.
    pub fn empty(n: usize) -> Self {
        DestroyMask(vec![false; n])
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn into_flags(self) -> Vec<bool> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.0[i]
    }

    /// Size of the destroy set.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
    }
}

/// Solver state visible to a destroy operator.
#[derive(Debug, Clone, Copy)]
pub struct DestroyContext<'a> {
    pub instance: &'a CspInstance,
    pub x: &'a Assignment,
    pub rho: f64,
    /// Logits of the previous repair pass; absent on the first iteration.
    pub logits: Option<&'a LogitMatrix>,
    /// Penalties of the one-hot encoding of `x`.
    pub report: &'a PenaltyReport,
}

impl DestroyContext<'_> {
    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Parameter(format!("rho {} outside (0, 1]", self.rho)));
        }
        if self.x.len() != self.instance.n() {
            return Err(Error::Structural("assignment length mismatch".into()));
        }
        if self.report.per_constraint.len() != self.instance.constraints().len() {
            return Err(Error::Structural("penalty report does not match instance".into()));
        }
        if let Some(z) = self.logits {
            if z.as_array().dim() != (self.instance.n(), self.instance.domain_size()) {
                return Err(Error::Structural(format!(
                    "logits have shape {:?}",
                    z.as_array().dim()
                )));
            }
        }
        Ok(())
    }

    fn free(&self) -> Vec<bool> {
        (0..self.instance.n()).map(|i| !self.instance.is_fixed(i)).collect()
    }

    /// `ceil(rho * n_free)`, capped at `n_free`.
    pub fn greedy_size(&self) -> usize {
        greedy_size(self.rho, self.instance.free_count())
    }
}

pub(crate) fn greedy_size(rho: f64, n_free: usize) -> usize {
    ((rho * n_free as f64 - 1e-9).ceil().max(0.0) as usize).min(n_free)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DestroyOperator {
    Random,
    WorstGreedy,
    WorstStochastic,
    RelatedGreedy,
    RelatedStochastic,
    GradientGreedy,
    GradientStochastic,
    ConfidenceGreedy,
    ConfidenceStochastic,
}

impl DestroyOperator {
    pub const ALL: [DestroyOperator; 9] = [
        DestroyOperator::Random,
        DestroyOperator::WorstGreedy,
        DestroyOperator::WorstStochastic,
        DestroyOperator::RelatedGreedy,
        DestroyOperator::RelatedStochastic,
        DestroyOperator::GradientGreedy,
        DestroyOperator::GradientStochastic,
        DestroyOperator::ConfidenceGreedy,
        DestroyOperator::ConfidenceStochastic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DestroyOperator::Random => "random",
            DestroyOperator::WorstGreedy => "worst-greedy",
            DestroyOperator::WorstStochastic => "worst-stochastic",
            DestroyOperator::RelatedGreedy => "related-greedy",
            DestroyOperator::RelatedStochastic => "related-stochastic",
            DestroyOperator::GradientGreedy => "gradient-greedy",
            DestroyOperator::GradientStochastic => "gradient-stochastic",
            DestroyOperator::ConfidenceGreedy => "confidence-greedy",
            DestroyOperator::ConfidenceStochastic => "confidence-stochastic",
        }
    }

    pub fn is_greedy(self) -> bool {
        matches!(
            self,
            DestroyOperator::WorstGreedy
                | DestroyOperator::RelatedGreedy
                | DestroyOperator::GradientGreedy
                | DestroyOperator::ConfidenceGreedy
        )
    }

    /// Whether the operator reads the previous iteration's logits.
    pub fn uses_logits(self) -> bool {
        matches!(
            self,
            DestroyOperator::GradientGreedy
                | DestroyOperator::GradientStochastic
                | DestroyOperator::ConfidenceGreedy
                | DestroyOperator::ConfidenceStochastic
        )
    }

    pub fn apply<R: Rng + ?Sized>(self, ctx: &DestroyContext<'_>, rng: &mut R) -> Result<DestroyMask> {
        ctx.validate()?;
        Ok(match self {
            DestroyOperator::Random => random_destroy(ctx, rng),
            DestroyOperator::WorstGreedy => worst_greedy(ctx),
            DestroyOperator::WorstStochastic => worst_stochastic(ctx, rng),
            DestroyOperator::RelatedGreedy => related_greedy(ctx),
            DestroyOperator::RelatedStochastic => related_stochastic(ctx, rng),
            DestroyOperator::GradientGreedy => gradient_greedy(ctx, rng),
            DestroyOperator::GradientStochastic => gradient_stochastic(ctx, rng),
            DestroyOperator::ConfidenceGreedy => confidence_greedy(ctx, rng),
            DestroyOperator::ConfidenceStochastic => confidence_stochastic(ctx, rng),
        })
    }
}

impl fmt::Display for DestroyOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DestroyOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DestroyOperator::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown destroy operator `{s}`")))
    }
}

/// Scales nonnegative `scores` into probabilities whose mean over the free
/// variables is `rho`: `pi = clamp(c * s, 0, 1)` with `c` found by bisection.
/// Fixed variables get probability zero. If every positive score saturates
/// at one before the mean reaches `rho`, the saturated vector is returned.
///
/// Returns `None` when no free variable has a positive score.
pub fn normalize_scores_to_rate(scores: &[f64], rho: f64, free: &[bool]) -> Option<Vec<f64>> {
    let n_free = free.iter().filter(|&&f| f).count();
    let sum: f64 = scores.iter().zip(free).filter(|(_, &f)| f).map(|(s, _)| s.max(0.0)).sum();
    if n_free == 0 || !(sum > 0.0) {
        return None;
    }
    let probs = |c: f64| -> Vec<f64> {
        scores
            .iter()
            .zip(free)
            .map(|(&s, &f)| if f { (c * s.max(0.0)).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    };
    let mean = |p: &[f64]| p.iter().sum::<f64>() / n_free as f64;

    // Without clamping this scale hits the rate exactly.
    let mut lo = rho * n_free as f64 / sum;
    let first = probs(lo);
    if mean(&first) >= rho - RATE_TOL {
        return Some(first);
    }
    let min_positive = scores
        .iter()
        .zip(free)
        .filter(|(&s, &f)| f && s > 0.0)
        .map(|(&s, _)| s)
        .fold(f64::INFINITY, f64::min);
    let saturation = 1.0 / min_positive;
    let mut hi = lo;
    while hi < saturation {
        hi = (2.0 * hi).min(saturation);
        if mean(&probs(hi)) > rho {
            break;
        }
        lo = hi;
    }
    let top = probs(hi);
    if mean(&top) <= rho {
        return Some(top);
    }
    let mut best = probs(lo);
    for _ in 0..BISECTION_ROUNDS {
        let mid = 0.5 * (lo + hi);
        let p = probs(mid);
        let m = mean(&p);
        if m <= rho {
            lo = mid;
            best = p;
            if rho - m <= RATE_TOL {
                break;
            }
        } else {
            hi = mid;
        }
    }
    Some(best)
}

/// Independent Bernoulli draws over free variables, resampled when empty.
pub(crate) fn bernoulli_mask<R: Rng + ?Sized>(instance: &CspInstance, probs: &[f64], rng: &mut R) -> DestroyMask {
    let n = instance.n();
    let free: Vec<usize> = (0..n).filter(|&i| !instance.is_fixed(i)).collect();
    let mut flags = vec![false; n];
    if free.is_empty() {
        return DestroyMask(flags);
    }
    for _ in 0..=RESAMPLE_LIMIT {
        for &i in &free {
            flags[i] = rng.random_bool(probs[i].clamp(0.0, 1.0));
        }
        if free.iter().any(|&i| flags[i]) {
            return DestroyMask(flags);
        }
    }
    flags[free[rng.random_range(0..free.len())]] = true;
    DestroyMask(flags)
}

/// Free variables ordered by `key` (ascending, ties by index), first `k`.
fn take_sorted_free(instance: &CspInstance, k: usize, key: impl Fn(usize) -> f64) -> DestroyMask {
    let mut order: Vec<usize> = (0..instance.n()).filter(|&i| !instance.is_fixed(i)).collect();
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    let mut flags = vec![false; instance.n()];
    for &i in order.iter().take(k) {
        flags[i] = true;
    }
    DestroyMask(flags)
}

fn top_scores(ctx: &DestroyContext<'_>, scores: &[f64]) -> DestroyMask {
    take_sorted_free(ctx.instance, ctx.greedy_size(), |i| -scores[i])
}

fn sample_from_scores<R: Rng + ?Sized>(ctx: &DestroyContext<'_>, scores: &[f64], rng: &mut R) -> DestroyMask {
    match normalize_scores_to_rate(scores, ctx.rho, &ctx.free()) {
        Some(pi) => bernoulli_mask(ctx.instance, &pi, rng),
        None => random_destroy(ctx, rng),
    }
}

pub fn random_destroy<R: Rng + ?Sized>(ctx: &DestroyContext<'_>, rng: &mut R) -> DestroyMask {
    bernoulli_mask(ctx.instance, &vec![ctx.rho; ctx.instance.n()], rng)
}

pub fn worst_greedy(ctx: &DestroyContext<'_>) -> DestroyMask {
    let v = diff::variable_violation_scores(ctx.instance, ctx.x);
    top_scores(ctx, &v)
}

pub fn worst_stochastic<R: Rng + ?Sized>(ctx: &DestroyContext<'_>, rng: &mut R) -> DestroyMask {
    let v = diff::variable_violation_scores(ctx.instance, ctx.x);
    sample_from_scores(ctx, &v, rng)
}

/// Per-constraint selection rate `rho * n / (mean_arity * m)`, in (0, 1].
pub fn related_constraint_rate(instance: &CspInstance, rho: f64) -> f64 {
    let m = instance.constraints().len();
    if m == 0 {
        return rho;
    }
    let mean_arity = instance.constraints().iter().map(|c| c.scope.len()).sum::<usize>() as f64 / m as f64;
    (rho * instance.n() as f64 / (mean_arity * m as f64)).min(1.0)
}

fn union_of_scopes(instance: &CspInstance, chosen: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut flags = vec![false; instance.n()];
    for k in chosen {
        for &i in &instance.constraints()[k].scope {
            if !instance.is_fixed(i) {
                flags[i] = true;
            }
        }
    }
    flags
}

pub fn related_stochastic<R: Rng + ?Sized>(ctx: &DestroyContext<'_>, rng: &mut R) -> DestroyMask {
    let m = ctx.instance.constraints().len();
    if m == 0 {
        return random_destroy(ctx, rng);
    }
    let rate = related_constraint_rate(ctx.instance, ctx.rho);
    for _ in 0..=RESAMPLE_LIMIT {
        let chosen: Vec<usize> = (0..m).filter(|_| rng.random_bool(rate)).collect();
        let flags = union_of_scopes(ctx.instance, chosen);
        if flags.iter().any(|&f| f) {
            return DestroyMask(flags);
        }
    }
    random_destroy(ctx, rng)
}

/// Constraints in decreasing penalty order (ties by index) until their
/// scope union covers `ceil(rho * n_free)` free variables.
pub fn related_greedy(ctx: &DestroyContext<'_>) -> DestroyMask {
    let instance = ctx.instance;
    let target = ctx.greedy_size();
    let p = &ctx.report.per_constraint;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut flags = vec![false; instance.n()];
    let mut covered = 0;
    for k in order {
        if covered >= target {
            break;
        }
        for &i in &instance.constraints()[k].scope {
            if !instance.is_fixed(i) && !flags[i] {
                flags[i] = true;
                covered += 1;
            }
        }
    }
    if covered == 0 {
        // free variables outside every constraint scope
        if let Some(i) = (0..instance.n()).find(|&i| !instance.is_fixed(i)) {
            flags[i] = true;
        }
    }
    DestroyMask(flags)
}

/// `||dL(softmax(z))/dz_i||_1` per variable, if logits are available.
pub fn gradient_scores(ctx: &DestroyContext<'_>) -> Option<Vec<f64>> {
    let z = ctx.logits?;
    Some(diff::loss_grad_wrt_logits(ctx.instance, z).row_l1())
}

fn has_positive_free(ctx: &DestroyContext<'_>, scores: &[f64]) -> bool {
    scores.iter().enumerate().any(|(i, &s)| s > 0.0 && !ctx.instance.is_fixed(i))
}

pub fn gradient_greedy<R: Rng + ?Sized>(ctx: &DestroyContext<'_>, rng: &mut R) -> DestroyMask {
    match gradient_scores(ctx) {
        Some(s) if has_positive_free(ctx, &s) => top_scores(ctx, &s),
        _ => random_destroy(ctx, rng),
    }
}

pub fn gradient_stochastic<R: Rng + ?Sized>(ctx: &DestroyContext<'_>, rng: &mut R) -> DestroyMask {
    match gradient_scores(ctx) {
        Some(s) => sample_from_scores(ctx, &s, rng),
        None => random_destroy(ctx, rng),
    }
}

/// Gap between the two largest probabilities of each `softmax(z_i)`.
pub fn confidence_margins(z: &LogitMatrix) -> Vec<f64> {
    let q = softmax_rows(z.as_array().view());
    q.rows()
        .into_iter()
        .map(|row| {
            let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &p in row {
                if p > top {
                    second = top;
                    top = p;
                } else if p > second {
                    second = p;
                }
            }
            if second.is_finite() {
                top - second
            } else {
                1.0
            }
        })
        .collect()
}

pub fn confidence_greedy<R: Rng + ?Sized>(ctx: &DestroyContext<'_>, rng: &mut R) -> DestroyMask {
    match ctx.logits {
        Some(z) => {
            let margins = confidence_margins(z);
            take_sorted_free(ctx.instance, ctx.greedy_size(), |i| margins[i])
        }
        None => random_destroy(ctx, rng),
    }
}

pub fn confidence_stochastic<R: Rng + ?Sized>(ctx: &DestroyContext<'_>, rng: &mut R) -> DestroyMask {
    match ctx.logits {
        Some(z) => {
            let scores: Vec<f64> = confidence_margins(z).into_iter().map(|m| 1.0 - m).collect();
            sample_from_scores(ctx, &scores, rng)
        }
        None => random_destroy(ctx, rng),
    }
}
