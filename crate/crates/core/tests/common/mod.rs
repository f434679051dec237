#![allow(dead_code)]

use nlns_core::csp::{Constraint, CspInstance, ProblemKind};
use rand::seq::SliceRandom;
use rand::Rng;

/// Random instance of any kind, small enough for finite differences.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, max_n: usize) -> CspInstance {
    let kind = [ProblemKind::Sudoku, ProblemKind::GraphColoring, ProblemKind::MaxCut][rng.random_range(0..3)];
    let n = rng.random_range(3..=max_n.max(3));
    let d = match kind {
        ProblemKind::MaxCut => 2,
        _ => rng.random_range(2..=4),
    };
    let m = rng.random_range(1..=2 * n);
    let mut cs = Vec::with_capacity(m);
    for _ in 0..m {
        let c = if kind == ProblemKind::Sudoku {
            let arity = rng.random_range(2..=n.min(5));
            let mut vars: Vec<usize> = (0..n).collect();
            vars.shuffle(rng);
            vars.truncate(arity);
            Constraint::all_different(vars)
        } else {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            Constraint::not_equal(a, b)
        };
        let w = if rng.random_bool(0.3) { rng.random_range(0.5..2.0) } else { 1.0 };
        cs.push(c.with_weight(w));
    }
    let givens = (0..n)
        .map(|_| rng.random_bool(0.2).then(|| rng.random_range(0..d)))
        .collect();
    CspInstance::new(kind, n, d, cs, givens).expect("valid by construction")
}

/// Independent loss oracle: `sum_k w_k (sum_{i<j in scope} <q_i, q_j>)^2`.
pub fn oracle_loss(instance: &CspInstance, q: &[Vec<f64>]) -> f64 {
    instance
        .constraints()
        .iter()
        .map(|c| {
            let mut p = 0.0;
            for a in 0..c.scope.len() {
                for b in a + 1..c.scope.len() {
                    let (qi, qj) = (&q[c.scope[a]], &q[c.scope[b]]);
                    p += qi.iter().zip(qj).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            c.weight * p * p
        })
        .sum()
}

/// Independent hard-violation oracle by pairwise comparison.
pub fn oracle_violations(instance: &CspInstance, x: &[usize]) -> usize {
    instance
        .constraints()
        .iter()
        .filter(|c| {
            c.scope
                .iter()
                .enumerate()
                .any(|(a, &i)| c.scope[a + 1..].iter().any(|&j| x[i] == x[j]))
        })
        .count()
}

pub fn one_hot_rows(d: usize, x: &[usize]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|&v| (0..d).map(|j| if j == v { 1.0 } else { 0.0 }).collect())
        .collect()
}
