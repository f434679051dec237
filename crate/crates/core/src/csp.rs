//! Finite-domain CSP instances, hard feasibility and the soft penalty loss.
//!
//! Every problem handled here has a homogeneous domain `{0, .., d-1}` (value
//! indices; Sudoku digits are `index + 1`). Constraints are either
//! `AllDifferent` over a scope or binary `NotEqual`.
//!
//! The soft penalty of a constraint on a soft assignment `q` is the expected
//! number of co-equal pairs in its scope, `p = sum_{i<j} <q_i, q_j>`, and the
//! loss is `L = sum_k w_k * p_k^2`. On one-hot rows `p_k` counts duplicate
//! pairs, so `L = 0` exactly when the assignment is feasible.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::SoftAssignment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Sudoku,
    GraphColoring,
    MaxCut,
}

impl ProblemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Sudoku => "sudoku",
            ProblemKind::GraphColoring => "graph-coloring",
            ProblemKind::MaxCut => "max-cut",
        }
    }

    pub fn is_graph(self) -> bool {
        !matches!(self, ProblemKind::Sudoku)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    AllDifferent,
    NotEqual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub scope: Vec<usize>,
    pub weight: f64,
}

impl Constraint {
    pub fn not_equal(a: usize, b: usize) -> Self {
        Constraint {
            kind: ConstraintKind::NotEqual,
            scope: vec![a, b],
            weight: 1.0,
        }
    }

    pub fn all_different(scope: Vec<usize>) -> Self {
        Constraint {
            kind: ConstraintKind::AllDifferent,
            scope,
            weight: 1.0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    /// True when the discrete values on the scope violate the relation.
    pub fn is_violated(&self, values: &[usize]) -> bool {
        match self.kind {
            ConstraintKind::NotEqual => values[self.scope[0]] == values[self.scope[1]],
            ConstraintKind::AllDifferent => {
                let s = &self.scope;
                (0..s.len()).any(|a| (a + 1..s.len()).any(|b| values[s[a]] == values[s[b]]))
            }
        }
    }

    /// Number of co-equal pairs under a discrete assignment; equals the soft
    /// penalty of the one-hot encoding.
    pub fn equal_pairs(&self, values: &[usize]) -> usize {
        let s = &self.scope;
        let mut count = 0;
        for a in 0..s.len() {
            for b in a + 1..s.len() {
                if values[s[a]] == values[s[b]] {
                    count += 1;
                }
            }
        }
        count
    }
}

/// A CSP `(X, D, C)` with optional fixed ("given") values.
#[derive(Debug, Clone, PartialEq)]
pub struct CspInstance {
    pub name: String,
    pub kind: ProblemKind,
    n: usize,
    domain_size: usize,
    constraints: Vec<Constraint>,
    givens: Vec<Option<usize>>,
    ground_truth: Option<Vec<usize>>,
    incidence: Vec<Vec<usize>>,
}

impl CspInstance {
    pub fn new(
        kind: ProblemKind,
        n: usize,
        domain_size: usize,
        constraints: Vec<Constraint>,
        givens: Vec<Option<usize>>,
    ) -> Result<Self> {
        if domain_size == 0 {
            return Err(Error::Structural("empty domain".into()));
        }
        if givens.len() != n {
            return Err(Error::Structural(format!(
                "givens has length {} but instance has {n} variables",
                givens.len()
            )));
        }
        for (i, g) in givens.iter().enumerate() {
            if let Some(v) = g {
                if *v >= domain_size {
                    return Err(Error::Structural(format!(
                        "given value {v} of variable {i} outside domain of size {domain_size}"
                    )));
                }
            }
        }
        for (k, c) in constraints.iter().enumerate() {
            if let Some(&bad) = c.scope.iter().find(|&&i| i >= n) {
                return Err(Error::Structural(format!(
                    "constraint {k} references variable {bad} but n = {n}"
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Structural(format!("constraint {k} has weight {}", c.weight)));
            }
            match c.kind {
                ConstraintKind::NotEqual if c.scope.len() != 2 => {
                    return Err(Error::Structural(format!("NotEqual constraint {k} is not binary")));
                }
                ConstraintKind::AllDifferent if c.scope.len() < 2 => {
                    return Err(Error::Structural(format!(
                        "AllDifferent constraint {k} has fewer than two variables"
                    )));
                }
                _ => {}
            }
            let allowed = match kind {
                ProblemKind::Sudoku => c.kind == ConstraintKind::AllDifferent,
                ProblemKind::GraphColoring | ProblemKind::MaxCut => c.kind == ConstraintKind::NotEqual,
            };
            if !allowed {
                return Err(Error::Structural(format!(
                    "{:?} constraint not allowed for {}",
                    c.kind,
                    kind.as_str()
                )));
            }
        }
        if kind == ProblemKind::MaxCut && domain_size != 2 {
            return Err(Error::Structural("max-cut requires a domain of size 2".into()));
        }
        let mut inst = CspInstance {
            name: String::new(),
            kind,
            n,
            domain_size,
            constraints,
            givens,
            ground_truth: None,
            incidence: Vec::new(),
        };
        inst.rebuild_incidence();
        Ok(inst)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Attaches a known solution. It must match the givens and be feasible.
    pub fn with_ground_truth(mut self, solution: Vec<usize>) -> Result<Self> {
        let x = Assignment::new(&self, solution)?;
        if eval_hard(&self, &x)?.0 != 0 {
            return Err(Error::Structural("ground truth violates a constraint".into()));
        }
        self.ground_truth = Some(x.0);
        Ok(self)
    }

    fn rebuild_incidence(&mut self) {
        let mut incidence = vec![Vec::new(); self.n];
        for (k, c) in self.constraints.iter().enumerate() {
            for &i in &c.scope {
                incidence[i].push(k);
            }
        }
        self.incidence = incidence;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn domain_size(&self) -> usize {
        self.domain_size
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn givens(&self) -> &[Option<usize>] {
        &self.givens
    }

    pub fn is_fixed(&self, i: usize) -> bool {
        self.givens[i].is_some()
    }

    pub fn free_count(&self) -> usize {
        self.givens.iter().filter(|g| g.is_none()).count()
    }

    pub fn ground_truth(&self) -> Option<&[usize]> {
        self.ground_truth.as_deref()
    }

    /// Indices of the constraints containing variable `i`.
    pub fn constraints_of(&self, i: usize) -> &[usize] {
        &self.incidence[i]
    }

    /// Returns a copy with the constraint list reordered; used to check
    /// order-independence of costs.
    pub fn with_constraint_order(&self, order: &[usize]) -> Result<Self> {
        let constraints = order
            .iter()
            .map(|&k| {
                self.constraints
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::Structural(format!("no constraint {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = self.clone();
        out.constraints = constraints;
        out.rebuild_incidence();
        Ok(out)
    }

    /// Number of edges for graph problems (one `NotEqual` per edge).
    pub fn edge_count(&self) -> usize {
        self.constraints.len()
    }
}

/// A complete assignment of value indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Assignment(Vec<usize>);

impl Assignment {
    pub fn new(instance: &CspInstance, values: Vec<usize>) -> Result<Self> {
        if values.len() != instance.n() {
            return Err(Error::Structural(format!(
                "assignment has length {} but instance has {} variables",
                values.len(),
                instance.n()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if v >= instance.domain_size() {
                return Err(Error::Structural(format!("value {v} of variable {i} out of domain")));
            }
            if let Some(g) = instance.givens()[i] {
                if g != v {
                    return Err(Error::Structural(format!(
                        "variable {i} is fixed to {g} but assigned {v}"
                    )));
                }
            }
        }
        Ok(Assignment(values))
    }

    /// Wraps values already known to be valid for their instance.
    pub(crate) fn from_vec_unchecked(values: Vec<usize>) -> Self {
        Assignment(values)
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyReport {
    pub per_constraint: Vec<f64>,
    pub total_loss: f64,
    /// Constraints violated by the row-wise argmax decoding of `q`.
    pub violated_count: usize,
}

fn check_len(instance: &CspInstance, x: &Assignment) -> Result<()> {
    if x.len() != instance.n() {
        return Err(Error::Structural(format!(
            "assignment has length {} but instance has {} variables",
            x.len(),
            instance.n()
        )));
    }
    Ok(())
}

/// Counts hard-violated constraints and lists their indices.
pub fn eval_hard(instance: &CspInstance, x: &Assignment) -> Result<(usize, Vec<usize>)> {
    check_len(instance, x)?;
    let values = x.values();
    let ids: Vec<usize> = instance
        .constraints()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_violated(values))
        .map(|(k, _)| k)
        .collect();
    Ok((ids.len(), ids))
}

/// Number of violated constraints. For max-cut this is the number of uncut
/// edges, so `cut_size = edges - cost`.
pub fn cost(instance: &CspInstance, x: &Assignment) -> usize {
    let values = x.values();
    instance.constraints().iter().filter(|c| c.is_violated(values)).count()
}

pub fn cut_size(instance: &CspInstance, x: &Assignment) -> usize {
    instance.edge_count() - cost(instance, x)
}

/// Per-variable count of violated constraints it participates in.
pub fn conflict_counts(instance: &CspInstance, values: &[usize]) -> Vec<usize> {
    let mut counts = vec![0; instance.n()];
    for c in instance.constraints() {
        if c.is_violated(values) {
            for &i in &c.scope {
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Givens take their fixed values; free variables are drawn uniformly.
pub fn random_assignment<R: Rng + ?Sized>(instance: &CspInstance, rng: &mut R) -> Assignment {
    let d = instance.domain_size();
    let values = instance
        .givens()
        .iter()
        .map(|g| g.unwrap_or_else(|| rng.random_range(0..d)))
        .collect();
    Assignment(values)
}

pub fn one_hot(instance: &CspInstance, x: &Assignment) -> SoftAssignment {
    let mut q = Array2::zeros((instance.n(), instance.domain_size()));
    for (i, &v) in x.values().iter().enumerate() {
        q[[i, v]] = 1.0;
    }
    SoftAssignment::from_array_unchecked(q)
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

/// Soft penalty over an arbitrary (not necessarily normalized) matrix.
pub(crate) fn penalty_raw(c: &Constraint, q: ArrayView2<f64>) -> f64 {
    let s = &c.scope;
    let mut p = 0.0;
    for a in 0..s.len() {
        let qa = q.row(s[a]);
        for b in a + 1..s.len() {
            p += dot(qa, q.row(s[b]));
        }
    }
    p
}

pub(crate) fn loss_raw(instance: &CspInstance, q: ArrayView2<f64>) -> f64 {
    instance
        .constraints()
        .iter()
        .map(|c| {
            let p = penalty_raw(c, q);
            c.weight * p * p
        })
        .sum()
}

/// Soft penalty `p` of a single constraint: expected number of co-equal
/// pairs in its scope under independent rows of `q`.
pub fn constraint_penalty(c: &Constraint, q: &SoftAssignment) -> Result<f64> {
    let arr = q.as_array();
    if let Some(&bad) = c.scope.iter().find(|&&i| i >= arr.nrows()) {
        return Err(Error::Structural(format!("scope index {bad} outside soft assignment")));
    }
    Ok(penalty_raw(c, arr.view()))
}

pub fn total_loss(instance: &CspInstance, q: &SoftAssignment) -> Result<PenaltyReport> {
    let arr = q.as_array();
    if arr.dim() != (instance.n(), instance.domain_size()) {
        return Err(Error::Structural(format!(
            "soft assignment is {:?}, expected {:?}",
            arr.dim(),
            (instance.n(), instance.domain_size())
        )));
    }
    let per_constraint: Vec<f64> = instance
        .constraints()
        .iter()
        .map(|c| penalty_raw(c, arr.view()))
        .collect();
    let total_loss = instance
        .constraints()
        .iter()
        .zip(&per_constraint)
        .map(|(c, p)| c.weight * p * p)
        .sum();
    let decoded = Assignment::from_vec_unchecked(q.argmax_rows());
    let violated_count = cost(instance, &decoded);
    Ok(PenaltyReport {
        per_constraint,
        total_loss,
        violated_count,
    })
}

/// Penalty report of the one-hot encoding of a discrete assignment, computed
/// without materializing the matrix.
pub fn discrete_report(instance: &CspInstance, x: &Assignment) -> PenaltyReport {
    let values = x.values();
    let per_constraint: Vec<f64> = instance
        .constraints()
        .iter()
        .map(|c| c.equal_pairs(values) as f64)
        .collect();
    let total_loss = instance
        .constraints()
        .iter()
        .zip(&per_constraint)
        .map(|(c, p)| c.weight * p * p)
        .sum();
    let violated_count = per_constraint.iter().filter(|&&p| p > 0.0).count();
    PenaltyReport {
        per_constraint,
        total_loss,
        violated_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn edge_instance(weight: f64) -> CspInstance {
        CspInstance::new(
            ProblemKind::GraphColoring,
            2,
            2,
            vec![Constraint::not_equal(0, 1).with_weight(weight)],
            vec![None; 2],
        )
        .unwrap()
    }

    fn sudoku4_constraints() -> Vec<Constraint> {
        let mut cs = Vec::new();
        for r in 0..4 {
            cs.push(Constraint::all_different((0..4).map(|c| r * 4 + c).collect()));
        }
        for c in 0..4 {
            cs.push(Constraint::all_different((0..4).map(|r| r * 4 + c).collect()));
        }
        for b in 0..4 {
            let (br, bc) = (b / 2 * 2, b % 2 * 2);
            cs.push(Constraint::all_different(
                (0..4).map(|k| (br + k / 2) * 4 + bc + k % 2).collect(),
            ));
        }
        cs
    }

    fn soft(rows: Array2<f64>) -> SoftAssignment {
        SoftAssignment::new(rows).unwrap()
    }

    #[test]
    fn valid_sudoku4_has_no_violations() {
        let inst = CspInstance::new(ProblemKind::Sudoku, 16, 4, sudoku4_constraints(), vec![None; 16]).unwrap();
        let grid = vec![0, 1, 2, 3, 2, 3, 0, 1, 1, 0, 3, 2, 3, 2, 1, 0];
        let x = Assignment::new(&inst, grid).unwrap();
        assert_eq!(eval_hard(&inst, &x).unwrap(), (0, vec![]));
    }

    #[test]
    fn equal_endpoints_violate_not_equal() {
        let inst = edge_instance(1.0);
        let x = Assignment::new(&inst, vec![1, 1]).unwrap();
        assert_eq!(eval_hard(&inst, &x).unwrap(), (1, vec![0]));
    }

    #[test]
    fn scan_matches_duplicate_oracle_on_random_9x9() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cs = Vec::new();
        for r in 0..9 {
            cs.push(Constraint::all_different((0..9).map(|c| r * 9 + c).collect()));
        }
        for c in 0..9 {
            cs.push(Constraint::all_different((0..9).map(|r| r * 9 + c).collect()));
        }
        for b in 0..9 {
            let (br, bc) = (b / 3 * 3, b % 3 * 3);
            cs.push(Constraint::all_different(
                (0..9).map(|k| (br + k / 3) * 9 + bc + k % 3).collect(),
            ));
        }
        let inst = CspInstance::new(ProblemKind::Sudoku, 81, 9, cs, vec![None; 81]).unwrap();
        for _ in 0..20 {
            let vals: Vec<usize> = (0..81).map(|_| rng.random_range(0..9)).collect();
            let x = Assignment::new(&inst, vals.clone()).unwrap();
            let oracle: Vec<usize> = inst
                .constraints()
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    let mut seen = [false; 9];
                    c.scope.iter().any(|&i| std::mem::replace(&mut seen[vals[i]], true))
                })
                .map(|(k, _)| k)
                .collect();
            assert_eq!(eval_hard(&inst, &x).unwrap().1, oracle);
        }
    }

    #[test]
    fn out_of_range_scope_is_structural() {
        let err = CspInstance::new(
            ProblemKind::GraphColoring,
            2,
            2,
            vec![Constraint::not_equal(0, 5)],
            vec![None; 2],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
    }

    #[test]
    fn kind_restricts_constraint_types() {
        let err = CspInstance::new(
            ProblemKind::Sudoku,
            2,
            2,
            vec![Constraint::not_equal(0, 1)],
            vec![None; 2],
        );
        assert!(err.is_err());
        let err = CspInstance::new(ProblemKind::MaxCut, 2, 3, vec![Constraint::not_equal(0, 1)], vec![None; 2]);
        assert!(err.is_err());
    }

    #[test]
    fn not_equal_penalty_cases() {
        let c = Constraint::not_equal(0, 1);
        let same = soft(array![[1.0, 0.0], [1.0, 0.0]]);
        let diff = soft(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(constraint_penalty(&c, &same).unwrap(), 1.0);
        assert_eq!(constraint_penalty(&c, &diff).unwrap(), 0.0);
        for k in 2..6 {
            let u = soft(Array2::from_elem((2, k), 1.0 / k as f64));
            assert!((constraint_penalty(&c, &u).unwrap() - 1.0 / k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_simple_cases() {
        let inst = edge_instance(1.0);
        let q = soft(array![[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(total_loss(&inst, &q).unwrap().total_loss, 1.0);
        let x = Assignment::new(&inst, vec![0, 1]).unwrap();
        let report = total_loss(&inst, &one_hot(&inst, &x)).unwrap();
        assert_eq!(report.total_loss, 0.0);
        assert_eq!(report.violated_count, 0);
    }

    #[test]
    fn triangle_loss_matches_edge_summation() {
        let edges = [(0, 1), (1, 2), (0, 2)];
        let cs = edges.iter().map(|&(a, b)| Constraint::not_equal(a, b).with_weight(0.5 + a as f64)).collect();
        let inst = CspInstance::new(ProblemKind::GraphColoring, 3, 3, cs, vec![None; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut q = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() + 1e-3);
            for mut row in q.rows_mut() {
                let s = row.sum();
                row /= s;
            }
            let oracle: f64 = edges
                .iter()
                .map(|&(a, b)| {
                    let p: f64 = (0..3).map(|v| q[[a, v]] * q[[b, v]]).sum();
                    (0.5 + a as f64) * p * p
                })
                .sum();
            let got = total_loss(&inst, &soft(q)).unwrap().total_loss;
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_rows() {
        let inst = CspInstance::new(ProblemKind::GraphColoring, 1, 4, vec![], vec![None]).unwrap();
        let x = Assignment::new(&inst, vec![2]).unwrap();
        let q = one_hot(&inst, &x);
        assert_eq!(q.as_array().row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(q.argmax_rows(), x.values());
    }

    #[test]
    fn fixed_assignment_must_respect_givens() {
        let inst = CspInstance::new(
            ProblemKind::GraphColoring,
            2,
            3,
            vec![Constraint::not_equal(0, 1)],
            vec![Some(2), None],
        )
        .unwrap();
        assert!(Assignment::new(&inst, vec![1, 0]).is_err());
        assert!(Assignment::new(&inst, vec![2, 0]).is_ok());
    }

    #[test]
    fn max_cut_single_edge() {
        let inst = CspInstance::new(ProblemKind::MaxCut, 2, 2, vec![Constraint::not_equal(0, 1)], vec![None; 2]).unwrap();
        let x = Assignment::new(&inst, vec![0, 1]).unwrap();
        assert_eq!(cost(&inst, &x), 0);
        assert_eq!(cut_size(&inst, &x), 1);
    }

    #[test]
    fn random_two_coloring_cost_matches_edge_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut edges = Vec::new();
        for a in 0..20 {
            for b in a + 1..20 {
                if rng.random_bool(0.2) {
                    edges.push((a, b));
                }
            }
        }
        let cs = edges.iter().map(|&(a, b)| Constraint::not_equal(a, b)).collect();
        let inst = CspInstance::new(ProblemKind::MaxCut, 20, 2, cs, vec![None; 20]).unwrap();
        for _ in 0..20 {
            let vals: Vec<usize> = (0..20).map(|_| rng.random_range(0..2)).collect();
            let oracle = edges.iter().filter(|&&(a, b)| vals[a] == vals[b]).count();
            let x = Assignment::new(&inst, vals).unwrap();
            assert_eq!(cost(&inst, &x), oracle);
            assert_eq!(cut_size(&inst, &x) + cost(&inst, &x), edges.len());
        }
    }

    #[test]
    fn discrete_report_matches_one_hot_loss() {
        let inst = CspInstance::new(ProblemKind::Sudoku, 16, 4, sudoku4_constraints(), vec![None; 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = Assignment::new(&inst, (0..16).map(|_| rng.random_range(0..4)).collect()).unwrap();
            let a = discrete_report(&inst, &x);
            let b = total_loss(&inst, &one_hot(&inst, &x)).unwrap();
            assert_eq!(a.per_constraint, b.per_constraint);
            assert_eq!(a.total_loss, b.total_loss);
            assert_eq!(a.violated_count, b.violated_count);
        }
    }
}
