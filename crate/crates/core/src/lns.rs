//! The LNS loop: destroy, forward, repair, always accept, keep the best.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::csp::{self, discrete_report, Assignment, CspInstance, ProblemKind};
use crate::destroy::{DestroyContext, DestroyOperator};
use crate::diff::LogitMatrix;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RepairModel};
use crate::repair::RepairOperator;

#[derive(Debug, Clone, PartialEq)]
pub struct LnsConfig {
    pub destroy: DestroyOperator,
    pub repair: RepairOperator,
    pub rho: f64,
    pub max_iterations: Option<usize>,
    pub time_limit: Option<Duration>,
    pub tau: f64,
    pub seed: u64,
    pub stop_on_feasible: bool,
}

impl Default for LnsConfig {
    fn default() -> Self {
        LnsConfig {
            destroy: DestroyOperator::Random,
            repair: RepairOperator::Sample,
            rho: 0.3,
            max_iterations: Some(2000),
            time_limit: None,
            tau: 1.0,
            seed: 0,
            stop_on_feasible: true,
        }
    }
}

impl LnsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho {} outside (0, 1]", self.rho)));
        }
        if self.max_iterations.is_none() && self.time_limit.is_none() {
            return Err(Error::Config("set an iteration budget or a time limit".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Trajectory of one run. Index `t` of each per-iteration vector describes
/// the state after `t` iterations, so index 0 is the initial assignment.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub costs: Vec<usize>,
    pub best_costs: Vec<usize>,
    pub best_assignment: Assignment,
    pub final_assignment: Assignment,
    pub iterations: usize,
    pub solved: bool,
    /// Fraction of all cells equal to the ground truth (givens included).
    pub cell_accuracy: Option<Vec<f64>>,
    /// Number of cut edges, max-cut only.
    pub cut_sizes: Option<Vec<usize>>,
    /// Wall time since the start of the run, in milliseconds.
    pub elapsed_ms: Vec<f64>,
}

impl RunRecord {
    pub fn best_cost(&self) -> usize {
        *self.best_costs.last().expect("record has the initial entry")
    }

    pub fn initial_cost(&self) -> usize {
        self.costs[0]
    }

    /// Equality of everything except timings.
    pub fn same_trajectory(&self, other: &RunRecord) -> bool {
        self.costs == other.costs
            && self.best_costs == other.best_costs
            && self.best_assignment == other.best_assignment
            && self.final_assignment == other.final_assignment
            && self.iterations == other.iterations
            && self.solved == other.solved
            && self.cell_accuracy == other.cell_accuracy
            && self.cut_sizes == other.cut_sizes
    }
}

/// Random initial assignment: givens fixed, free variables uniform.
pub fn initialize<R: Rng + ?Sized>(instance: &CspInstance, rng: &mut R) -> Assignment {
    csp::random_assignment(instance, rng)
}

fn accuracy(truth: &[usize], x: &Assignment) -> f64 {
    let hits = truth.iter().zip(x.values()).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

struct Recorder {
    record: RunRecord,
    truth: Option<Vec<usize>>,
    max_cut: bool,
    start: Instant,
}

impl Recorder {
    fn push(&mut self, instance: &CspInstance, x: &Assignment, cost: usize) {
        let r = &mut self.record;
        let best = r.best_costs.last().copied().unwrap_or(usize::MAX);
        if cost < best {
            r.best_assignment = x.clone();
        }
        r.costs.push(cost);
        r.best_costs.push(cost.min(best));
        if let (Some(acc), Some(truth)) = (r.cell_accuracy.as_mut(), self.truth.as_ref()) {
            acc.push(accuracy(truth, x));
        }
        if self.max_cut {
            if let Some(cuts) = r.cut_sizes.as_mut() {
                cuts.push(instance.edge_count() - cost);
            }
        }
        r.elapsed_ms.push((self.start.elapsed().as_secs_f64() * 1e6).round() / 1e3);
    }
}

/// Runs LNS from a seeded random initial assignment.
pub fn lns_run(instance: &CspInstance, model: &RepairModel, cfg: &LnsConfig) -> Result<RunRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = initialize(instance, &mut rng);
    run_loop(instance, model, cfg, x0, &mut rng)
}

/// Runs LNS from a caller-supplied initial assignment.
pub fn lns_run_from(instance: &CspInstance, model: &RepairModel, cfg: &LnsConfig, initial: Assignment) -> Result<RunRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_loop(instance, model, cfg, initial, &mut rng)
}

/// Same loop with a freshly initialized, untrained model. The model is
/// seeded from `cfg.seed` mixed with a constant so it differs from the run's
/// own random stream.
pub fn lns_run_untrained_baseline(instance: &CspInstance, model_cfg: ModelConfig, cfg: &LnsConfig) -> Result<RunRecord> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba5e_11e5);
    let model = RepairModel::new(model_cfg, &mut init_rng)?;
    lns_run(instance, &model, cfg)
}

fn run_loop(
    instance: &CspInstance,
    model: &RepairModel,
    cfg: &LnsConfig,
    mut x: Assignment,
    rng: &mut ChaCha8Rng,
) -> Result<RunRecord> {
    cfg.validate()?;
    model.check_compatible(instance)?;
    if x.len() != instance.n() {
        return Err(Error::Structural("initial assignment length mismatch".into()));
    }
    let truth = instance.ground_truth().map(<[usize]>::to_vec);
    let max_cut = instance.kind == ProblemKind::MaxCut;
    let mut rec = Recorder {
        record: RunRecord {
            costs: Vec::new(),
            best_costs: Vec::new(),
            best_assignment: x.clone(),
            final_assignment: x.clone(),
            iterations: 0,
            solved: false,
            cell_accuracy: truth.as_ref().map(|_| Vec::new()),
            cut_sizes: max_cut.then(Vec::new),
            elapsed_ms: Vec::new(),
        },
        truth,
        max_cut,
        start: Instant::now(),
    };

    let mut report = discrete_report(instance, &x);
    let mut cost = report.violated_count;
    rec.push(instance, &x, cost);
    let mut logits: Option<LogitMatrix> = None;
    let mut iterations = 0;

    loop {
        if cfg.stop_on_feasible && cost == 0 {
            break;
        }
        if cfg.max_iterations.is_some_and(|m| iterations >= m) {
            break;
        }
        if cfg.time_limit.is_some_and(|limit| rec.start.elapsed() >= limit) {
            break;
        }
        let ctx = DestroyContext {
            instance,
            x: &x,
            rho: cfg.rho,
            logits: logits.as_ref(),
            report: &report,
        };
        let mask = cfg.destroy.apply(&ctx, rng)?;
        let z = model.forward(instance, &x, &mask)?;
        let proposal = cfg.repair.apply(instance, &z, &mask, &x, cfg.tau, rng)?;
        x = proposal.x_next;
        logits = Some(z);
        report = discrete_report(instance, &x);
        cost = report.violated_count;
        iterations += 1;
        rec.push(instance, &x, cost);
    }

    let mut record = rec.record;
    record.iterations = iterations;
    record.solved = record.best_cost() == 0;
    record.final_assignment = x;
    Ok(record)
}
