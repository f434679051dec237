//! Repair operators: decode logits into the next assignment, touching only
//! destroyed variables.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::csp::{Assignment, CspInstance};
use crate::destroy::DestroyMask;
use crate::diff::{argmax, softmax_rows, LogitMatrix, SoftAssignment};
use crate::error::{Error, Result};
use crate::model::gumbel_softmax_sample;

#[derive(Debug, Clone, PartialEq)]
pub struct RepairProposal {
    pub x_next: Assignment,
    /// `softmax(z)` for every variable.
    pub q: SoftAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RepairOperator {
    /// Gumbel-softmax sample per destroyed variable.
    Sample,
    /// Most likely value per destroyed variable.
    Greedy,
}

impl RepairOperator {
    pub const ALL: [RepairOperator; 2] = [RepairOperator::Sample, RepairOperator::Greedy];

    pub fn as_str(self) -> &'static str {
        match self {
            RepairOperator::Sample => "sample",
            RepairOperator::Greedy => "greedy",
        }
    }

    pub fn apply<R: Rng + ?Sized>(
        self,
        instance: &CspInstance,
        z: &LogitMatrix,
        mask: &DestroyMask,
        x: &Assignment,
        tau: f64,
        rng: &mut R,
    ) -> Result<RepairProposal> {
        match self {
            RepairOperator::Sample => repair_sample(instance, z, mask, x, tau, rng),
            RepairOperator::Greedy => repair_greedy(instance, z, mask, x),
        }
    }
}

impl fmt::Display for RepairOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RepairOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RepairOperator::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown repair operator `{s}`")))
    }
}

fn check_shapes(instance: &CspInstance, z: &LogitMatrix, mask: &DestroyMask, x: &Assignment) -> Result<()> {
    let n = instance.n();
    if z.as_array().dim() != (n, instance.domain_size()) || mask.len() != n || x.len() != n {
        return Err(Error::Structural("logits, mask and assignment shapes disagree".into()));
    }
    Ok(())
}

fn selected(instance: &CspInstance, mask: &DestroyMask, i: usize) -> bool {
    mask.is_selected(i) && !instance.is_fixed(i)
}

fn proposal(values: Vec<usize>, q: Array2<f64>) -> RepairProposal {
    RepairProposal {
        x_next: Assignment::from_vec_unchecked(values),
        q: SoftAssignment::from_array_unchecked(q),
    }
}

pub fn repair_sample<R: Rng + ?Sized>(
    instance: &CspInstance,
    z: &LogitMatrix,
    mask: &DestroyMask,
    x: &Assignment,
    tau: f64,
    rng: &mut R,
) -> Result<RepairProposal> {
    check_shapes(instance, z, mask, x)?;
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let logits = z.as_array();
    let mut values = x.values().to_vec();
    for (i, v) in values.iter_mut().enumerate() {
        if selected(instance, mask, i) {
            *v = gumbel_softmax_sample(logits.row(i), tau, rng)?.hard;
        }
    }
    Ok(proposal(values, softmax_rows(logits.view())))
}

pub fn repair_greedy(instance: &CspInstance, z: &LogitMatrix, mask: &DestroyMask, x: &Assignment) -> Result<RepairProposal> {
    check_shapes(instance, z, mask, x)?;
    let logits = z.as_array();
    let mut values = x.values().to_vec();
    for (i, v) in values.iter_mut().enumerate() {
        if selected(instance, mask, i) {
            *v = argmax(logits.row(i));
        }
    }
    Ok(proposal(values, softmax_rows(logits.view())))
}
