//! Policy lifting and accuracy scoring.
//!
//! A policy over the abstract space lifts to the original space by
//! giving every original state its cluster's action. Accuracy counts
//! favorable outcomes: remaining (0) at risky states and jumping (1)
//! from non-risky states.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::mdp::{abstract_risk, RiskLabeling, ACTION_REMAIN};
use crate::solver::Policy;

/// Favorable/unfavorable counts and the accuracy fraction on one space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceAccuracy {
    pub accuracy: f64,
    pub risky_remain: u64,
    pub risky_jump: u64,
    pub nonrisky_remain: u64,
    pub nonrisky_jump: u64,
}

impl SpaceAccuracy {
    pub fn total(&self) -> u64 {
        self.risky_remain + self.risky_jump + self.nonrisky_remain + self.nonrisky_jump
    }

    pub fn favorable(&self) -> u64 {
        self.risky_remain + self.nonrisky_jump
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub abstract_space: SpaceAccuracy,
    pub original_space: SpaceAccuracy,
}

/// Original-space action vector: each state inherits its cluster's
/// action.
pub fn lift_policy(policy: &Policy, model: &ClusterModel) -> Result<Vec<u8>> {
    if policy.actions.len() != model.k {
        return Err(Error::config(format!(
            "policy covers {} states but the abstraction has K = {}",
            policy.actions.len(),
            model.k
        )));
    }
    Ok(model.assignment.iter().map(|&a| policy.actions[a as usize]).collect())
}

/// Scores an action vector against risky flags of the same space.
pub fn accuracy(actions: &[u8], risky: &[bool]) -> Result<SpaceAccuracy> {
    if actions.len() != risky.len() {
        return Err(Error::config(format!(
            "action vector length {} does not match {} risk labels",
            actions.len(),
            risky.len()
        )));
    }
    let mut counts = SpaceAccuracy {
        accuracy: 0.0,
        risky_remain: 0,
        risky_jump: 0,
        nonrisky_remain: 0,
        nonrisky_jump: 0,
    };
    for (&action, &risky) in actions.iter().zip(risky) {
        let remain = action as usize == ACTION_REMAIN;
        match (risky, remain) {
            (true, true) => counts.risky_remain += 1,
            (true, false) => counts.risky_jump += 1,
            (false, true) => counts.nonrisky_remain += 1,
            (false, false) => counts.nonrisky_jump += 1,
        }
    }
    counts.accuracy = if counts.total() == 0 {
        0.0
    } else {
        counts.favorable() as f64 / counts.total() as f64
    };
    Ok(counts)
}

/// Scores a policy on both spaces: directly on the abstract states
/// (risky iff the mean member risk metric exceeds the threshold) and
/// lifted onto the original states.
pub fn evaluate_policy(
    policy: &Policy,
    model: &ClusterModel,
    labeling: &RiskLabeling,
) -> Result<AccuracyReport> {
    let abstract_labels = abstract_risk(model, labeling)?;
    let abstract_space = accuracy(&policy.actions, &abstract_labels.risky)?;
    let lifted = lift_policy(policy, model)?;
    let original_space = accuracy(&lifted, &labeling.risky)?;
    Ok(AccuracyReport { abstract_space, original_space })
}

pub fn save_report(path: impl AsRef<Path>, report: &AccuracyReport) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), report)?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<AccuracyReport> {
    let file = std::fs::File::open(path.as_ref())?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// One-line CSV for experiment sweeps.
pub fn write_report_csv(path: impl AsRef<Path>, report: &AccuracyReport) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(file, "abstract_accuracy,original_accuracy")?;
    writeln!(file, "{},{}", report.abstract_space.accuracy, report.original_space.accuracy)?;
    file.flush()?;
    Ok(())
}
