//! Dynamic-programming solvers for the two-action MDP.
//!
//! Five algorithms share the same conventions: values start at zero,
//! discounted solvers stop once the sup-norm sweep difference drops
//! below `eps * (1 - gamma) / (2 * gamma)`, and action ties always
//! resolve to remain (action 0) so policies are directly comparable
//! across solvers.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{MdpModel, ACTION_JUMP, ACTION_REMAIN};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_MPI_SWEEPS: usize = 10;
/// Hard cap on sweeps before a solver reports non-convergence.
const MAX_SWEEPS: usize = 200_000;
/// Damping for relative value iteration; keeps periodic chains from
/// oscillating without moving the fixed point.
const RVI_DAMPING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Vi,
    Pi,
    Mpi,
    Rvi,
    Gsvi,
}

impl SolverKind {
    pub const ALL: [SolverKind; 5] =
        [SolverKind::Vi, SolverKind::Pi, SolverKind::Mpi, SolverKind::Rvi, SolverKind::Gsvi];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Vi => "vi",
            SolverKind::Pi => "pi",
            SolverKind::Mpi => "mpi",
            SolverKind::Rvi => "rvi",
            SolverKind::Gsvi => "gsvi",
        }
    }

    /// Whether the solver optimizes the discounted objective (RVI works
    /// with average reward instead).
    pub fn is_discounted(self) -> bool {
        !matches!(self, SolverKind::Rvi)
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vi" => Ok(SolverKind::Vi),
            "pi" => Ok(SolverKind::Pi),
            "mpi" => Ok(SolverKind::Mpi),
            "rvi" => Ok(SolverKind::Rvi),
            "gsvi" => Ok(SolverKind::Gsvi),
            other => Err(Error::config(format!("unknown solver {other:?}"))),
        }
    }
}

/// A solved policy with its value estimates and solve metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub solver: SolverKind,
    /// Discount factor; `None` for the average-reward solver.
    pub gamma: Option<f64>,
    /// Action per abstract state, 0 = remain, 1 = jump.
    pub actions: Vec<u8>,
    /// Value estimates (relative values for RVI).
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Wall-clock solve time.
    pub seconds: f64,
}

fn check_discount(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config(format!("discount factor must lie in (0, 1), got {gamma}")));
    }
    Ok(())
}

fn q_value(mdp: &MdpModel, gamma: f64, values: &[f64], s: usize, a: usize) -> f64 {
    let row = mdp.transitions[a].row(s);
    let future: f64 = row.iter().zip(values).map(|(&p, &v)| p * v).sum();
    mdp.reward[s][a] + gamma * future
}

/// Greedy action per state with ties toward remain.
pub fn greedy_policy(mdp: &MdpModel, gamma: f64, values: &[f64]) -> Vec<u8> {
    (0..mdp.k)
        .map(|s| {
            let q0 = q_value(mdp, gamma, values, s, ACTION_REMAIN);
            let q1 = q_value(mdp, gamma, values, s, ACTION_JUMP);
            u8::from(q1 > q0)
        })
        .collect()
}

/// Synchronous Bellman optimality backup; returns the sup-norm change.
fn bellman_sweep(mdp: &MdpModel, gamma: f64, values: &[f64], out: &mut [f64]) -> f64 {
    let mut delta = 0.0f64;
    for s in 0..mdp.k {
        let q0 = q_value(mdp, gamma, values, s, ACTION_REMAIN);
        let q1 = q_value(mdp, gamma, values, s, ACTION_JUMP);
        let v = q0.max(q1);
        delta = delta.max((v - values[s]).abs());
        out[s] = v;
    }
    delta
}

/// Max-norm optimality residual `max_s |V(s) - (TV)(s)|`.
pub fn bellman_residual(mdp: &MdpModel, gamma: f64, values: &[f64]) -> f64 {
    let mut backed = vec![0.0; mdp.k];
    bellman_sweep(mdp, gamma, values, &mut backed)
}

/// Span seminorm of the undiscounted backup difference `Th - h`; the
/// natural residual for relative value iteration, where `Th - h`
/// approaches a constant gain vector.
pub fn rvi_span_residual(mdp: &MdpModel, values: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in 0..mdp.k {
        let q0 = q_value(mdp, 1.0, values, s, ACTION_REMAIN);
        let q1 = q_value(mdp, 1.0, values, s, ACTION_JUMP);
        let d = q0.max(q1) - values[s];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    hi - lo
}

/// Exact value of a fixed policy from the linear system
/// `(I - gamma * P_pi) V = R_pi`.
pub fn policy_value_exact(mdp: &MdpModel, gamma: f64, actions: &[u8]) -> Result<Vec<f64>> {
    check_discount(gamma)?;
    if actions.len() != mdp.k {
        return Err(Error::config("policy length does not match the state count"));
    }
    let k = mdp.k;
    let mut a = DMatrix::<f64>::identity(k, k);
    let mut b = DVector::<f64>::zeros(k);
    for s in 0..k {
        let act = actions[s] as usize;
        let row = mdp.transitions[act].row(s);
        for (j, &p) in row.iter().enumerate() {
            a[(s, j)] -= gamma * p;
        }
        b[s] = mdp.reward[s][act];
    }
    let solved = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::numeric("policy evaluation system is singular"))?;
    Ok(solved.as_slice().to_vec())
}

fn finish(
    solver: SolverKind,
    gamma: Option<f64>,
    actions: Vec<u8>,
    values: Vec<f64>,
    iterations: usize,
    started: Instant,
) -> Policy {
    Policy { solver, gamma, actions, values, iterations, seconds: started.elapsed().as_secs_f64() }
}

/// Synchronous value iteration from zero values.
pub fn value_iteration(mdp: &MdpModel, gamma: f64, eps: f64) -> Result<Policy> {
    mdp.validate()?;
    check_discount(gamma)?;
    let started = Instant::now();
    let tol = eps * (1.0 - gamma) / (2.0 * gamma);
    let mut values = vec![0.0; mdp.k];
    let mut next = vec![0.0; mdp.k];
    for iter in 1..=MAX_SWEEPS {
        let delta = bellman_sweep(mdp, gamma, &values, &mut next);
        std::mem::swap(&mut values, &mut next);
        if delta < tol {
            let actions = greedy_policy(mdp, gamma, &values);
            return Ok(finish(SolverKind::Vi, Some(gamma), actions, values, iter, started));
        }
    }
    Err(Error::numeric(format!("value iteration did not converge in {MAX_SWEEPS} sweeps")))
}

/// Policy iteration with exact evaluation per step.
pub fn policy_iteration(mdp: &MdpModel, gamma: f64) -> Result<Policy> {
    mdp.validate()?;
    check_discount(gamma)?;
    let started = Instant::now();
    let mut actions = vec![ACTION_REMAIN as u8; mdp.k];
    // The policy space is finite and each step improves, so this
    // terminates far before the cap.
    for iter in 1..=MAX_SWEEPS {
        let values = policy_value_exact(mdp, gamma, &actions)?;
        let improved = greedy_policy(mdp, gamma, &values);
        if improved == actions {
            return Ok(finish(SolverKind::Pi, Some(gamma), actions, values, iter, started));
        }
        actions = improved;
    }
    Err(Error::numeric("policy iteration failed to stabilize"))
}

/// Policy iteration with `sweeps` truncated evaluation backups instead
/// of an exact solve.
pub fn modified_policy_iteration(
    mdp: &MdpModel,
    gamma: f64,
    sweeps: usize,
    eps: f64,
) -> Result<Policy> {
    mdp.validate()?;
    check_discount(gamma)?;
    if sweeps == 0 {
        return Err(Error::config("modified policy iteration needs at least one evaluation sweep"));
    }
    let started = Instant::now();
    let tol = eps * (1.0 - gamma) / (2.0 * gamma);
    let mut values = vec![0.0; mdp.k];
    let mut next = vec![0.0; mdp.k];
    for iter in 1..=MAX_SWEEPS {
        // Improvement step doubles as the optimality backup.
        let actions = greedy_policy(mdp, gamma, &values);
        let delta = bellman_sweep(mdp, gamma, &values, &mut next);
        std::mem::swap(&mut values, &mut next);
        if delta < tol {
            let actions = greedy_policy(mdp, gamma, &values);
            return Ok(finish(SolverKind::Mpi, Some(gamma), actions, values, iter, started));
        }
        // Partial evaluation of the fixed improved policy.
        for _ in 1..sweeps {
            for s in 0..mdp.k {
                next[s] = q_value(mdp, gamma, &values, s, actions[s] as usize);
            }
            std::mem::swap(&mut values, &mut next);
        }
    }
    Err(Error::numeric(format!("modified policy iteration did not converge in {MAX_SWEEPS} iterations")))
}

/// Relative (average-reward) value iteration with the value of state 0
/// pinned to zero each sweep and a damping step for periodic chains.
pub fn relative_value_iteration(mdp: &MdpModel, eps: f64) -> Result<Policy> {
    mdp.validate()?;
    if !(eps > 0.0) {
        return Err(Error::config("eps must be > 0"));
    }
    let started = Instant::now();
    let mut values = vec![0.0; mdp.k];
    let mut backed = vec![0.0; mdp.k];
    for iter in 1..=MAX_SWEEPS {
        for s in 0..mdp.k {
            let q0 = q_value(mdp, 1.0, &values, s, ACTION_REMAIN);
            let q1 = q_value(mdp, 1.0, &values, s, ACTION_JUMP);
            backed[s] = q0.max(q1);
        }
        let offset = backed[0];
        let mut delta = 0.0f64;
        for s in 0..mdp.k {
            let v = (1.0 - RVI_DAMPING) * values[s] + RVI_DAMPING * (backed[s] - offset);
            delta = delta.max((v - values[s]).abs());
            values[s] = v;
        }
        if delta < eps {
            let actions = greedy_policy(mdp, 1.0, &values);
            return Ok(finish(SolverKind::Rvi, None, actions, values, iter, started));
        }
    }
    Err(Error::numeric(format!("relative value iteration did not converge in {MAX_SWEEPS} sweeps")))
}

/// Value iteration with in-place sweeps in ascending state order.
pub fn gauss_seidel_vi(mdp: &MdpModel, gamma: f64, eps: f64) -> Result<Policy> {
    mdp.validate()?;
    check_discount(gamma)?;
    let started = Instant::now();
    let tol = eps * (1.0 - gamma) / (2.0 * gamma);
    let mut values = vec![0.0; mdp.k];
    for iter in 1..=MAX_SWEEPS {
        let mut delta = 0.0f64;
        for s in 0..mdp.k {
            let q0 = q_value(mdp, gamma, &values, s, ACTION_REMAIN);
            let q1 = q_value(mdp, gamma, &values, s, ACTION_JUMP);
            let v = q0.max(q1);
            delta = delta.max((v - values[s]).abs());
            values[s] = v;
        }
        if delta < tol {
            let actions = greedy_policy(mdp, gamma, &values);
            return Ok(finish(SolverKind::Gsvi, Some(gamma), actions, values, iter, started));
        }
    }
    Err(Error::numeric(format!("gauss-seidel value iteration did not converge in {MAX_SWEEPS} sweeps")))
}

pub fn solve(mdp: &MdpModel, kind: SolverKind, gamma: f64, eps: f64, mpi_sweeps: usize) -> Result<Policy> {
    match kind {
        SolverKind::Vi => value_iteration(mdp, gamma, eps),
        SolverKind::Pi => policy_iteration(mdp, gamma),
        SolverKind::Mpi => modified_policy_iteration(mdp, gamma, mpi_sweeps, eps),
        SolverKind::Rvi => relative_value_iteration(mdp, eps),
        SolverKind::Gsvi => gauss_seidel_vi(mdp, gamma, eps),
    }
}

/// All five solvers with timings and the pairwise action-agreement
/// matrix (ordered as [`SolverKind::ALL`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub policies: Vec<Policy>,
    pub agreement: Vec<Vec<bool>>,
}

impl SolveReport {
    pub fn policy(&self, kind: SolverKind) -> &Policy {
        self.policies.iter().find(|p| p.solver == kind).expect("all solvers present")
    }
}

pub fn solve_all(mdp: &MdpModel, gamma: f64, eps: f64, mpi_sweeps: usize) -> Result<SolveReport> {
    let policies: Vec<Policy> = SolverKind::ALL
        .iter()
        .map(|&kind| solve(mdp, kind, gamma, eps, mpi_sweeps))
        .collect::<Result<_>>()?;
    let agreement = policies
        .iter()
        .map(|a| policies.iter().map(|b| a.actions == b.actions).collect())
        .collect();
    Ok(SolveReport { policies, agreement })
}

pub fn save_policy(path: impl AsRef<Path>, policy: &Policy) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), policy)?;
    Ok(())
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<Policy> {
    let file = std::fs::File::open(path.as_ref())?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
