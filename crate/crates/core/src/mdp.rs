//! Risk labeling and MDP assembly over the abstract state space.
//!
//! Each original state gets a risk metric `RM = sum(w_i * F_i)` from
//! binary per-feature flags; states with `RM` strictly above the
//! threshold `alpha * sum(w_i)` are risky. Rewards add an action term
//! `w_a * R_a` that pays +1 for remaining at a risky state or jumping
//! from a non-risky one and -1 otherwise. Abstract-state rewards are
//! the mean over member states.
//!
//! Transitions start from the empirical row-normalized transition
//! counts of the observed abstract trajectory. The jump action (1) uses
//! them as-is; the remain action (0) pins the diagonal to a
//! self-transition probability `t_s` in [0.51, 1] that grows linearly
//! with the state's mean risk metric, and rescales the remaining
//! off-diagonal mass to keep rows stochastic.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::discretize::{enumerate_states, BinKind, BinningScheme, DiscreteState};
use crate::error::{Error, Result};

pub const ACTION_REMAIN: usize = 0;
pub const ACTION_JUMP: usize = 1;
pub const NUM_ACTIONS: usize = 2;

/// Which DoS codes count as safe when flagging features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DosSafeRule {
    /// Only the no-attack code (0) is safe.
    #[default]
    NoAttack,
    /// The literal first half of the code range is safe.
    FirstHalf,
}

/// Weights and thresholding for the risk metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskParams {
    /// Per-feature weights w1..w7.
    pub weights: [f64; 7],
    /// Threshold fraction of the total weight.
    pub alpha: f64,
    /// Action-term weight; `None` uses the mean of the feature weights.
    pub action_weight: Option<f64>,
    pub dos_safe_rule: DosSafeRule,
}

impl Default for RiskParams {
    fn default() -> Self {
        RiskParams {
            weights: [1000.0, 1000.0, 1000.0, 1000.0, 2000.0, 2000.0, 3000.0],
            alpha: 0.5,
            action_weight: None,
            dos_safe_rule: DosSafeRule::NoAttack,
        }
    }
}

impl RiskParams {
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Effective action weight w_a.
    pub fn w_a(&self) -> f64 {
        self.action_weight.unwrap_or(self.total_weight() / self.weights.len() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::config("risk weights must be finite and > 0"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(w) = self.action_weight {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::config("action weight must be finite and > 0"));
            }
        }
        Ok(())
    }
}

/// Risk metric and risky flag for every original state, in state-index
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskLabeling {
    pub rm: Vec<f64>,
    pub risky: Vec<bool>,
    pub threshold: f64,
    pub rm_min: f64,
    pub rm_max: f64,
}

impl RiskLabeling {
    /// Labels the full enumerated state space of the scheme.
    pub fn compute(scheme: &BinningScheme, params: &RiskParams) -> Result<Self> {
        check_risk_scheme(scheme)?;
        let threshold = risk_threshold(params);
        let mut rm = Vec::new();
        let mut risky = Vec::new();
        let mut rm_min = f64::INFINITY;
        let mut rm_max = f64::NEG_INFINITY;
        for state in enumerate_states(scheme) {
            let value = risk_metric(&state, scheme, params);
            rm_min = rm_min.min(value);
            rm_max = rm_max.max(value);
            risky.push(value > threshold);
            rm.push(value);
        }
        Ok(RiskLabeling { rm, risky, threshold, rm_min, rm_max })
    }

    pub fn len(&self) -> usize {
        self.rm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rm.is_empty()
    }
}

fn check_risk_scheme(scheme: &BinningScheme) -> Result<()> {
    if scheme.features.len() != 7 {
        return Err(Error::config(format!(
            "risk parameters define 7 feature weights but the scheme has {} features",
            scheme.features.len()
        )));
    }
    Ok(())
}

/// Binary unsafe flags per feature: a continuous feature is safe while
/// its code lies in the first half of its range (`code < ceil(n/2)`);
/// the categorical DoS feature follows the configured rule.
pub fn feature_flags(
    state: &DiscreteState,
    scheme: &BinningScheme,
    params: &RiskParams,
) -> [bool; 7] {
    assert_eq!(scheme.features.len(), 7, "risk flags need a seven-feature scheme");
    assert_eq!(state.codes.len(), 7, "state does not match the scheme");
    let mut flags = [false; 7];
    for (i, (code, f)) in state.codes.iter().zip(&scheme.features).enumerate() {
        let safe_below = match f.kind {
            BinKind::Continuous { .. } => f.count.div_ceil(2),
            BinKind::Categorical => match params.dos_safe_rule {
                DosSafeRule::NoAttack => 1,
                DosSafeRule::FirstHalf => f.count.div_ceil(2),
            },
        };
        flags[i] = *code >= safe_below;
    }
    flags
}

/// Weighted sum of unsafe-feature flags.
pub fn risk_metric(state: &DiscreteState, scheme: &BinningScheme, params: &RiskParams) -> f64 {
    feature_flags(state, scheme, params)
        .iter()
        .zip(&params.weights)
        .map(|(&f, &w)| if f { w } else { 0.0 })
        .sum()
}

/// `alpha` times the total feature weight.
pub fn risk_threshold(params: &RiskParams) -> f64 {
    params.alpha * params.total_weight()
}

/// Action term: +1 for remaining at a risky state or jumping from a
/// non-risky one, -1 otherwise. A state exactly at the threshold counts
/// as non-risky.
pub fn action_reward_value(risky: bool, action: usize) -> f64 {
    debug_assert!(action < NUM_ACTIONS);
    let favors_remain = risky;
    if (action == ACTION_REMAIN) == favors_remain {
        1.0
    } else {
        -1.0
    }
}

pub fn action_reward(
    state: &DiscreteState,
    scheme: &BinningScheme,
    params: &RiskParams,
    action: usize,
) -> f64 {
    let risky = risk_metric(state, scheme, params) > risk_threshold(params);
    action_reward_value(risky, action)
}

/// Full per-state reward `RM + w_a * R_a`.
pub fn state_reward(
    state: &DiscreteState,
    scheme: &BinningScheme,
    params: &RiskParams,
    action: usize,
) -> f64 {
    risk_metric(state, scheme, params) + params.w_a() * action_reward(state, scheme, params, action)
}

/// Mean member statistics per abstract state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractRisk {
    /// Mean member risk metric; 0 for empty clusters.
    pub mean_rm: Vec<f64>,
    /// Risky iff the mean member risk metric strictly exceeds the
    /// threshold; empty clusters are non-risky.
    pub risky: Vec<bool>,
    pub population: Vec<usize>,
}

pub fn abstract_risk(model: &ClusterModel, labeling: &RiskLabeling) -> Result<AbstractRisk> {
    if model.assignment.len() != labeling.len() {
        return Err(Error::config(format!(
            "cluster assignment covers {} states but the labeling covers {}",
            model.assignment.len(),
            labeling.len()
        )));
    }
    let k = model.k;
    let mut sum_rm = vec![0.0f64; k];
    let mut population = vec![0usize; k];
    for (i, &a) in model.assignment.iter().enumerate() {
        sum_rm[a as usize] += labeling.rm[i];
        population[a as usize] += 1;
    }
    let mean_rm: Vec<f64> = sum_rm
        .iter()
        .zip(&population)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let risky = mean_rm
        .iter()
        .zip(&population)
        .map(|(&m, &c)| c > 0 && m > labeling.threshold)
        .collect();
    Ok(AbstractRisk { mean_rm, risky, population })
}

/// Mean of the member state rewards; 0 for an empty cluster.
pub fn abstract_reward(
    model: &ClusterModel,
    labeling: &RiskLabeling,
    params: &RiskParams,
    abstract_id: u32,
    action: usize,
) -> Result<f64> {
    if (abstract_id as usize) >= model.k {
        return Err(Error::config(format!("abstract id {abstract_id} out of range (K = {})", model.k)));
    }
    if model.assignment.len() != labeling.len() {
        return Err(Error::config("cluster assignment and labeling cover different state counts"));
    }
    let w_a = params.w_a();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &a) in model.assignment.iter().enumerate() {
        if a == abstract_id {
            sum += labeling.rm[i] + w_a * action_reward_value(labeling.risky[i], action);
            count += 1;
        }
    }
    Ok(if count > 0 { sum / count as f64 } else { 0.0 })
}

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(Error::data(format!("matrix row has {} entries, expected {n}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(DenseMatrix { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }
}

/// Row-normalized transition frequencies of consecutive trajectory
/// pairs. States without observed outgoing transitions become pure
/// self-loops so every row is a probability distribution.
pub fn empirical_transitions(trajectory: &[u32], k: usize) -> Result<DenseMatrix> {
    if trajectory.len() < 2 {
        return Err(Error::config("trajectory must contain at least two steps"));
    }
    if let Some(&bad) = trajectory.iter().find(|&&s| (s as usize) >= k) {
        return Err(Error::config(format!("trajectory state {bad} out of range (K = {k})")));
    }
    let mut counts = vec![0u64; k * k];
    for pair in trajectory.windows(2) {
        counts[pair[0] as usize * k + pair[1] as usize] += 1;
    }
    let mut matrix = DenseMatrix::zeros(k);
    for s in 0..k {
        let row_counts = &counts[s * k..(s + 1) * k];
        let total: u64 = row_counts.iter().sum();
        let row = matrix.row_mut(s);
        if total == 0 {
            row[s] = 1.0;
        } else {
            let inv = 1.0 / total as f64;
            for (slot, &c) in row.iter_mut().zip(row_counts) {
                *slot = c as f64 * inv;
            }
        }
    }
    Ok(matrix)
}

/// Linear map of a risk metric into the self-transition range
/// [0.51, 1.0]; a degenerate range maps to 0.51.
pub fn self_transition_prob(rm: f64, rm_min: f64, rm_max: f64) -> f64 {
    if !(rm_max > rm_min) {
        return 0.51;
    }
    (((rm - rm_min) / (rm_max - rm_min)) * 0.49 + 0.51).clamp(0.51, 1.0)
}

/// Remain-action row: diagonal pinned to `t`, the base row's
/// off-diagonal mass renormalized to carry the remaining `1 - t`. A
/// base row with no off-diagonal mass stays a pure self-loop.
pub(crate) fn remain_row(base_row: &[f64], state: usize, t: f64) -> Vec<f64> {
    let off_mass: f64 =
        base_row.iter().enumerate().filter(|(j, _)| *j != state).map(|(_, &p)| p).sum();
    let mut row = vec![0.0; base_row.len()];
    if off_mass <= 0.0 {
        row[state] = 1.0;
        return row;
    }
    let scale = (1.0 - t) / off_mass;
    for (j, &p) in base_row.iter().enumerate() {
        row[j] = if j == state { t } else { p * scale };
    }
    row
}

/// The assembled MDP: per-action rewards and transition matrices over
/// the abstract state space.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    pub k: usize,
    pub gamma: f64,
    /// K rows of [remain, jump] rewards.
    pub reward: Vec<[f64; 2]>,
    /// Transition matrices indexed by action.
    pub transitions: [DenseMatrix; 2],
}

impl MdpModel {
    /// Checks the model invariants: row-stochastic transitions (1e-9),
    /// finite rewards, gamma in (0, 1].
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::data(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.reward.len() != self.k {
            return Err(Error::data("reward matrix does not match the state count"));
        }
        if self.reward.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::data("rewards must be finite"));
        }
        for (a, matrix) in self.transitions.iter().enumerate() {
            if matrix.n() != self.k {
                return Err(Error::data("transition matrix does not match the state count"));
            }
            for s in 0..self.k {
                let row = matrix.row(s);
                if row.iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
                    return Err(Error::data(format!("action {a} row {s} has entries outside [0, 1]")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::data(format!("action {a} row {s} sums to {sum}, expected 1")));
                }
            }
        }
        Ok(())
    }
}

/// Builds the MDP from an abstraction, a risk labeling of the original
/// space and the observed abstract trajectory.
///
/// The jump matrix is the empirical base matrix unchanged; the remain
/// matrix pins each diagonal to `t_s` from the state's mean member
/// risk metric, normalized over the observed range of nonempty
/// clusters' means.
pub fn build_mdp(
    model: &ClusterModel,
    labeling: &RiskLabeling,
    params: &RiskParams,
    trajectory: &[u32],
    gamma: f64,
) -> Result<MdpModel> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let k = model.k;
    let risk = abstract_risk(model, labeling)?;
    let w_a = params.w_a();

    // Mean member reward per abstract state and action: mean RM plus
    // w_a times the mean action term over risky/non-risky members.
    let mut risky_members = vec![0usize; k];
    for (i, &a) in model.assignment.iter().enumerate() {
        if labeling.risky[i] {
            risky_members[a as usize] += 1;
        }
    }
    let mut reward = vec![[0.0f64; 2]; k];
    for j in 0..k {
        let count = risk.population[j];
        if count == 0 {
            continue;
        }
        let risky_frac = risky_members[j] as f64 / count as f64;
        let mean_ra_remain = 2.0 * risky_frac - 1.0;
        reward[j][ACTION_REMAIN] = risk.mean_rm[j] + w_a * mean_ra_remain;
        reward[j][ACTION_JUMP] = risk.mean_rm[j] - w_a * mean_ra_remain;
    }

    let base = empirical_transitions(trajectory, k)?;

    // t_s range taken over nonempty clusters; empty clusters are never
    // visited so their remain-row stays the base self-loop.
    let mut rm_min = f64::INFINITY;
    let mut rm_max = f64::NEG_INFINITY;
    for j in 0..k {
        if risk.population[j] > 0 {
            rm_min = rm_min.min(risk.mean_rm[j]);
            rm_max = rm_max.max(risk.mean_rm[j]);
        }
    }

    let mut remain = DenseMatrix::zeros(k);
    for j in 0..k {
        let t = self_transition_prob(risk.mean_rm[j], rm_min, rm_max);
        let row = remain_row(base.row(j), j, t);
        remain.row_mut(j).copy_from_slice(&row);
    }

    let built = MdpModel { k, gamma, reward, transitions: [remain, base] };
    built.validate().map_err(|e| Error::config(format!("built MDP failed validation: {e}")))?;
    Ok(built)
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    k: usize,
    gamma: f64,
    reward: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transitions: Option<[Vec<Vec<f64>>; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transition_files: Option<[String; 2]>,
}

fn write_matrix_binary(path: &Path, matrix: &DenseMatrix) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = u32::try_from(matrix.n()).map_err(|_| Error::data("matrix too large for sidecar"))?;
    file.write_all(&n.to_le_bytes())?;
    file.write_all(&n.to_le_bytes())?;
    for v in matrix.as_slice() {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

fn read_matrix_binary(path: &Path) -> Result<DenseMatrix> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut dims = [0u8; 8];
    file.read_exact(&mut dims)?;
    let rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
    if rows != cols {
        return Err(Error::data(format!("sidecar matrix is {rows}x{cols}, expected square")));
    }
    let mut data = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for slot in &mut data {
        file.read_exact(&mut buf)?;
        *slot = f64::from_le_bytes(buf);
    }
    Ok(DenseMatrix { n: rows, data })
}

/// Saves the MDP as JSON; with `sidecar` the two transition matrices go
/// to `<stem>_p0.bin` / `<stem>_p1.bin` beside the JSON file as
/// row-major little-endian f64 preceded by two u32 dimensions.
pub fn save_mdp(path: impl AsRef<Path>, model: &MdpModel, sidecar: bool) -> Result<()> {
    let path = path.as_ref();
    let json = if sidecar {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mdp");
        let names = [format!("{stem}_p0.bin"), format!("{stem}_p1.bin")];
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        for (name, matrix) in names.iter().zip(&model.transitions) {
            write_matrix_binary(&dir.join(name), matrix)?;
        }
        MdpJson {
            k: model.k,
            gamma: model.gamma,
            reward: model.reward.clone(),
            transitions: None,
            transition_files: Some(names),
        }
    } else {
        MdpJson {
            k: model.k,
            gamma: model.gamma,
            reward: model.reward.clone(),
            transitions: Some([model.transitions[0].to_rows(), model.transitions[1].to_rows()]),
            transition_files: None,
        }
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &json)?;
    Ok(())
}

pub fn load_mdp(path: impl AsRef<Path>) -> Result<MdpModel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let json: MdpJson = serde_json::from_reader(std::io::BufReader::new(file))?;
    let transitions = match (json.transitions, json.transition_files) {
        (Some([p0, p1]), _) => [DenseMatrix::from_rows(p0)?, DenseMatrix::from_rows(p1)?],
        (None, Some(files)) => {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            [read_matrix_binary(&dir.join(&files[0]))?, read_matrix_binary(&dir.join(&files[1]))?]
        }
        (None, None) => return Err(Error::data("mdp json carries neither transitions nor sidecar files")),
    };
    let model = MdpModel { k: json.k, gamma: json.gamma, reward: json.reward, transitions };
    model.validate()?;
    Ok(model)
}
