//! End-to-end pipeline: configuration, stage orchestration, artifact
//! persistence and the experiment sweep drivers.
//!
//! Artifacts land in `out_dir` under fixed names so each stage can be
//! run on its own against the previous stage's outputs. A failed
//! pipeline run leaves a `pipeline.partial` marker naming the stage
//! that aborted; completed artifacts are kept.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{
    self, elbow, fit_gmm_with, fit_kme, fit_kmm, ClusterAlgorithm, ClusterModel, ElbowData,
    ElbowPoint, GmmCovKind, GmmOptions,
};
use crate::discretize::{
    self, discretize, state_index, states_as_points, BinningScheme, DiscreteState,
};
use crate::error::{Error, Result};
use crate::evaluate::{self, evaluate_policy, AccuracyReport};
use crate::features::{self, simulate, AttackInterval, FeatureRecord, LoadParams, SimulationConfig};
use crate::mdp::{self, abstract_risk, build_mdp, RiskLabeling, RiskParams};
use crate::predict::{self, predict, risk_report, PredictionTree, RiskForecast};
use crate::solver::{self, solve, solve_all, Policy, SolveReport, SolverKind};

pub const RECORDS_FILE: &str = "records.csv";
pub const SCHEME_FILE: &str = "scheme.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const CLUSTER_FILE: &str = "cluster_model.json";
pub const MDP_FILE: &str = "mdp.json";
pub const ACCURACY_JSON_FILE: &str = "accuracy.json";
pub const ACCURACY_CSV_FILE: &str = "accuracy.csv";
pub const TREE_FILE: &str = "prediction_tree.json";
pub const TREE_TEXT_FILE: &str = "prediction_tree.txt";
pub const RISK_REPORT_FILE: &str = "risk_report.csv";
pub const ELBOW_FILE: &str = "elbow.csv";
pub const SWEEP_CLUSTERING_FILE: &str = "sweep_clustering.csv";
pub const SWEEP_GAMMA_FILE: &str = "sweep_gamma.csv";
pub const BENCH_FILE: &str = "bench_solvers.csv";
pub const PARTIAL_MARKER: &str = "pipeline.partial";

pub fn policy_file(kind: SolverKind) -> String {
    format!("policy_{}.json", kind.name())
}

/// Simulation shape without the seed (the pipeline seed is used).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub duration_steps: usize,
    pub attack_schedule: Vec<AttackInterval>,
    pub load: LoadParams,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        let base = SimulationConfig::default();
        SimulationSettings {
            duration_steps: base.duration_steps,
            attack_schedule: base.attack_schedule,
            load: base.load,
        }
    }
}

impl SimulationSettings {
    pub fn with_seed(&self, seed: u64) -> SimulationConfig {
        SimulationConfig {
            duration_steps: self.duration_steps,
            seed,
            attack_schedule: self.attack_schedule.clone(),
            load: self.load.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbstractionConfig {
    pub algorithm: ClusterAlgorithm,
    pub k: usize,
    pub gmm_covariance: GmmCovKind,
}

impl Default for AbstractionConfig {
    fn default() -> Self {
        AbstractionConfig { algorithm: ClusterAlgorithm::Kme, k: 1000, gmm_covariance: GmmCovKind::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    /// Explicit root abstract state; default is the abstract state of
    /// the last non-risky trajectory step.
    pub root: Option<u32>,
    pub horizon: usize,
    pub prob_floor: f64,
    pub branch_cap: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig { root: None, horizon: 5, prob_floor: 1e-4, branch_cap: 16 }
    }
}

/// Which solver's policy drives evaluation and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverChoice {
    /// Run all five; the modified-policy-iteration result is primary.
    All,
    One(SolverKind),
}

impl Default for SolverChoice {
    fn default() -> Self {
        SolverChoice::All
    }
}

impl SolverChoice {
    pub fn primary(self) -> SolverKind {
        match self {
            SolverChoice::All => SolverKind::Mpi,
            SolverChoice::One(kind) => kind,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverChoice::All => "all",
            SolverChoice::One(kind) => kind.name(),
        }
    }
}

impl std::str::FromStr for SolverChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            Ok(SolverChoice::All)
        } else {
            Ok(SolverChoice::One(s.parse()?))
        }
    }
}

impl Serialize for SolverChoice {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SolverChoice {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Full pipeline configuration; every field has a default so an empty
/// JSON object is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Existing records CSV; when absent the simulator supplies data.
    pub records_path: Option<PathBuf>,
    pub simulation: SimulationSettings,
    /// Binning scheme; default is the standard 51200-state scheme.
    pub binning: Option<BinningScheme>,
    pub abstraction: AbstractionConfig,
    pub risk: RiskParams,
    pub gamma: f64,
    pub solver: SolverChoice,
    pub solver_epsilon: f64,
    pub mpi_sweeps: usize,
    pub prediction: PredictionConfig,
    /// Store the transition matrices as binary sidecars next to the
    /// MDP JSON instead of inline arrays.
    pub matrix_sidecar: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            records_path: None,
            simulation: SimulationSettings::default(),
            binning: None,
            abstraction: AbstractionConfig::default(),
            risk: RiskParams::default(),
            gamma: 0.1,
            solver: SolverChoice::default(),
            solver_epsilon: solver::DEFAULT_EPSILON,
            mpi_sweeps: solver::DEFAULT_MPI_SWEEPS,
            prediction: PredictionConfig::default(),
            matrix_sidecar: false,
        }
    }
}

impl PipelineConfig {
    pub fn scheme(&self) -> BinningScheme {
        self.binning.clone().unwrap_or_else(BinningScheme::standard)
    }

    /// Seed for the clustering stage, derived from the pipeline seed.
    pub fn cluster_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.abstraction.k == 0 {
            return Err(Error::config("abstraction k must be >= 1"));
        }
        if self.prediction.horizon == 0 {
            return Err(Error::config("prediction horizon must be >= 1"));
        }
        if !(self.solver_epsilon > 0.0) {
            return Err(Error::config("solver epsilon must be > 0"));
        }
        if self.mpi_sweeps == 0 {
            return Err(Error::config("mpi sweeps must be >= 1"));
        }
        self.risk.validate()?;
        let scheme = self.scheme();
        scheme.validate()?;
        if !scheme.is_record_compatible() {
            return Err(Error::config(
                "binning scheme must have six continuous features plus the categorical dos feature",
            ));
        }
        self.simulation.with_seed(self.seed).validate()?;
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let file = std::fs::File::open(path.as_ref())?;
    let config: PipelineConfig = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::config(format!("invalid config: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn save_config(path: impl AsRef<Path>, config: &PipelineConfig) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), config)?;
    Ok(())
}

fn ensure_out_dir(config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    Ok(())
}

/// Wraps a stage so failures name the stage and leave a partial marker.
fn stage<T>(out_dir: &Path, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| {
        let _ = std::fs::write(out_dir.join(PARTIAL_MARKER), format!("stage: {name}\nerror: {e}\n"));
        match e {
            Error::Config(m) => Error::Config(format!("{name}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{name}: {m}")),
            other => Error::Data(format!("{name}: {other}")),
        }
    })
}

fn fit_abstraction(
    points: &[Vec<f64>],
    config: &AbstractionConfig,
    seed: u64,
) -> Result<ClusterModel> {
    match config.algorithm {
        ClusterAlgorithm::Kme => fit_kme(points, config.k, seed),
        ClusterAlgorithm::Kmm => fit_kmm(points, config.k, seed),
        ClusterAlgorithm::Gmm => fit_gmm_with(
            points,
            config.k,
            seed,
            &GmmOptions { covariance: config.gmm_covariance, ..GmmOptions::default() },
        ),
    }
}

/// Observed abstract trajectory from per-step original state indices.
pub fn abstract_trajectory(model: &ClusterModel, state_indices: &[usize]) -> Result<Vec<u32>> {
    state_indices.iter().map(|&i| model.map_state(i)).collect()
}

/// Default prediction root: the abstract state of the last observed
/// non-risky trajectory step.
pub fn choose_root(trajectory: &[u32], abstract_risky: &[bool]) -> Result<u32> {
    trajectory
        .iter()
        .rev()
        .copied()
        .find(|&s| !abstract_risky[s as usize])
        .ok_or_else(|| Error::data("every observed step is risky; no safe root state available"))
}

/// Front half of the pipeline shared by the sweep drivers: records,
/// scheme, labeling, cluster inputs and the per-step state indices.
pub struct Prepared {
    pub records: Vec<FeatureRecord>,
    pub scheme: BinningScheme,
    pub labeling: RiskLabeling,
    pub points: Vec<Vec<f64>>,
    pub states: Vec<DiscreteState>,
    pub state_indices: Vec<usize>,
}

pub fn prepare(config: &PipelineConfig) -> Result<Prepared> {
    config.validate()?;
    let records = match &config.records_path {
        Some(path) => features::load_records(path)?,
        None => simulate(&config.simulation.with_seed(config.seed))?,
    };
    if records.is_empty() {
        return Err(Error::data("no records to process"));
    }
    let scheme = config.scheme();
    let labeling = RiskLabeling::compute(&scheme, &config.risk)?;
    let points = states_as_points(&scheme);
    let states: Vec<DiscreteState> = records.iter().map(|r| discretize(r, &scheme)).collect();
    let state_indices: Vec<usize> =
        states.iter().map(|s| state_index(s, &scheme)).collect::<Result<_>>()?;
    Ok(Prepared { records, scheme, labeling, points, states, state_indices })
}

/// Everything a full pipeline run produces.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: SolveReport,
    pub primary: Policy,
    pub accuracy: AccuracyReport,
    pub tree: PredictionTree,
    pub forecasts: Vec<RiskForecast>,
    pub summary: String,
}

/// Runs simulate/load, discretize, abstract, build, solve, evaluate
/// and predict, writing every artifact into `out_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    ensure_out_dir(config)?;
    let out = config.out_dir.clone();
    let _ = std::fs::remove_file(out.join(PARTIAL_MARKER));

    let prepared = stage(&out, "ingest", || {
        let prepared = prepare(config)?;
        features::write_records(out.join(RECORDS_FILE), &prepared.records)?;
        discretize::save_scheme(out.join(SCHEME_FILE), &prepared.scheme)?;
        discretize::write_trajectory(out.join(TRAJECTORY_FILE), &prepared.states, &prepared.scheme)?;
        Ok(prepared)
    })?;

    let model = stage(&out, "abstract", || {
        let model = fit_abstraction(&prepared.points, &config.abstraction, config.cluster_seed())?;
        cluster::save_model(out.join(CLUSTER_FILE), &model)?;
        Ok(model)
    })?;

    let (mdp, trajectory) = stage(&out, "build", || {
        let trajectory = abstract_trajectory(&model, &prepared.state_indices)?;
        let mdp = build_mdp(&model, &prepared.labeling, &config.risk, &trajectory, config.gamma)?;
        mdp::save_mdp(out.join(MDP_FILE), &mdp, config.matrix_sidecar)?;
        Ok((mdp, trajectory))
    })?;

    let (report, primary) = stage(&out, "solve", || {
        let report = match config.solver {
            SolverChoice::All => solve_all(&mdp, config.gamma, config.solver_epsilon, config.mpi_sweeps)?,
            SolverChoice::One(kind) => {
                let policy = solve(&mdp, kind, config.gamma, config.solver_epsilon, config.mpi_sweeps)?;
                SolveReport { agreement: vec![vec![true]], policies: vec![policy] }
            }
        };
        for policy in &report.policies {
            solver::save_policy(out.join(policy_file(policy.solver)), policy)?;
        }
        let primary = report
            .policies
            .iter()
            .find(|p| p.solver == config.solver.primary())
            .cloned()
            .expect("primary solver always runs");
        Ok((report, primary))
    })?;

    let accuracy = stage(&out, "evaluate", || {
        let accuracy = evaluate_policy(&primary, &model, &prepared.labeling)?;
        evaluate::save_report(out.join(ACCURACY_JSON_FILE), &accuracy)?;
        evaluate::write_report_csv(out.join(ACCURACY_CSV_FILE), &accuracy)?;
        Ok(accuracy)
    })?;

    let (tree, forecasts) = stage(&out, "predict", || {
        let risk = abstract_risk(&model, &prepared.labeling)?;
        let root = match config.prediction.root {
            Some(root) => root,
            None => choose_root(&trajectory, &risk.risky)?,
        };
        let tree = predict(
            &mdp,
            &primary,
            &risk.risky,
            root,
            config.prediction.horizon,
            config.prediction.prob_floor,
            config.prediction.branch_cap,
        )?;
        let forecasts = risk_report(&tree);
        predict::save_tree(out.join(TREE_FILE), &tree)?;
        predict::write_risk_report(out.join(RISK_REPORT_FILE), &forecasts)?;
        std::fs::write(out.join(TREE_TEXT_FILE), predict::render_tree(&tree))?;
        Ok((tree, forecasts))
    })?;

    let summary = format!(
        "solver {}: abstract accuracy {:.4}, original accuracy {:.4}; {} risky state(s) forecast from root {}",
        primary.solver,
        accuracy.abstract_space.accuracy,
        accuracy.original_space.accuracy,
        forecasts.len(),
        tree.root,
    );
    Ok(PipelineOutcome { report, primary, accuracy, tree, forecasts, summary })
}

// ---- single-stage commands over artifacts ------------------------------

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::data(format!("{} not found; run `{hint}` first", path.display())))
    }
}

pub fn cmd_simulate(config: &PipelineConfig) -> Result<PathBuf> {
    config.validate()?;
    ensure_out_dir(config)?;
    let records = match &config.records_path {
        Some(path) => features::load_records(path)?,
        None => simulate(&config.simulation.with_seed(config.seed))?,
    };
    let path = config.out_dir.join(RECORDS_FILE);
    features::write_records(&path, &records)?;
    Ok(path)
}

pub fn cmd_discretize(config: &PipelineConfig) -> Result<()> {
    config.validate()?;
    ensure_out_dir(config)?;
    let records = features::load_records(require(config.out_dir.join(RECORDS_FILE), "simulate")?)?;
    let scheme = config.scheme();
    let states: Vec<DiscreteState> = records.iter().map(|r| discretize(r, &scheme)).collect();
    discretize::save_scheme(config.out_dir.join(SCHEME_FILE), &scheme)?;
    discretize::write_trajectory(config.out_dir.join(TRAJECTORY_FILE), &states, &scheme)?;
    Ok(())
}

pub fn cmd_abstract(config: &PipelineConfig) -> Result<()> {
    config.validate()?;
    let scheme = discretize::load_scheme(require(config.out_dir.join(SCHEME_FILE), "discretize")?)?;
    let points = states_as_points(&scheme);
    let model = fit_abstraction(&points, &config.abstraction, config.cluster_seed())?;
    cluster::save_model(config.out_dir.join(CLUSTER_FILE), &model)?;
    Ok(())
}

pub fn cmd_build(config: &PipelineConfig) -> Result<()> {
    config.validate()?;
    let scheme = discretize::load_scheme(require(config.out_dir.join(SCHEME_FILE), "discretize")?)?;
    let states =
        discretize::load_trajectory(require(config.out_dir.join(TRAJECTORY_FILE), "discretize")?, &scheme)?;
    let model = cluster::load_model(require(config.out_dir.join(CLUSTER_FILE), "abstract")?)?;
    let labeling = RiskLabeling::compute(&scheme, &config.risk)?;
    let state_indices: Vec<usize> =
        states.iter().map(|s| state_index(s, &scheme)).collect::<Result<_>>()?;
    let trajectory = abstract_trajectory(&model, &state_indices)?;
    let mdp = build_mdp(&model, &labeling, &config.risk, &trajectory, config.gamma)?;
    mdp::save_mdp(config.out_dir.join(MDP_FILE), &mdp, config.matrix_sidecar)?;
    Ok(())
}

pub fn cmd_solve(config: &PipelineConfig) -> Result<()> {
    config.validate()?;
    let mdp = mdp::load_mdp(require(config.out_dir.join(MDP_FILE), "build")?)?;
    let policies = match config.solver {
        SolverChoice::All => solve_all(&mdp, config.gamma, config.solver_epsilon, config.mpi_sweeps)?.policies,
        SolverChoice::One(kind) => {
            vec![solve(&mdp, kind, config.gamma, config.solver_epsilon, config.mpi_sweeps)?]
        }
    };
    for policy in &policies {
        solver::save_policy(config.out_dir.join(policy_file(policy.solver)), policy)?;
    }
    Ok(())
}

pub fn cmd_evaluate(config: &PipelineConfig) -> Result<AccuracyReport> {
    config.validate()?;
    let scheme = discretize::load_scheme(require(config.out_dir.join(SCHEME_FILE), "discretize")?)?;
    let model = cluster::load_model(require(config.out_dir.join(CLUSTER_FILE), "abstract")?)?;
    let policy = solver::load_policy(require(
        config.out_dir.join(policy_file(config.solver.primary())),
        "solve",
    )?)?;
    let labeling = RiskLabeling::compute(&scheme, &config.risk)?;
    let report = evaluate_policy(&policy, &model, &labeling)?;
    evaluate::save_report(config.out_dir.join(ACCURACY_JSON_FILE), &report)?;
    evaluate::write_report_csv(config.out_dir.join(ACCURACY_CSV_FILE), &report)?;
    Ok(report)
}

pub fn cmd_predict(config: &PipelineConfig) -> Result<Vec<RiskForecast>> {
    config.validate()?;
    let scheme = discretize::load_scheme(require(config.out_dir.join(SCHEME_FILE), "discretize")?)?;
    let model = cluster::load_model(require(config.out_dir.join(CLUSTER_FILE), "abstract")?)?;
    let mdp = mdp::load_mdp(require(config.out_dir.join(MDP_FILE), "build")?)?;
    let policy = solver::load_policy(require(
        config.out_dir.join(policy_file(config.solver.primary())),
        "solve",
    )?)?;
    let labeling = RiskLabeling::compute(&scheme, &config.risk)?;
    let risk = abstract_risk(&model, &labeling)?;
    let root = match config.prediction.root {
        Some(root) => root,
        None => {
            let states = discretize::load_trajectory(
                require(config.out_dir.join(TRAJECTORY_FILE), "discretize")?,
                &scheme,
            )?;
            let state_indices: Vec<usize> =
                states.iter().map(|s| state_index(s, &scheme)).collect::<Result<_>>()?;
            choose_root(&abstract_trajectory(&model, &state_indices)?, &risk.risky)?
        }
    };
    let tree = predict(
        &mdp,
        &policy,
        &risk.risky,
        root,
        config.prediction.horizon,
        config.prediction.prob_floor,
        config.prediction.branch_cap,
    )?;
    let forecasts = risk_report(&tree);
    predict::save_tree(config.out_dir.join(TREE_FILE), &tree)?;
    predict::write_risk_report(config.out_dir.join(RISK_REPORT_FILE), &forecasts)?;
    std::fs::write(config.out_dir.join(TREE_TEXT_FILE), predict::render_tree(&tree))?;
    Ok(forecasts)
}

// ---- experiment sweeps --------------------------------------------------

/// One cell of the clustering comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringCell {
    pub algorithm: ClusterAlgorithm,
    pub k: usize,
    pub original_accuracy: Option<f64>,
    /// "ok" or the error that failed the cell.
    pub status: String,
}

/// Runs the pipeline per (algorithm, K) with policy iteration and
/// reports original-space accuracies, plus the KME elbow over the same
/// cluster counts. Failed cells are marked and the sweep continues.
pub fn sweep_clustering(
    config: &PipelineConfig,
    algorithms: &[ClusterAlgorithm],
    k_list: &[usize],
) -> Result<(Vec<ClusteringCell>, ElbowData)> {
    if algorithms.is_empty() || k_list.is_empty() {
        return Err(Error::config("clustering sweep needs at least one algorithm and one K"));
    }
    let prepared = prepare(config)?;
    ensure_out_dir(config)?;

    let mut cells = Vec::new();
    for &algorithm in algorithms {
        for &k in k_list {
            let abstraction = AbstractionConfig { algorithm, k, ..config.abstraction.clone() };
            let outcome = (|| -> Result<f64> {
                let model = fit_abstraction(&prepared.points, &abstraction, config.cluster_seed())?;
                let trajectory = abstract_trajectory(&model, &prepared.state_indices)?;
                let mdp = build_mdp(&model, &prepared.labeling, &config.risk, &trajectory, config.gamma)?;
                let policy = solver::policy_iteration(&mdp, config.gamma)?;
                let report = evaluate_policy(&policy, &model, &prepared.labeling)?;
                Ok(report.original_space.accuracy)
            })();
            let cell = match outcome {
                Ok(acc) => ClusteringCell { algorithm, k, original_accuracy: Some(acc), status: "ok".into() },
                Err(e) => {
                    log::warn!("sweep cell {}@{k} failed: {e}", algorithm.name());
                    ClusteringCell { algorithm, k, original_accuracy: None, status: e.to_string() }
                }
            };
            cells.push(cell);
        }
    }

    let elbow_data = elbow(&prepared.points, k_list, config.cluster_seed())?;
    write_clustering_table(config.out_dir.join(SWEEP_CLUSTERING_FILE), &cells)?;
    write_elbow_csv(config.out_dir.join(ELBOW_FILE), &elbow_data)?;
    Ok((cells, elbow_data))
}

pub fn write_clustering_table(path: impl AsRef<Path>, cells: &[ClusteringCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["algorithm", "k", "original_accuracy", "status"])?;
    for c in cells {
        w.write_record(&[
            c.algorithm.name().to_owned(),
            c.k.to_string(),
            c.original_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            c.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_elbow_csv(path: impl AsRef<Path>, data: &ElbowData) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(file, "k,mse")?;
    for p in &data.points {
        writeln!(file, "{},{}", p.k, p.mse)?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_elbow_csv(path: impl AsRef<Path>) -> Result<ElbowData> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let mut points = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let bad = |field: &str| Error::data(format!("row {}: invalid {field}", i + 1));
        points.push(ElbowPoint {
            k: row[0].trim().parse().map_err(|_| bad("k"))?,
            mse: row[1].trim().parse().map_err(|_| bad("mse"))?,
        });
    }
    Ok(ElbowData { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub abstract_acc: f64,
    pub original_acc: f64,
}

/// Accuracy versus discount factor: one abstraction and MDP build, then
/// a modified-policy-iteration solve per gamma.
pub fn sweep_gamma(config: &PipelineConfig, gamma_list: &[f64]) -> Result<Vec<GammaRow>> {
    if gamma_list.is_empty() {
        return Err(Error::config("gamma sweep needs at least one value"));
    }
    for &g in gamma_list {
        if !(g > 0.0 && g < 1.0) {
            return Err(Error::config(format!("sweep gamma must lie in (0, 1), got {g}")));
        }
    }
    let prepared = prepare(config)?;
    ensure_out_dir(config)?;
    let model = fit_abstraction(&prepared.points, &config.abstraction, config.cluster_seed())?;
    let trajectory = abstract_trajectory(&model, &prepared.state_indices)?;
    let mdp = build_mdp(&model, &prepared.labeling, &config.risk, &trajectory, config.gamma)?;

    let mut rows = Vec::new();
    for &gamma in gamma_list {
        let policy = solver::modified_policy_iteration(&mdp, gamma, config.mpi_sweeps, config.solver_epsilon)?;
        let report = evaluate_policy(&policy, &model, &prepared.labeling)?;
        rows.push(GammaRow {
            gamma,
            abstract_acc: report.abstract_space.accuracy,
            original_acc: report.original_space.accuracy,
        });
    }
    write_gamma_table(config.out_dir.join(SWEEP_GAMMA_FILE), &rows)?;
    Ok(rows)
}

pub fn write_gamma_table(path: impl AsRef<Path>, rows: &[GammaRow]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(file, "gamma,abstract_acc,original_acc")?;
    for r in rows {
        writeln!(file, "{},{},{}", r.gamma, r.abstract_acc, r.original_acc)?;
    }
    file.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub solver: SolverKind,
    pub seconds: f64,
    pub iterations: usize,
    pub agrees_with_mpi: bool,
}

/// Times all five solvers on the built MDP and reports action-vector
/// agreement with modified policy iteration.
pub fn bench_solvers(config: &PipelineConfig) -> Result<Vec<BenchRow>> {
    let prepared = prepare(config)?;
    ensure_out_dir(config)?;
    let model = fit_abstraction(&prepared.points, &config.abstraction, config.cluster_seed())?;
    let trajectory = abstract_trajectory(&model, &prepared.state_indices)?;
    let mdp = build_mdp(&model, &prepared.labeling, &config.risk, &trajectory, config.gamma)?;
    let report = solve_all(&mdp, config.gamma, config.solver_epsilon, config.mpi_sweeps)?;
    let mpi_actions = report.policy(SolverKind::Mpi).actions.clone();
    let rows: Vec<BenchRow> = report
        .policies
        .iter()
        .map(|p| BenchRow {
            solver: p.solver,
            seconds: p.seconds,
            iterations: p.iterations,
            agrees_with_mpi: p.actions == mpi_actions,
        })
        .collect();
    write_bench_table(config.out_dir.join(BENCH_FILE), &rows)?;
    Ok(rows)
}

pub fn write_bench_table(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(file, "solver,seconds,iterations,agrees_with_mpi")?;
    for r in rows {
        writeln!(file, "{},{},{},{}", r.solver, r.seconds, r.iterations, r.agrees_with_mpi)?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coarse_config(dir: &Path) -> PipelineConfig {
        PipelineConfig {
            out_dir: dir.join("out"),
            binning: Some(BinningScheme::coarse(2)),
            abstraction: AbstractionConfig { k: 16, ..AbstractionConfig::default() },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_defaults_round_trip_and_reject_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let config = PipelineConfig::default();
        save_config(&path, &config).unwrap();
        assert_eq!(load_config(&path).unwrap(), config);

        std::fs::write(&path, "{}").unwrap();
        assert_eq!(load_config(&path).unwrap(), config);

        std::fs::write(&path, r#"{"gamme": 0.2}"#).unwrap();
        assert!(matches!(load_config(&path), Err(Error::Config(_))));

        std::fs::write(&path, r#"{"gamma": 1.5}"#).unwrap();
        assert!(matches!(load_config(&path), Err(Error::Config(_))));
    }

    #[test]
    fn pipeline_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = coarse_config(dir.path());
        let outcome = run_pipeline(&config).unwrap();
        assert_eq!(outcome.report.policies.len(), 5);
        assert!(outcome.summary.contains("accuracy"));
        for name in [
            RECORDS_FILE,
            SCHEME_FILE,
            TRAJECTORY_FILE,
            CLUSTER_FILE,
            MDP_FILE,
            ACCURACY_JSON_FILE,
            ACCURACY_CSV_FILE,
            TREE_FILE,
            TREE_TEXT_FILE,
            RISK_REPORT_FILE,
        ] {
            assert!(config.out_dir.join(name).exists(), "{name} missing");
        }
        for kind in SolverKind::ALL {
            assert!(config.out_dir.join(policy_file(kind)).exists());
        }
        assert!(!config.out_dir.join(PARTIAL_MARKER).exists());
    }

    #[test]
    fn failed_stage_leaves_partial_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = coarse_config(dir.path());
        config.abstraction.k = 100_000; // more clusters than states
        let err = run_pipeline(&config).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("abstract"));
        let marker = std::fs::read_to_string(config.out_dir.join(PARTIAL_MARKER)).unwrap();
        assert!(marker.contains("stage: abstract"));
        // Earlier artifacts were kept.
        assert!(config.out_dir.join(RECORDS_FILE).exists());
    }

    #[test]
    fn reruns_are_byte_identical_outside_timing_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = coarse_config(dir.path());
        run_pipeline(&config).unwrap();
        let first = dir.path().join("first");
        std::fs::rename(&config.out_dir, &first).unwrap();
        config.out_dir = dir.path().join("out");
        run_pipeline(&config).unwrap();

        for name in [RECORDS_FILE, SCHEME_FILE, TRAJECTORY_FILE, CLUSTER_FILE, MDP_FILE, ACCURACY_JSON_FILE, TREE_FILE, RISK_REPORT_FILE] {
            let a = std::fs::read(first.join(name)).unwrap();
            let b = std::fs::read(config.out_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
        for kind in SolverKind::ALL {
            let strip = |p: &Path| {
                let mut v: serde_json::Value =
                    serde_json::from_reader(std::fs::File::open(p).unwrap()).unwrap();
                v["seconds"] = serde_json::Value::from(0.0);
                v
            };
            assert_eq!(
                strip(&first.join(policy_file(kind))),
                strip(&config.out_dir.join(policy_file(kind))),
                "{kind} policy differs"
            );
        }
    }

    #[test]
    fn stage_commands_chain_through_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = coarse_config(dir.path());
        cmd_simulate(&config).unwrap();
        cmd_discretize(&config).unwrap();
        cmd_abstract(&config).unwrap();
        cmd_build(&config).unwrap();
        cmd_solve(&config).unwrap();
        let report = cmd_evaluate(&config).unwrap();
        assert!(report.original_space.total() > 0);
        let forecasts = cmd_predict(&config).unwrap();
        // Artifact contents match a fresh in-memory run.
        let outcome = run_pipeline(&config).unwrap();
        assert_eq!(outcome.forecasts, forecasts);
        assert_eq!(outcome.accuracy, report);
    }

    #[test]
    fn missing_artifacts_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let config = coarse_config(dir.path());
        let err = cmd_build(&config).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("discretize"));
    }

    #[test]
    fn clustering_sweep_marks_failed_cells_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let config = coarse_config(dir.path());
        let (cells, elbow_data) = sweep_clustering(
            &config,
            &[ClusterAlgorithm::Kme, ClusterAlgorithm::Gmm],
            &[8, 16, 100_000],
        )
        .unwrap();
        assert_eq!(cells.len(), 6);
        let failed: Vec<_> = cells.iter().filter(|c| c.status != "ok").collect();
        assert_eq!(failed.len(), 2);
        assert!(failed.iter().all(|c| c.k == 100_000 && c.original_accuracy.is_none()));
        assert!(cells.iter().filter(|c| c.status == "ok").all(|c| c.original_accuracy.is_some()));
        // Elbow rows follow the K list; monotone over the valid prefix.
        assert_eq!(elbow_data.points.len(), 3);

        let table = std::fs::read_to_string(config.out_dir.join(SWEEP_CLUSTERING_FILE)).unwrap();
        assert!(table.starts_with("algorithm,k,original_accuracy,status\n"));
        let reloaded = load_elbow_csv(config.out_dir.join(ELBOW_FILE)).unwrap();
        assert_eq!(reloaded, elbow_data);
    }

    #[test]
    fn clustering_sweep_rejects_k_above_state_count_in_elbow() {
        // A K list that cannot cluster at all fails fast.
        let dir = tempfile::tempdir().unwrap();
        let config = coarse_config(dir.path());
        assert!(sweep_clustering(&config, &[], &[8]).is_err());
    }

    #[test]
    fn gamma_sweep_emits_one_row_per_value_with_duplicates_equal() {
        let dir = tempfile::tempdir().unwrap();
        let config = coarse_config(dir.path());
        let rows = sweep_gamma(&config, &[0.1, 0.5, 0.5]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1], GammaRow { gamma: 0.5, ..rows[2].clone() });
        assert_eq!(rows[1].abstract_acc, rows[2].abstract_acc);
        let table = std::fs::read_to_string(config.out_dir.join(SWEEP_GAMMA_FILE)).unwrap();
        assert!(table.starts_with("gamma,abstract_acc,original_acc\n"));
        assert!(sweep_gamma(&config, &[1.2]).is_err());
    }

    #[test]
    fn bench_reports_five_rows() {
        let dir = tempfile::tempdir().unwrap();
        let config = coarse_config(dir.path());
        let rows = bench_solvers(&config).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.seconds > 0.0));
        assert!(rows.iter().find(|r| r.solver == SolverKind::Mpi).unwrap().agrees_with_mpi);
        let table = std::fs::read_to_string(config.out_dir.join(BENCH_FILE)).unwrap();
        assert!(table.starts_with("solver,seconds,iterations,agrees_with_mpi\n"));
    }

    #[test]
    fn root_selection_prefers_last_safe_step() {
        let risky = vec![false, true, false];
        assert_eq!(choose_root(&[0, 1, 2, 1], &risky).unwrap(), 2);
        assert_eq!(choose_root(&[0, 2, 1], &risky).unwrap(), 2);
        assert!(choose_root(&[1, 1], &risky).is_err());
    }
}
