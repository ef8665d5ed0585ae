//! Per-second feature records: synthetic traffic generation and CSV
//! ingestion.
//!
//! Seven features describe each second of subsystem activity: four
//! traffic features (request count, unique users, request/user ratio,
//! average bytes sent), two performance features (average latency and
//! response time, both in milliseconds) and one categorical DoS feature
//! carrying the SYN/UDP/ICMP flood flags.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flood-attack indicator flags for one time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DosFlags {
    pub syn: bool,
    pub udp: bool,
    pub icmp: bool,
}

impl DosFlags {
    pub const NONE: DosFlags = DosFlags { syn: false, udp: false, icmp: false };

    /// Categorical code in `[0, 8)`: syn contributes 4, udp 2, icmp 1.
    pub fn code(self) -> usize {
        ((self.syn as usize) << 2) | ((self.udp as usize) << 1) | (self.icmp as usize)
    }

    pub fn any(self) -> bool {
        self.syn || self.udp || self.icmp
    }
}

/// One second of raw subsystem observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    /// Time step index (seconds).
    pub t: u64,
    /// HTTP GET/POST requests during this second.
    pub http_requests: u32,
    /// Users logged in and active during this second.
    pub unique_users: u32,
    /// `http_requests / unique_users`, or 0 when no users are active.
    pub req_user_ratio: f64,
    /// Average request payload in bytes.
    pub avg_bytes_sent: f64,
    /// Average server latency in milliseconds.
    pub avg_latency: f64,
    /// Average server response time in milliseconds.
    pub avg_response_time: f64,
    pub dos_flags: DosFlags,
}

impl FeatureRecord {
    /// Ratio implied by the request and user counts.
    pub fn expected_ratio(http_requests: u32, unique_users: u32) -> f64 {
        if unique_users == 0 {
            0.0
        } else {
            f64::from(http_requests) / f64::from(unique_users)
        }
    }

    /// Checks the record invariants: non-negative values and a
    /// consistent request/user ratio (within `tol`).
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (name, v) in [
            ("req_user_ratio", self.req_user_ratio),
            ("avg_bytes_sent", self.avg_bytes_sent),
            ("avg_latency", self.avg_latency),
            ("avg_response_time", self.avg_response_time),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::data(format!("t={}: {name} must be finite and >= 0, got {v}", self.t)));
            }
        }
        let expected = Self::expected_ratio(self.http_requests, self.unique_users);
        if (self.req_user_ratio - expected).abs() > tol {
            return Err(Error::data(format!(
                "t={}: req_user_ratio {} inconsistent with {}/{} (expected {expected})",
                self.t, self.req_user_ratio, self.http_requests, self.unique_users
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Syn,
    Udp,
    Icmp,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Syn, AttackKind::Udp, AttackKind::Icmp];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Syn => "syn",
            AttackKind::Udp => "udp",
            AttackKind::Icmp => "icmp",
        }
    }
}

/// Half-open interval `[start, end)` of steps under a flood attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackInterval {
    pub start: usize,
    pub end: usize,
    pub kind: AttackKind,
}

/// Normal-load shape and attack inflation factors for the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadParams {
    /// Target mean HTTP requests per second.
    pub mean_request_rate: f64,
    /// Mean concurrently active users.
    pub mean_user_count: f64,
    pub user_count_sd: f64,
    pub ratio_sd: f64,
    pub mean_bytes_sent: f64,
    pub bytes_sd: f64,
    pub latency_baseline_ms: f64,
    pub latency_sd: f64,
    pub response_baseline_ms: f64,
    pub response_sd: f64,
    /// Latency multiplier applied while any attack is active.
    pub attack_latency_mult: f64,
    /// Response-time multiplier applied while any attack is active.
    pub attack_response_mult: f64,
}

impl Default for LoadParams {
    fn default() -> Self {
        LoadParams {
            mean_request_rate: 30.0,
            mean_user_count: 18.0,
            user_count_sd: 5.0,
            ratio_sd: 0.4,
            mean_bytes_sent: 1050.0,
            bytes_sd: 90.0,
            latency_baseline_ms: 700.0,
            latency_sd: 150.0,
            response_baseline_ms: 1800.0,
            response_sd: 400.0,
            attack_latency_mult: 3.0,
            attack_response_mult: 2.5,
        }
    }
}

/// Configuration for one synthetic capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub duration_steps: usize,
    pub seed: u64,
    pub attack_schedule: Vec<AttackInterval>,
    pub load: LoadParams,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            duration_steps: 300,
            seed: 42,
            attack_schedule: default_attack_schedule(),
            load: LoadParams::default(),
        }
    }
}

/// Default schedule: one window per flood type plus an overlapping
/// SYN+UDP window so combined DoS codes appear in the data.
pub fn default_attack_schedule() -> Vec<AttackInterval> {
    vec![
        AttackInterval { start: 60, end: 90, kind: AttackKind::Syn },
        AttackInterval { start: 120, end: 150, kind: AttackKind::Udp },
        AttackInterval { start: 180, end: 210, kind: AttackKind::Icmp },
        AttackInterval { start: 240, end: 255, kind: AttackKind::Syn },
        AttackInterval { start: 250, end: 265, kind: AttackKind::Udp },
    ]
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        for iv in &self.attack_schedule {
            if iv.start >= iv.end || iv.end > self.duration_steps {
                return Err(Error::config(format!(
                    "attack interval [{}, {}) must lie within [0, {})",
                    iv.start, iv.end, self.duration_steps
                )));
            }
        }
        // Same attack type may not overlap itself.
        for kind in AttackKind::ALL {
            let mut ivs: Vec<_> =
                self.attack_schedule.iter().filter(|iv| iv.kind == kind).collect();
            ivs.sort_by_key(|iv| iv.start);
            for w in ivs.windows(2) {
                if w[1].start < w[0].end {
                    return Err(Error::config(format!(
                        "{} intervals [{}, {}) and [{}, {}) overlap",
                        kind.name(),
                        w[0].start,
                        w[0].end,
                        w[1].start,
                        w[1].end
                    )));
                }
            }
        }
        let l = &self.load;
        for (name, v) in [
            ("mean_request_rate", l.mean_request_rate),
            ("mean_user_count", l.mean_user_count),
            ("user_count_sd", l.user_count_sd),
            ("ratio_sd", l.ratio_sd),
            ("mean_bytes_sent", l.mean_bytes_sent),
            ("bytes_sd", l.bytes_sd),
            ("latency_baseline_ms", l.latency_baseline_ms),
            ("latency_sd", l.latency_sd),
            ("response_baseline_ms", l.response_baseline_ms),
            ("response_sd", l.response_sd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("load parameter {name} must be finite and >= 0, got {v}")));
            }
        }
        if l.attack_latency_mult < 1.0 || l.attack_response_mult < 1.0 {
            return Err(Error::config("attack inflation multipliers must be >= 1"));
        }
        Ok(())
    }

    /// DoS flags active at step `t` under the schedule.
    pub fn flags_at(&self, t: usize) -> DosFlags {
        let mut flags = DosFlags::NONE;
        for iv in &self.attack_schedule {
            if t >= iv.start && t < iv.end {
                match iv.kind {
                    AttackKind::Syn => flags.syn = true,
                    AttackKind::Udp => flags.udp = true,
                    AttackKind::Icmp => flags.icmp = true,
                }
            }
        }
        flags
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    // Clipped rather than resampled: one draw per value keeps the
    // stream position independent of earlier outcomes.
    let v = if sd > 0.0 {
        Normal::new(mean, sd).expect("valid normal").sample(rng)
    } else {
        mean
    };
    v.clamp(lo, hi)
}

/// Generates `duration_steps` records of normal traffic with the
/// configured flood attacks injected on top.
///
/// Deterministic for a fixed seed. Attacks set the corresponding DoS
/// flags and inflate latency and response time by the configured
/// multipliers (applied once per step while at least one attack is
/// active), clipped back into the feature ranges.
pub fn simulate(config: &SimulationConfig) -> Result<Vec<FeatureRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let l = &config.load;
    let mean_ratio = (l.mean_request_rate / l.mean_user_count.max(1.0)).clamp(1.0, 4.0);

    let mut records = Vec::with_capacity(config.duration_steps);
    for t in 0..config.duration_steps {
        let users =
            truncated_normal(&mut rng, l.mean_user_count, l.user_count_sd, 1.0, 50.0).round();
        let ratio_target = truncated_normal(&mut rng, mean_ratio, l.ratio_sd, 1.0, 4.0);
        // Clamping requests to [users, min(50, 4*users)] keeps the
        // realized ratio inside [1, 4] after rounding.
        let requests = (users * ratio_target).round().clamp(users, (4.0 * users).min(50.0));
        let bytes = truncated_normal(&mut rng, l.mean_bytes_sent, l.bytes_sd, 800.0, 1300.0);
        let mut latency =
            truncated_normal(&mut rng, l.latency_baseline_ms, l.latency_sd, 100.0, 3500.0);
        let mut response =
            truncated_normal(&mut rng, l.response_baseline_ms, l.response_sd, 0.0, 8000.0);

        let flags = config.flags_at(t);
        if flags.any() {
            latency = (latency * l.attack_latency_mult).clamp(100.0, 3500.0);
            response = (response * l.attack_response_mult).clamp(0.0, 8000.0);
        }

        let users = users as u32;
        let requests = requests as u32;
        records.push(FeatureRecord {
            t: t as u64,
            http_requests: requests,
            unique_users: users,
            req_user_ratio: FeatureRecord::expected_ratio(requests, users),
            avg_bytes_sent: bytes,
            avg_latency: latency,
            avg_response_time: response,
            dos_flags: flags,
        });
    }
    Ok(records)
}

pub const RECORDS_CSV_HEADER: &str =
    "t,http_requests,unique_users,req_user_ratio,avg_bytes_sent,avg_latency,avg_response_time,syn,udp,icmp";

/// Writes records as CSV with the canonical header; booleans as 0/1.
pub fn write_records(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(RECORDS_CSV_HEADER.split(','))?;
    for r in records {
        w.write_record(&[
            r.t.to_string(),
            r.http_requests.to_string(),
            r.unique_users.to_string(),
            r.req_user_ratio.to_string(),
            r.avg_bytes_sent.to_string(),
            r.avg_latency.to_string(),
            r.avg_response_time.to_string(),
            (r.dos_flags.syn as u8).to_string(),
            (r.dos_flags.udp as u8).to_string(),
            (r.dos_flags.icmp as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(row: usize, name: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::data(format!("row {row}: invalid value {raw:?} for {name}")))
}

fn parse_flag(row: usize, name: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::data(format!("row {row}: flag {name} must be 0 or 1, got {other:?}"))),
    }
}

/// Loads records from CSV, recomputing and checking the request/user
/// ratio against the stored column (tolerance 1e-6). Row numbers in
/// errors are 1-based data rows (the header is row 0).
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let expected: Vec<&str> = RECORDS_CSV_HEADER.split(',').collect();
    if header != expected {
        return Err(Error::data(format!(
            "unexpected header {:?}, want {RECORDS_CSV_HEADER:?}",
            header.join(",")
        )));
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let n = i + 1;
        if row.len() != expected.len() {
            return Err(Error::data(format!("row {n}: expected {} fields, got {}", expected.len(), row.len())));
        }
        let record = FeatureRecord {
            t: parse_field(n, "t", &row[0])?,
            http_requests: parse_field(n, "http_requests", &row[1])?,
            unique_users: parse_field(n, "unique_users", &row[2])?,
            req_user_ratio: parse_field(n, "req_user_ratio", &row[3])?,
            avg_bytes_sent: parse_field(n, "avg_bytes_sent", &row[4])?,
            avg_latency: parse_field(n, "avg_latency", &row[5])?,
            avg_response_time: parse_field(n, "avg_response_time", &row[6])?,
            dos_flags: DosFlags {
                syn: parse_flag(n, "syn", &row[7])?,
                udp: parse_flag(n, "udp", &row[8])?,
                icmp: parse_flag(n, "icmp", &row[9])?,
            },
        };
        record.validate(1e-6).map_err(|e| Error::data(format!("row {n}: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write as _;

    #[test]
    fn default_run_produces_300_records() {
        let records = simulate(&SimulationConfig::default()).unwrap();
        assert_eq!(records.len(), 300);
    }

    #[test]
    fn empty_schedule_has_no_flags() {
        let config =
            SimulationConfig { attack_schedule: vec![], ..SimulationConfig::default() };
        let records = simulate(&config).unwrap();
        assert!(records.iter().all(|r| r.dos_flags == DosFlags::NONE));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let config = SimulationConfig::default();
        assert_eq!(simulate(&config).unwrap(), simulate(&config).unwrap());
    }

    #[test]
    fn flags_match_schedule_exactly() {
        let config = SimulationConfig::default();
        let records = simulate(&config).unwrap();
        for (t, r) in records.iter().enumerate() {
            assert_eq!(r.dos_flags, config.flags_at(t), "step {t}");
        }
        // The overlapping SYN+UDP window yields code 6.
        assert_eq!(records[252].dos_flags.code(), 6);
    }

    #[test]
    fn default_run_stays_in_feature_ranges() {
        let records = simulate(&SimulationConfig::default()).unwrap();
        for r in &records {
            assert!(r.http_requests <= 50);
            assert!(r.unique_users >= 1 && r.unique_users <= 50);
            assert!((1.0..=4.0).contains(&r.req_user_ratio), "ratio {}", r.req_user_ratio);
            assert!((800.0..=1300.0).contains(&r.avg_bytes_sent));
            assert!((100.0..=3500.0).contains(&r.avg_latency));
            assert!((0.0..=8000.0).contains(&r.avg_response_time));
            r.validate(1e-9).unwrap();
        }
    }

    #[test]
    fn attacks_inflate_latency_and_response() {
        let mut config = SimulationConfig::default();
        config.load.latency_sd = 0.0;
        config.load.response_sd = 0.0;
        let records = simulate(&config).unwrap();
        let quiet = &records[0];
        let attacked = &records[70];
        assert!(attacked.dos_flags.syn);
        assert!(attacked.avg_latency > quiet.avg_latency * 2.0);
        assert!(attacked.avg_response_time > quiet.avg_response_time * 2.0);
    }

    #[test]
    fn invalid_interval_rejected() {
        let bad = SimulationConfig {
            duration_steps: 100,
            attack_schedule: vec![AttackInterval { start: 90, end: 120, kind: AttackKind::Syn }],
            ..SimulationConfig::default()
        };
        assert!(matches!(simulate(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn self_overlapping_intervals_rejected() {
        let bad = SimulationConfig {
            attack_schedule: vec![
                AttackInterval { start: 10, end: 30, kind: AttackKind::Udp },
                AttackInterval { start: 20, end: 40, kind: AttackKind::Udp },
            ],
            ..SimulationConfig::default()
        };
        assert!(matches!(simulate(&bad), Err(Error::Config(_))));
        // Overlap across different kinds is allowed.
        let ok = SimulationConfig {
            attack_schedule: vec![
                AttackInterval { start: 10, end: 30, kind: AttackKind::Udp },
                AttackInterval { start: 20, end: 40, kind: AttackKind::Syn },
            ],
            ..SimulationConfig::default()
        };
        assert!(simulate(&ok).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let records = simulate(&SimulationConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        write_records(&path, &records).unwrap();
        assert_eq!(load_records(&path).unwrap(), records);
    }

    #[test]
    fn parses_flagged_row_field_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{RECORDS_CSV_HEADER}").unwrap();
        writeln!(f, "0,5,2,2.5,900,150,300,1,0,0").unwrap();
        drop(f);
        let records = load_records(&path).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.t, 0);
        assert_eq!(r.http_requests, 5);
        assert_eq!(r.unique_users, 2);
        assert_eq!(r.req_user_ratio, 2.5);
        assert_eq!(r.avg_bytes_sent, 900.0);
        assert_eq!(r.avg_latency, 150.0);
        assert_eq!(r.avg_response_time, 300.0);
        assert_eq!(r.dos_flags, DosFlags { syn: true, udp: false, icmp: false });
    }

    #[test]
    fn zero_users_means_zero_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{RECORDS_CSV_HEADER}").unwrap();
        writeln!(f, "0,0,0,0,900,150,300,0,0,0").unwrap();
        drop(f);
        let records = load_records(&path).unwrap();
        assert_eq!(records[0].req_user_ratio, 0.0);
    }

    #[test]
    fn malformed_row_names_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{RECORDS_CSV_HEADER}").unwrap();
        writeln!(f, "0,5,2,2.5,900,150,300,0,0,0").unwrap();
        writeln!(f, "1,abc,2,2.5,900,150,300,0,0,0").unwrap();
        drop(f);
        let err = load_records(&path).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn ratio_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratio.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{RECORDS_CSV_HEADER}").unwrap();
        writeln!(f, "0,5,2,2.6,900,150,300,0,0,0").unwrap();
        drop(f);
        let err = load_records(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    fn arb_schedule(duration: usize) -> impl Strategy<Value = Vec<AttackInterval>> {
        // One non-overlapping window per kind at most.
        proptest::collection::vec((0..3usize, 1..=duration, 1..=duration), 0..3).prop_map(
            move |raw| {
                let mut out = Vec::new();
                for (i, (k, a, b)) in raw.into_iter().enumerate() {
                    let kind = AttackKind::ALL[(k + i) % 3];
                    if out.iter().any(|iv: &AttackInterval| iv.kind == kind) {
                        continue;
                    }
                    let (start, end) = if a <= b { (a - 1, b) } else { (b - 1, a) };
                    out.push(AttackInterval { start, end, kind });
                }
                out
            },
        )
    }

    proptest! {
        #[test]
        fn simulated_records_satisfy_invariants(
            seed in any::<u64>(),
            duration in 1usize..120,
            mean_users in 1.0f64..45.0,
            mean_rate in 1.0f64..50.0,
            schedule_seed in 0usize..4,
        ) {
            let mut config = SimulationConfig {
                duration_steps: duration,
                seed,
                attack_schedule: vec![],
                load: LoadParams {
                    mean_user_count: mean_users,
                    mean_request_rate: mean_rate,
                    ..LoadParams::default()
                },
            };
            if schedule_seed > 0 && duration > 4 {
                config.attack_schedule = vec![AttackInterval {
                    start: duration / 4,
                    end: duration / 2,
                    kind: AttackKind::ALL[schedule_seed % 3],
                }];
            }
            let records = simulate(&config).unwrap();
            prop_assert_eq!(records.len(), duration);
            for r in &records {
                r.validate(1e-9).unwrap();
            }
        }

        #[test]
        fn random_schedules_round_trip(seed in any::<u64>(), schedule in arb_schedule(80)) {
            let config = SimulationConfig {
                duration_steps: 80,
                seed,
                attack_schedule: schedule,
                ..SimulationConfig::default()
            };
            let records = simulate(&config).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.csv");
            write_records(&path, &records).unwrap();
            prop_assert_eq!(load_records(&path).unwrap(), records);
        }
    }
}
