//! Equal-width binning of feature records and enumeration of the
//! resulting state space.
//!
//! Each continuous feature maps to `floor((v - lower) / width)` clipped
//! into `[0, count)`: bins are half-open `[lower + k*width, lower +
//! (k+1)*width)` with the top bin closed, values below the lower bound
//! clip to bin 0 and values at or above the upper bound clip to the top
//! bin. The DoS feature is categorical with 8 codes (syn=4, udp=2,
//! icmp=1). A state is the tuple of codes; its mixed-radix index orders
//! the full space.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinKind {
    Continuous { lower: f64, upper: f64, width: f64 },
    Categorical,
}

/// Bin configuration for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBins {
    pub name: String,
    /// Number of discrete codes this feature can take.
    pub count: usize,
    #[serde(flatten)]
    pub kind: BinKind,
}

impl FeatureBins {
    pub fn continuous(name: &str, lower: f64, upper: f64, width: f64, count: usize) -> Self {
        FeatureBins { name: name.to_owned(), count, kind: BinKind::Continuous { lower, upper, width } }
    }

    pub fn categorical(name: &str, count: usize) -> Self {
        FeatureBins { name: name.to_owned(), count, kind: BinKind::Categorical }
    }
}

/// Per-feature binning configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub features: Vec<FeatureBins>,
}

impl BinningScheme {
    /// The default scheme: requests and users 5 bins of width 10 over
    /// 0-50, ratio 4 bins of width 0.75 over 1-4, bytes 4 bins of width
    /// 125 over 800-1300, latency 4 bins of width 850 over 100-3500,
    /// response time 4 bins of width 2000 over 0-8000, DoS 8 codes.
    /// 5*5*4*4*4*4*8 = 51200 states.
    pub fn standard() -> Self {
        BinningScheme {
            features: vec![
                FeatureBins::continuous("http_requests", 0.0, 50.0, 10.0, 5),
                FeatureBins::continuous("unique_users", 0.0, 50.0, 10.0, 5),
                FeatureBins::continuous("req_user_ratio", 1.0, 4.0, 0.75, 4),
                FeatureBins::continuous("avg_bytes_sent", 800.0, 1300.0, 125.0, 4),
                FeatureBins::continuous("avg_latency", 100.0, 3500.0, 850.0, 4),
                FeatureBins::continuous("avg_response_time", 0.0, 8000.0, 2000.0, 4),
                FeatureBins::categorical("dos", 8),
            ],
        }
    }

    /// A coarse variant with `bins` codes per continuous feature (the
    /// DoS feature keeps its 8 codes). Useful for small-state runs.
    pub fn coarse(bins: usize) -> Self {
        let mut scheme = Self::standard();
        for f in &mut scheme.features {
            if let BinKind::Continuous { lower, upper, ref mut width } = f.kind {
                *width = (upper - lower) / bins as f64;
                f.count = bins;
            }
        }
        scheme
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::config("binning scheme has no features"));
        }
        for f in &self.features {
            if f.count == 0 {
                return Err(Error::config(format!("feature {}: bin count must be >= 1", f.name)));
            }
            if let BinKind::Continuous { lower, upper, width } = f.kind {
                if !(lower.is_finite() && upper.is_finite() && width.is_finite()) {
                    return Err(Error::config(format!("feature {}: bounds must be finite", f.name)));
                }
                if upper <= lower || width <= 0.0 {
                    return Err(Error::config(format!(
                        "feature {}: need upper > lower and width > 0",
                        f.name
                    )));
                }
                let span = upper - lower;
                if (f.count as f64) * width < span - 1e-9 * span.abs() {
                    return Err(Error::config(format!(
                        "feature {}: {} bins of width {width} do not cover [{lower}, {upper}]",
                        f.name, f.count
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether the scheme matches the seven-feature record layout: six
    /// continuous features in record order followed by the categorical
    /// DoS feature.
    pub fn is_record_compatible(&self) -> bool {
        self.features.len() == 7
            && self.features[..6].iter().all(|f| matches!(f.kind, BinKind::Continuous { .. }))
            && matches!(self.features[6].kind, BinKind::Categorical)
    }

    pub fn dimensions(&self) -> usize {
        self.features.len()
    }
}

/// A state as the tuple of per-feature bin codes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteState {
    pub codes: Vec<usize>,
}

impl DiscreteState {
    pub fn new(codes: Vec<usize>) -> Self {
        DiscreteState { codes }
    }

    /// Codes reinterpreted as a point in feature space.
    pub fn as_point(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| c as f64).collect()
    }
}

fn bin_code(value: f64, lower: f64, width: f64, count: usize) -> usize {
    if !(value > lower) {
        return 0;
    }
    let raw = ((value - lower) / width).floor();
    if raw.is_nan() || raw < 0.0 {
        0
    } else {
        (raw as usize).min(count - 1)
    }
}

/// Maps a record to its state under the scheme. Clipping makes this
/// total; the scheme must be record-compatible.
pub fn discretize(record: &FeatureRecord, scheme: &BinningScheme) -> DiscreteState {
    assert!(scheme.is_record_compatible(), "scheme does not match the record layout");
    let values = [
        f64::from(record.http_requests),
        f64::from(record.unique_users),
        record.req_user_ratio,
        record.avg_bytes_sent,
        record.avg_latency,
        record.avg_response_time,
    ];
    let mut codes = Vec::with_capacity(7);
    for (v, f) in values.iter().zip(&scheme.features[..6]) {
        match f.kind {
            BinKind::Continuous { lower, width, .. } => codes.push(bin_code(*v, lower, width, f.count)),
            BinKind::Categorical => unreachable!(),
        }
    }
    codes.push(record.dos_flags.code().min(scheme.features[6].count - 1));
    DiscreteState::new(codes)
}

/// Total number of states: the product of all per-feature bin counts.
pub fn state_space_size(scheme: &BinningScheme) -> usize {
    scheme.features.iter().map(|f| f.count).product()
}

/// Mixed-radix index of a state; inverse of [`state_from_index`].
pub fn state_index(state: &DiscreteState, scheme: &BinningScheme) -> Result<usize> {
    if state.codes.len() != scheme.features.len() {
        return Err(Error::config(format!(
            "state has {} codes, scheme has {} features",
            state.codes.len(),
            scheme.features.len()
        )));
    }
    let mut index = 0usize;
    for (code, f) in state.codes.iter().zip(&scheme.features) {
        if *code >= f.count {
            return Err(Error::config(format!(
                "code {code} out of range for feature {} ({} bins)",
                f.name, f.count
            )));
        }
        index = index * f.count + code;
    }
    Ok(index)
}

pub fn state_from_index(mut index: usize, scheme: &BinningScheme) -> Result<DiscreteState> {
    let size = state_space_size(scheme);
    if index >= size {
        return Err(Error::config(format!("state index {index} out of range for |S| = {size}")));
    }
    let mut codes = vec![0usize; scheme.features.len()];
    for (slot, f) in codes.iter_mut().zip(&scheme.features).rev() {
        *slot = index % f.count;
        index /= f.count;
    }
    Ok(DiscreteState::new(codes))
}

/// All states in mixed-radix order; the k-th element has index k.
pub fn enumerate_states(scheme: &BinningScheme) -> Vec<DiscreteState> {
    let size = state_space_size(scheme);
    let dims = scheme.features.len();
    let mut states = Vec::with_capacity(size);
    let mut codes = vec![0usize; dims];
    for _ in 0..size {
        states.push(DiscreteState::new(codes.clone()));
        // Odometer increment, least-significant feature last.
        for (slot, f) in codes.iter_mut().zip(&scheme.features).rev() {
            *slot += 1;
            if *slot < f.count {
                break;
            }
            *slot = 0;
        }
    }
    states
}

/// The enumerated state space as clustering inputs (codes as floats).
pub fn states_as_points(scheme: &BinningScheme) -> Vec<Vec<f64>> {
    enumerate_states(scheme).iter().map(DiscreteState::as_point).collect()
}

pub fn save_scheme(path: impl AsRef<Path>, scheme: &BinningScheme) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), scheme)?;
    Ok(())
}

pub fn load_scheme(path: impl AsRef<Path>) -> Result<BinningScheme> {
    let file = std::fs::File::open(path.as_ref())?;
    let scheme: BinningScheme = serde_json::from_reader(std::io::BufReader::new(file))?;
    scheme.validate()?;
    Ok(scheme)
}

/// Writes a discretized trajectory: one row per step, the per-feature
/// codes followed by the mixed-radix state index.
pub fn write_trajectory(
    path: impl AsRef<Path>,
    states: &[DiscreteState],
    scheme: &BinningScheme,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = scheme.features.iter().map(|f| f.name.clone()).collect();
    header.push("state_index".to_owned());
    w.write_record(&header)?;
    for s in states {
        let mut row: Vec<String> = s.codes.iter().map(usize::to_string).collect();
        row.push(state_index(s, scheme)?.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trajectory written by [`write_trajectory`], checking each
/// row's index column against the recomputed mixed-radix index.
pub fn load_trajectory(path: impl AsRef<Path>, scheme: &BinningScheme) -> Result<Vec<DiscreteState>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let dims = scheme.features.len();
    let mut states = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let n = i + 1;
        if row.len() != dims + 1 {
            return Err(Error::data(format!("row {n}: expected {} fields, got {}", dims + 1, row.len())));
        }
        let mut codes = Vec::with_capacity(dims);
        for j in 0..dims {
            let code: usize = row[j]
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("row {n}: invalid code {:?}", &row[j])))?;
            codes.push(code);
        }
        let state = DiscreteState::new(codes);
        let index = state_index(&state, scheme).map_err(|e| Error::data(format!("row {n}: {e}")))?;
        let stored: usize = row[dims]
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("row {n}: invalid state index {:?}", &row[dims])))?;
        if stored != index {
            return Err(Error::data(format!("row {n}: stored index {stored} != recomputed {index}")));
        }
        states.push(state);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{simulate, DosFlags, SimulationConfig};
    use proptest::prelude::*;

    fn record_with(
        requests: u32,
        users: u32,
        bytes: f64,
        latency: f64,
        response: f64,
        flags: DosFlags,
    ) -> FeatureRecord {
        FeatureRecord {
            t: 0,
            http_requests: requests,
            unique_users: users,
            req_user_ratio: FeatureRecord::expected_ratio(requests, users),
            avg_bytes_sent: bytes,
            avg_latency: latency,
            avg_response_time: response,
            dos_flags: flags,
        }
    }

    #[test]
    fn standard_scheme_has_51200_states() {
        let scheme = BinningScheme::standard();
        scheme.validate().unwrap();
        assert_eq!(state_space_size(&scheme), 51200);
    }

    #[test]
    fn binary_and_single_feature_sizes() {
        let all_binary = BinningScheme {
            features: (0..7).map(|i| FeatureBins::categorical(&format!("f{i}"), 2)).collect(),
        };
        assert_eq!(state_space_size(&all_binary), 128);
        let single = BinningScheme {
            features: vec![FeatureBins::continuous("only", 0.0, 4.0, 1.0, 4)],
        };
        assert_eq!(state_space_size(&single), 4);
    }

    #[test]
    fn request_count_23_bins_to_2() {
        let scheme = BinningScheme::standard();
        let r = record_with(23, 10, 900.0, 200.0, 500.0, DosFlags::NONE);
        let s = discretize(&r, &scheme);
        assert_eq!(s.codes[0], 2);
    }

    #[test]
    fn dos_code_packs_bits() {
        let scheme = BinningScheme::standard();
        let flags = DosFlags { syn: true, udp: false, icmp: true };
        let r = record_with(10, 10, 900.0, 200.0, 500.0, flags);
        assert_eq!(discretize(&r, &scheme).codes[6], 5);
    }

    #[test]
    fn lower_bounds_map_to_zero_state() {
        let scheme = BinningScheme::standard();
        let r = record_with(0, 0, 800.0, 100.0, 0.0, DosFlags::NONE);
        assert_eq!(discretize(&r, &scheme).codes, vec![0; 7]);
    }

    #[test]
    fn upper_bound_clips_to_top_bin() {
        let scheme = BinningScheme::standard();
        let r = record_with(50, 50, 1300.0, 3500.0, 8000.0, DosFlags::NONE);
        let s = discretize(&r, &scheme);
        assert_eq!(s.codes[..6], [4, 4, 3, 3, 3, 3]);
        // Below-lower values clip to 0.
        let r = record_with(2, 4, 100.0, 10.0, 0.0, DosFlags::NONE);
        assert_eq!(discretize(&r, &scheme).codes[2..6], [0, 0, 0, 0]);
    }

    #[test]
    fn enumeration_starts_at_origin_and_matches_indices() {
        let scheme = BinningScheme::standard();
        let states = enumerate_states(&scheme);
        assert_eq!(states.len(), 51200);
        assert_eq!(states[0].codes, vec![0; 7]);
        for k in [0usize, 1, 7, 8, 51199, 12345] {
            assert_eq!(state_index(&states[k], &scheme).unwrap(), k);
        }
    }

    #[test]
    fn last_state_has_index_51199() {
        // ((((((4*5+4)*4+3)*4+3)*4+3)*4+3)*8+7) evaluated by hand.
        let scheme = BinningScheme::standard();
        let state = DiscreteState::new(vec![4, 4, 3, 3, 3, 3, 7]);
        assert_eq!(state_index(&state, &scheme).unwrap(), 51199);
    }

    #[test]
    fn out_of_range_code_rejected() {
        let scheme = BinningScheme::standard();
        let state = DiscreteState::new(vec![5, 0, 0, 0, 0, 0, 0]);
        assert!(state_index(&state, &scheme).is_err());
        assert!(state_from_index(51200, &scheme).is_err());
    }

    #[test]
    fn coarse_scheme_covers_ranges() {
        let scheme = BinningScheme::coarse(2);
        scheme.validate().unwrap();
        assert_eq!(state_space_size(&scheme), 512);
    }

    #[test]
    fn scheme_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scheme.json");
        let scheme = BinningScheme::standard();
        save_scheme(&path, &scheme).unwrap();
        assert_eq!(load_scheme(&path).unwrap(), scheme);
    }

    #[test]
    fn trajectory_round_trip_and_index_check() {
        let scheme = BinningScheme::standard();
        let records = simulate(&SimulationConfig::default()).unwrap();
        let states: Vec<_> = records.iter().map(|r| discretize(r, &scheme)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.csv");
        write_trajectory(&path, &states, &scheme).unwrap();
        assert_eq!(load_trajectory(&path, &scheme).unwrap(), states);
    }

    #[test]
    fn simulated_records_stay_in_code_ranges() {
        let scheme = BinningScheme::standard();
        let records = simulate(&SimulationConfig::default()).unwrap();
        for r in &records {
            let s = discretize(r, &scheme);
            for (code, f) in s.codes.iter().zip(&scheme.features) {
                assert!(*code < f.count);
            }
        }
    }

    proptest! {
        #[test]
        fn discretize_is_monotone_per_feature(
            a in 0.0f64..9000.0,
            b in 0.0f64..9000.0,
            feature in 3usize..6,
        ) {
            let scheme = BinningScheme::standard();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut r1 = record_with(10, 10, 900.0, 200.0, 500.0, DosFlags::NONE);
            let mut r2 = r1.clone();
            let set = |r: &mut FeatureRecord, v: f64| match feature {
                3 => r.avg_bytes_sent = v,
                4 => r.avg_latency = v,
                _ => r.avg_response_time = v,
            };
            set(&mut r1, lo);
            set(&mut r2, hi);
            prop_assert!(discretize(&r1, &scheme).codes[feature] <= discretize(&r2, &scheme).codes[feature]);
        }

        #[test]
        fn index_state_bijection(index in 0usize..51200) {
            let scheme = BinningScheme::standard();
            let state = state_from_index(index, &scheme).unwrap();
            prop_assert_eq!(state_index(&state, &scheme).unwrap(), index);
        }

        #[test]
        fn monotone_request_codes(a in 0u32..120, b in 0u32..120) {
            let scheme = BinningScheme::standard();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r1 = record_with(lo, 1, 900.0, 200.0, 500.0, DosFlags::NONE);
            let r2 = record_with(hi, 1, 900.0, 200.0, 500.0, DosFlags::NONE);
            prop_assert!(discretize(&r1, &scheme).codes[0] <= discretize(&r2, &scheme).codes[0]);
        }
    }
}
