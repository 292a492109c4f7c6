//! Training data: random experimental conditions paired with the optimal
//! protocol parameters found by coordinate descent.
//!
//! Conditions enter the network through four features of order one:
//! `e1 = l_bc / 100`, `e2 = -log10(y0)`, `e3 = 100 e_d`, `e4 = log10(N)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyrate::{DeviceConstants, ExperimentParams, ProtocolParams};
use crate::optimizer::{optimize_trace, CdConfig, OptimizeError, SearchBounds, Status};

pub const GENERATOR_VERSION: &str = "qkdopt-dataset/1";
pub const COLUMNS: [&str; 11] = [
    "e1", "e2", "e3", "e4", "s", "mu", "nu", "p_s", "p_mu", "p_nu", "rate",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid sample ranges: {0}")]
    InvalidRanges(String),
    #[error("dark count probability must be positive to normalize, got {0}")]
    NonPositiveDarkCount(f64),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

/// Sampling box for experimental conditions. Dark counts and signal counts
/// are drawn log-uniformly, misalignment uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRanges {
    pub l_bc: (f64, f64),
    pub y0: (f64, f64),
    pub e_d: (f64, f64),
    pub n_signals: (f64, f64),
}

impl Default for SampleRanges {
    fn default() -> Self {
        Self {
            l_bc: (0.0, 200.0),
            y0: (1e-8, 1e-5),
            e_d: (0.005, 0.03),
            n_signals: (1e11, 1e14),
        }
    }
}

impl SampleRanges {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let axes = [
            ("l_bc", self.l_bc),
            ("y0", self.y0),
            ("e_d", self.e_d),
            ("n_signals", self.n_signals),
        ];
        for (name, (lo, hi)) in axes {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(DatasetError::InvalidRanges(format!(
                    "{name}: need finite lower < upper, got ({lo}, {hi})"
                )));
            }
        }
        if self.l_bc.0 < 0.0 {
            return Err(DatasetError::InvalidRanges("l_bc must be >= 0".into()));
        }
        if !(self.y0.0 > 0.0 && self.y0.1 < 1.0) {
            return Err(DatasetError::InvalidRanges("y0 must lie in (0, 1)".into()));
        }
        if !(self.e_d.0 >= 0.0 && self.e_d.1 < 0.5) {
            return Err(DatasetError::InvalidRanges(
                "e_d must lie in [0, 0.5)".into(),
            ));
        }
        if self.n_signals.0 < 1.0 {
            return Err(DatasetError::InvalidRanges("n_signals must be >= 1".into()));
        }
        Ok(())
    }

    /// The ranges mapped into feature space, as `(min, max)` per feature.
    pub fn feature_bounds(&self) -> [(f64, f64); 4] {
        [
            (self.l_bc.0 / 100.0, self.l_bc.1 / 100.0),
            (-self.y0.1.log10(), -self.y0.0.log10()),
            (100.0 * self.e_d.0, 100.0 * self.e_d.1),
            (self.n_signals.0.log10(), self.n_signals.1.log10()),
        ]
    }

    /// Draw `(y0, e_d, n_signals)`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64, f64) {
        let log_uniform = |rng: &mut R, (lo, hi): (f64, f64)| {
            10f64.powf(rng.random_range(lo.log10()..=hi.log10()))
        };
        let y0 = log_uniform(rng, self.y0);
        let e_d = rng.random_range(self.e_d.0..=self.e_d.1);
        let n = log_uniform(rng, self.n_signals);
        (y0, e_d, n)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        constants: &DeviceConstants,
    ) -> ExperimentParams {
        let l = rng.random_range(self.l_bc.0..=self.l_bc.1);
        let (y0, e_d, n) = self.sample_noise(rng);
        ExperimentParams::with_constants(l, y0, e_d, n, constants)
    }
}

pub fn normalize(e: &ExperimentParams) -> Result<[f64; 4], DatasetError> {
    if !(e.y0 > 0.0) {
        return Err(DatasetError::NonPositiveDarkCount(e.y0));
    }
    Ok([
        e.l_bc / 100.0,
        -e.y0.log10(),
        100.0 * e.e_d,
        e.n_signals.log10(),
    ])
}

pub fn denormalize(features: &[f64; 4], constants: &DeviceConstants) -> ExperimentParams {
    ExperimentParams::with_constants(
        features[0] * 100.0,
        10f64.powf(-features[1]),
        features[2] / 100.0,
        10f64.powf(features[3]),
        constants,
    )
}

/// The training distance grid: `points` evenly spaced values over `l_bc`.
pub fn distance_grid(range: (f64, f64), points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![range.0],
        n => (0..n)
            .map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRow {
    pub features: [f64; 4],
    pub params: ProtocolParams,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub generator_version: String,
    pub seed: u64,
    pub ranges: SampleRanges,
    pub constants: DeviceConstants,
    pub samples_per_distance: usize,
    pub distances: Vec<f64>,
    pub candidate_rows: usize,
    pub infeasible_rows: usize,
    pub max_sweeps_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub rows: Vec<TrainingRow>,
    pub meta: DatasetMeta,
}

/// Seed for the trace of tuple `index`.
pub fn tuple_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

#[derive(Default)]
pub struct GenerateOptions<'a> {
    pub cd: CdConfig,
    pub bounds: SearchBounds,
    pub constants: DeviceConstants,
    /// Called with `(finished tuples, total tuples)`.
    pub progress: Option<&'a (dyn Fn(usize, usize) + Sync)>,
}

/// For every grid distance draw `samples_per_distance` noise tuples. Each
/// tuple is traced with warm-started coordinate descent along the grid from
/// its first point up to its own distance, and the endpoint becomes a row.
/// Rows with zero rate are dropped. Output order is distance-major, then
/// sample index.
pub fn generate_dataset(
    ranges: &SampleRanges,
    samples_per_distance: usize,
    distances: &[f64],
    seed: u64,
    options: &GenerateOptions<'_>,
) -> Result<TrainingSet, DatasetError> {
    ranges.validate()?;
    if samples_per_distance == 0 {
        return Err(DatasetError::InvalidRanges(
            "samples_per_distance must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tuples: Vec<(usize, (f64, f64, f64))> = (0..distances.len())
        .flat_map(|d| std::iter::repeat_n(d, samples_per_distance))
        .map(|d| (d, ranges.sample_noise(&mut rng)))
        .collect();

    let finished = AtomicUsize::new(0);
    let endpoints: Vec<Result<(ExperimentParams, _), OptimizeError>> = tuples
        .par_iter()
        .enumerate()
        .map(|(i, &(d, (y0, e_d, n)))| {
            let template = ExperimentParams::with_constants(0.0, y0, e_d, n, &options.constants);
            let cd = CdConfig {
                rng_seed: tuple_seed(seed, i),
                ..options.cd
            };
            let trace = optimize_trace(&template, &distances[..=d], &options.bounds, &cd)?;
            let done = finished.fetch_add(1, Ordering::Relaxed) + 1;
            if let Some(report) = options.progress {
                report(done, tuples.len());
            }
            Ok((template.at_distance(distances[d]), trace[d]))
        })
        .collect();

    let mut rows = Vec::new();
    let mut infeasible = 0;
    let mut max_sweeps = 0;
    for endpoint in endpoints {
        let (e, result) = endpoint?;
        {
            match result.status {
                Status::Infeasible => infeasible += 1,
                _ if !(result.rate > 0.0) => infeasible += 1,
                status => {
                    if status == Status::MaxSweeps {
                        max_sweeps += 1;
                    }
                    rows.push(TrainingRow {
                        features: normalize(&e)?,
                        params: result.p_opt,
                        rate: result.rate,
                    });
                }
            }
        }
    }

    Ok(TrainingSet {
        rows,
        meta: DatasetMeta {
            generator_version: GENERATOR_VERSION.to_string(),
            seed,
            ranges: *ranges,
            constants: options.constants,
            samples_per_distance,
            distances: distances.to_vec(),
            candidate_rows: samples_per_distance * distances.len(),
            infeasible_rows: infeasible,
            max_sweeps_rows: max_sweeps,
        },
    })
}

/// Sidecar path holding the metadata of a dataset file.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_table(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for row in &self.rows {
            let params = row.params.to_array();
            let values = row
                .features
                .iter()
                .chain(params.iter())
                .chain(std::iter::once(&row.rate));
            let line: Vec<String> = values.map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn meta_text(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let r = &m.ranges;
        let c = &m.constants;
        let _ = writeln!(out, "generator_version = {}", m.generator_version);
        let _ = writeln!(out, "seed = {}", m.seed);
        let _ = writeln!(out, "range.l_bc = {:e} {:e}", r.l_bc.0, r.l_bc.1);
        let _ = writeln!(out, "range.y0 = {:e} {:e}", r.y0.0, r.y0.1);
        let _ = writeln!(out, "range.e_d = {:e} {:e}", r.e_d.0, r.e_d.1);
        let _ = writeln!(
            out,
            "range.n_signals = {:e} {:e}",
            r.n_signals.0, r.n_signals.1
        );
        let _ = writeln!(out, "constants.eta_d = {:e}", c.eta_d);
        let _ = writeln!(out, "constants.alpha_db_km = {:e}", c.alpha_db_km);
        let _ = writeln!(out, "constants.f_e = {:e}", c.f_e);
        let _ = writeln!(out, "constants.epsilon = {:e}", c.epsilon);
        let _ = writeln!(out, "samples_per_distance = {}", m.samples_per_distance);
        let grid: Vec<String> = m.distances.iter().map(|d| format!("{d:e}")).collect();
        let _ = writeln!(out, "distances = {}", grid.join(" "));
        let _ = writeln!(out, "rows.candidate = {}", m.candidate_rows);
        let _ = writeln!(out, "rows.kept = {}", self.rows.len());
        let _ = writeln!(out, "rows.infeasible_dropped = {}", m.infeasible_rows);
        let _ = writeln!(out, "rows.max_sweeps = {}", m.max_sweeps_rows);
        out
    }

    /// Write the table to `path` and the metadata next to it.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_table())?;
        fs::write(meta_path(path), self.meta_text())?;
        Ok(())
    }

    /// Read the table at `path`. Metadata is read from the sidecar when present;
    /// otherwise defaults are filled in.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path)?;
        let parse_err = |line: usize, msg: String| DatasetError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == COLUMNS.join(",") => {}
            _ => return Err(parse_err(1, "missing or unexpected header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let values: Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let values = values.map_err(|e| parse_err(i + 1, e.to_string()))?;
            if values.len() != COLUMNS.len() {
                return Err(parse_err(
                    i + 1,
                    format!("expected {} columns, found {}", COLUMNS.len(), values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(i + 1, "non-finite value".into()));
            }
            rows.push(TrainingRow {
                features: [values[0], values[1], values[2], values[3]],
                params: ProtocolParams::from_array([
                    values[4], values[5], values[6], values[7], values[8], values[9],
                ]),
                rate: values[10],
            });
        }
        let meta = match fs::read_to_string(meta_path(path)) {
            Ok(text) => parse_meta(&text, rows.len()),
            Err(_) => DatasetMeta {
                generator_version: "unknown".into(),
                seed: 0,
                ranges: SampleRanges::default(),
                constants: DeviceConstants::default(),
                samples_per_distance: 0,
                distances: Vec::new(),
                candidate_rows: rows.len(),
                infeasible_rows: 0,
                max_sweeps_rows: 0,
            },
        };
        Ok(Self { rows, meta })
    }
}

fn parse_meta(text: &str, kept: usize) -> DatasetMeta {
    let get = |key: &str| {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().to_string())
    };
    let num = |key: &str| get(key).and_then(|v| v.parse::<f64>().ok());
    let pair = |key: &str, default: (f64, f64)| {
        get(key)
            .and_then(|v| {
                let mut it = v.split_whitespace().map(|x| x.parse::<f64>());
                match (it.next(), it.next()) {
                    (Some(Ok(a)), Some(Ok(b))) => Some((a, b)),
                    _ => None,
                }
            })
            .unwrap_or(default)
    };
    let defaults = SampleRanges::default();
    let dc = DeviceConstants::default();
    DatasetMeta {
        generator_version: get("generator_version").unwrap_or_else(|| "unknown".into()),
        seed: get("seed").and_then(|v| v.parse().ok()).unwrap_or(0),
        ranges: SampleRanges {
            l_bc: pair("range.l_bc", defaults.l_bc),
            y0: pair("range.y0", defaults.y0),
            e_d: pair("range.e_d", defaults.e_d),
            n_signals: pair("range.n_signals", defaults.n_signals),
        },
        constants: DeviceConstants {
            eta_d: num("constants.eta_d").unwrap_or(dc.eta_d),
            alpha_db_km: num("constants.alpha_db_km").unwrap_or(dc.alpha_db_km),
            f_e: num("constants.f_e").unwrap_or(dc.f_e),
            epsilon: num("constants.epsilon").unwrap_or(dc.epsilon),
        },
        samples_per_distance: num("samples_per_distance").unwrap_or(0.0) as usize,
        distances: get("distances")
            .map(|v| {
                v.split_whitespace()
                    .filter_map(|x| x.parse().ok())
                    .collect()
            })
            .unwrap_or_default(),
        candidate_rows: num("rows.candidate").map(|v| v as usize).unwrap_or(kept),
        infeasible_rows: num("rows.infeasible_dropped").unwrap_or(0.0) as usize,
        max_sweeps_rows: num("rows.max_sweeps").unwrap_or(0.0) as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyrate::key_rate;
    use crate::optimizer::optimize_point;
    use proptest::prelude::*;

    #[test]
    fn normalize_table_row_one() {
        let e = ExperimentParams::new(20.0, 1.28e-7, 0.0123, 1.29e13);
        let f = normalize(&e).unwrap();
        assert_eq!(f[0], 0.2);
        assert!((f[1] - 6.892_790_030_352_132).abs() < 1e-12);
        assert!((f[2] - 1.23).abs() < 1e-12);
        assert!((f[3] - 13.110_589_710_299_25).abs() < 1e-12);
    }

    #[test]
    fn normalize_round_numbers() {
        let e = ExperimentParams::new(100.0, 1e-6, 0.01, 1e12);
        assert_eq!(normalize(&e).unwrap(), [1.0, 6.0, 1.0, 12.0]);
    }

    #[test]
    fn denormalize_table_row_one() {
        let e = denormalize(&[0.2, 6.8928, 1.23, 13.1106], &DeviceConstants::default());
        let sig4 = |a: f64, b: f64| ((a - b) / b).abs() < 5e-4;
        assert!(sig4(e.l_bc, 20.0));
        assert!(sig4(e.y0, 1.28e-7));
        assert!(sig4(e.e_d, 0.0123));
        assert!(sig4(e.n_signals, 1.29e13));
        assert_eq!(e.eta_d, 0.8);
    }

    #[test]
    fn denormalize_origin() {
        let e = denormalize(&[0.0; 4], &DeviceConstants::default());
        assert_eq!((e.l_bc, e.y0, e.e_d, e.n_signals), (0.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn zero_dark_count_cannot_be_normalized() {
        let e = ExperimentParams::new(10.0, 0.0, 0.01, 1e12);
        assert!(matches!(
            normalize(&e),
            Err(DatasetError::NonPositiveDarkCount(_))
        ));
    }

    #[test]
    fn single_row_dataset_matches_direct_optimization() {
        let ranges = SampleRanges::default();
        let set = generate_dataset(&ranges, 1, &[20.0], 7, &GenerateOptions::default()).unwrap();
        assert_eq!(set.len(), 1);
        let row = set.rows[0];
        let e = denormalize(&row.features, &DeviceConstants::default());
        let direct = optimize_point(
            &e,
            &SearchBounds::default(),
            &CdConfig {
                rng_seed: tuple_seed(7, 0),
                ..CdConfig::default()
            },
        )
        .unwrap();
        assert_eq!(row.params, direct.p_opt);
        assert_eq!(row.rate, direct.rate);
    }

    #[test]
    fn generation_is_deterministic_and_rows_reproduce_rates() {
        let dir = tempfile::tempdir().unwrap();
        let ranges = SampleRanges::default();
        let grid = distance_grid((0.0, 200.0), 8);
        let a = generate_dataset(&ranges, 3, &grid, 42, &GenerateOptions::default()).unwrap();
        let b = generate_dataset(&ranges, 3, &grid, 42, &GenerateOptions::default()).unwrap();
        let c = generate_dataset(&ranges, 3, &grid, 43, &GenerateOptions::default()).unwrap();
        assert_ne!(a.rows, c.rows);
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
        assert_eq!(
            fs::read(meta_path(&pa)).unwrap(),
            fs::read(meta_path(&pb)).unwrap()
        );

        assert!(!a.is_empty());
        assert_eq!(a.meta.candidate_rows, 24);
        assert_eq!(a.len() + a.meta.infeasible_rows, 24);
        let bounds = ranges.feature_bounds();
        for row in &a.rows {
            assert!(row.rate > 0.0);
            for (i, (lo, hi)) in bounds.iter().enumerate() {
                assert!(row.features[i] >= lo - 1e-12 && row.features[i] <= hi + 1e-12);
            }
            for v in row.params.to_array() {
                assert!(v > 0.0 && v < 1.0);
            }
            let e = denormalize(&row.features, &DeviceConstants::default());
            let r = key_rate(&e, &row.params).unwrap();
            assert!(((r - row.rate) / row.rate).abs() < 1e-12);
        }

        let loaded = TrainingSet::load(&pa).unwrap();
        assert_eq!(loaded.rows, a.rows);
        assert_eq!(loaded.meta, a.meta);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let bad = SampleRanges {
            e_d: (0.03, 0.01),
            ..SampleRanges::default()
        };
        assert!(matches!(
            generate_dataset(&bad, 1, &[0.0], 1, &GenerateOptions::default()),
            Err(DatasetError::InvalidRanges(_))
        ));
    }

    #[test]
    fn malformed_table_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, format!("{}\n1,2,3\n", COLUMNS.join(","))).unwrap();
        assert!(matches!(
            TrainingSet::load(&p),
            Err(DatasetError::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn normalize_roundtrip(l in 0.0..400.0f64, y in -9.0..-2.0f64, ed in 0.0..0.49f64, n in 0.0..16.0f64) {
            let e = ExperimentParams::new(l, 10f64.powf(y), ed, 10f64.powf(n));
            let back = denormalize(&normalize(&e).unwrap(), &DeviceConstants::default());
            let close = |a: f64, b: f64| a == b || ((a - b) / b).abs() < 1e-12;
            prop_assert!(close(back.l_bc, e.l_bc));
            prop_assert!(close(back.y0, e.y0));
            prop_assert!(close(back.e_d, e.e_d));
            prop_assert!(close(back.n_signals, e.n_signals));
        }
    }
}
