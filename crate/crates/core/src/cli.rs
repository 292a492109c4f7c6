//! Command-line interface: data generation, training, prediction, look-up
//! table build and query, distance traces and timing benchmarks.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use crate::dataset::{distance_grid, generate_dataset, GenerateOptions, SampleRanges, TrainingSet};
use crate::keyrate::{DeviceConstants, ExperimentParams, ProtocolParams};
use crate::lut::{build_lut, BuildOptions, FeasibilityCheck, GridSpec, Lut};
use crate::mlp::{
    predict_checked, predict_params, train_with, MlpModel, TrainConfig, DEFAULT_DIMS,
};
use crate::optimizer::{optimize_point, optimize_trace, CdConfig, SearchBounds};

#[derive(Debug, Parser)]
#[command(
    name = "qkdopt",
    version,
    about = "Parameter optimization for finite-size MDI-QKD"
)]
pub struct Cli {
    /// TOML file overriding eta_d, alpha_db_km, f_e and epsilon.
    #[arg(long, global = true, value_name = "FILE")]
    pub constants_file: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a training set of conditions and optimal parameters.
    GenData(GenDataArgs),
    /// Train the network on a generated training set.
    Train(TrainArgs),
    /// Predict parameters for one set of conditions or a file of them.
    Predict(PredictArgs),
    /// Compile a trained network into a sharded look-up table.
    BuildLut(BuildLutArgs),
    /// Look up parameters in a built table.
    QueryLut(QueryLutArgs),
    /// Optimal and predicted parameters along a range of distances.
    Trace(TraceArgs),
    /// Time coordinate descent, network inference and table lookup.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Noise tuples drawn per distance.
    #[arg(long, default_value_t = 250)]
    pub samples: usize,
    /// Comma-separated distances in km; defaults to an even grid over the l_bc range.
    #[arg(long, value_delimiter = ',')]
    pub distances: Option<Vec<f64>>,
    /// Points in the default distance grid.
    #[arg(long, default_value_t = 40)]
    pub grid_points: usize,
    /// TOML file with sampling ranges.
    #[arg(long)]
    pub ranges_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch losses; defaults to the model path with a `.history.csv` suffix.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().final_lr_fraction)]
    pub final_lr_fraction: f64,
    #[arg(long, default_value_t = TrainConfig::default().validation_fraction)]
    pub validation_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct ConditionArgs {
    /// Distance between Bob and Charles in km.
    #[arg(long)]
    pub l_bc: Option<f64>,
    /// Dark count probability.
    #[arg(long)]
    pub y0: Option<f64>,
    /// Misalignment error.
    #[arg(long)]
    pub e_d: Option<f64>,
    /// Number of signals sent.
    #[arg(long)]
    pub n_signals: Option<f64>,
}

impl ConditionArgs {
    fn experiment(&self, constants: &DeviceConstants) -> Result<ExperimentParams> {
        match (self.l_bc, self.y0, self.e_d, self.n_signals) {
            (Some(l), Some(y0), Some(ed), Some(n)) => {
                let e = ExperimentParams::with_constants(l, y0, ed, n, constants);
                e.validate()?;
                Ok(e)
            }
            _ => bail!("--l-bc, --y0, --e-d and --n-signals must all be given"),
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: ConditionArgs,
    /// Delimited rows of l_bc, y0, e_d, n_signals.
    #[arg(long, conflicts_with_all = ["l_bc", "y0", "e_d", "n_signals"])]
    pub input_file: Option<PathBuf>,
    /// Also run coordinate descent and print its rate and the ratio.
    #[arg(long)]
    pub compare_cd: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildLutArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid points per axis.
    #[arg(long, default_value_t = 20)]
    pub points: usize,
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    /// Check feasibility of every n-th node; 0 disables the check.
    #[arg(long, default_value_t = 1)]
    pub check_every: usize,
    /// TOML file with sampling ranges; the grid spans their feature image.
    #[arg(long)]
    pub ranges_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryLutArgs {
    /// Table directory or manifest file.
    #[arg(long)]
    pub lut: PathBuf,
    #[command(flatten)]
    pub input: ConditionArgs,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub y0: f64,
    #[arg(long)]
    pub e_d: f64,
    #[arg(long)]
    pub n_signals: f64,
    #[arg(long, default_value_t = 0.0)]
    pub from: f64,
    #[arg(long, default_value_t = 200.0)]
    pub to: f64,
    #[arg(long, default_value_t = 40)]
    pub points: usize,
    /// Model whose predictions are traced alongside.
    #[arg(long)]
    pub nn: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub lut: Option<PathBuf>,
    /// Free-form description of the machine, recorded in the report.
    #[arg(long, default_value = "unspecified")]
    pub machine: String,
    #[arg(long)]
    pub ranges_file: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Five significant digits.
pub fn sig5(v: f64) -> String {
    format!("{v:.4e}")
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn constants(cli: &Cli) -> Result<DeviceConstants> {
    match &cli.constants_file {
        Some(path) => read_toml(path),
        None => Ok(DeviceConstants::default()),
    }
}

fn ranges(path: &Option<PathBuf>) -> Result<SampleRanges> {
    let r = match path {
        Some(path) => read_toml(path)?,
        None => SampleRanges::default(),
    };
    r.validate()?;
    Ok(r)
}

fn load_model(path: &Path) -> Result<MlpModel> {
    MlpModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn params_line(p: &ProtocolParams) -> String {
    p.to_array()
        .iter()
        .map(|v| sig5(*v))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parse the CLI from `args` and run it, printing to `out`.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run(&cli, out)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let constants = constants(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(a, &constants, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Predict(a) => predict(a, &constants, out),
        Command::BuildLut(a) => build_lut_cmd(a, &constants, out),
        Command::QueryLut(a) => query_lut_cmd(a, &constants, out),
        Command::Trace(a) => trace(a, &constants, out),
        Command::Bench(a) => {
            let report = bench(a, &constants)?;
            let text = report.to_text();
            out.write_all(text.as_bytes())?;
            if let Some(path) = &a.out {
                fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
    }
}

fn gen_data(a: &GenDataArgs, constants: &DeviceConstants, out: &mut dyn Write) -> Result<()> {
    let ranges = ranges(&a.ranges_file)?;
    let distances = match &a.distances {
        Some(d) => d.clone(),
        None => distance_grid(ranges.l_bc, a.grid_points),
    };
    if distances.is_empty() {
        bail!("no distances given");
    }
    let quiet = a.quiet;
    let progress = move |done: usize, total: usize| {
        if !quiet && (done.is_multiple_of(100) || done == total) {
            eprint!("\r{done}/{total} tuples");
            if done == total {
                eprintln!();
            }
        }
    };
    let options = GenerateOptions {
        constants: *constants,
        progress: Some(&progress),
        ..GenerateOptions::default()
    };
    let set = generate_dataset(&ranges, a.samples, &distances, a.seed, &options)?;
    set.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    writeln!(
        out,
        "wrote {} rows to {} ({} candidates, {} past cutoff)",
        set.len(),
        a.out.display(),
        set.meta.candidate_rows,
        set.meta.infeasible_rows
    )?;
    Ok(())
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let set =
        TrainingSet::load(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        final_lr_fraction: a.final_lr_fraction,
        validation_fraction: a.validation_fraction,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let quiet = a.quiet;
    let (model, history) = train_with(&set, &config, &DEFAULT_DIMS, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  train {}  validation {}",
                r.epoch,
                sig5(r.train_loss),
                sig5(r.validation_loss)
            );
        }
    })?;
    model.save(&a.out)?;
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    history.save(&history_path)?;
    writeln!(
        out,
        "wrote {} (best validation loss {} at epoch {}), history in {}",
        a.out.display(),
        sig5(history.best_validation_loss()),
        history.best_epoch,
        history_path.display()
    )?;
    Ok(())
}

fn read_conditions(path: &Path, constants: &DeviceConstants) -> Result<Vec<ExperimentParams>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let values: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if rows.is_empty() && i == 0 => continue,
            Err(e) => bail!("{}:{}: {e}", path.display(), i + 1),
        };
        if values.len() != 4 {
            bail!(
                "{}:{}: expected 4 values, found {}",
                path.display(),
                i + 1,
                values.len()
            );
        }
        let e =
            ExperimentParams::with_constants(values[0], values[1], values[2], values[3], constants);
        e.validate()
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        rows.push(e);
    }
    Ok(rows)
}

fn predict(a: &PredictArgs, constants: &DeviceConstants, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let conditions = match &a.input_file {
        Some(path) => read_conditions(path, constants)?,
        None => vec![a.input.experiment(constants)?],
    };
    let mut header = "l_bc y0 e_d n_signals s mu nu p_s p_mu p_nu rate".to_string();
    if a.compare_cd {
        header.push_str(" rate_cd ratio");
    }
    header.push_str(" status");
    writeln!(out, "{header}")?;
    for e in &conditions {
        let p = predict_checked(&model, e)?;
        let mut line = format!(
            "{} {} {} {} {} {}",
            sig5(e.l_bc),
            sig5(e.y0),
            sig5(e.e_d),
            sig5(e.n_signals),
            params_line(&p.params),
            sig5(p.rate)
        );
        if a.compare_cd {
            let cd = optimize_point(
                e,
                &SearchBounds::default(),
                &CdConfig {
                    rng_seed: a.seed,
                    ..CdConfig::default()
                },
            )?;
            let ratio = if cd.rate > 0.0 {
                p.rate / cd.rate
            } else {
                f64::NAN
            };
            let _ = write!(line, " {} {}", sig5(cd.rate), sig5(ratio));
        }
        line.push_str(if p.usable { " ok" } else { " advisory" });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn build_lut_cmd(a: &BuildLutArgs, constants: &DeviceConstants, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let grid = GridSpec::from_ranges(&ranges(&a.ranges_file)?, a.points);
    let options = BuildOptions {
        shards: a.shards,
        feasibility: match a.check_every {
            0 => FeasibilityCheck::None,
            n => FeasibilityCheck::Every(n),
        },
        constants: *constants,
    };
    let start = Instant::now();
    let manifest = build_lut(&model, &grid, &a.out, &options)?;
    let bytes: u64 = manifest.shards.iter().map(|s| s.bytes).sum();
    writeln!(
        out,
        "wrote {} nodes in {} shards ({bytes} bytes) to {} in {:.1} s",
        grid.node_count(),
        manifest.shards.len(),
        a.out.display(),
        start.elapsed().as_secs_f64()
    )?;
    Ok(())
}

fn query_lut_cmd(a: &QueryLutArgs, constants: &DeviceConstants, out: &mut dyn Write) -> Result<()> {
    let lut = Lut::open(&a.lut).with_context(|| format!("opening {}", a.lut.display()))?;
    let e = a.input.experiment(constants)?;
    let answer = lut.query(&e)?;
    writeln!(out, "s mu nu p_s p_mu p_nu flag range")?;
    writeln!(
        out,
        "{} {} {}",
        params_line(&answer.params),
        answer.flag.as_str(),
        if answer.out_of_range {
            "clamped"
        } else {
            "inside"
        }
    )?;
    Ok(())
}

fn trace(a: &TraceArgs, constants: &DeviceConstants, out: &mut dyn Write) -> Result<()> {
    if a.points == 0 {
        bail!("--points must be >= 1");
    }
    if a.points > 1 && !(a.from < a.to) {
        bail!("--from must be below --to");
    }
    let model = a.nn.as_deref().map(load_model).transpose()?;
    let template = ExperimentParams::with_constants(a.from, a.y0, a.e_d, a.n_signals, constants);
    template.validate()?;
    let distances = distance_grid((a.from, a.to), a.points);
    let config = CdConfig {
        rng_seed: a.seed,
        ..CdConfig::default()
    };
    let cd = optimize_trace(&template, &distances, &SearchBounds::default(), &config)?;

    let names = ["s", "mu", "nu", "p_s", "p_mu", "p_nu"];
    let mut text = String::from("distance");
    for n in names {
        let _ = write!(text, ",cd_{n}");
    }
    if model.is_some() {
        for n in names {
            let _ = write!(text, ",nn_{n}");
        }
    }
    text.push_str(",rate_cd");
    if model.is_some() {
        text.push_str(",rate_nn");
    }
    text.push_str(",past_cutoff\n");
    for (&d, r) in distances.iter().zip(&cd) {
        let e = template.at_distance(d);
        let _ = write!(text, "{d:.16e}");
        for v in r.p_opt.to_array() {
            let _ = write!(text, ",{v:.16e}");
        }
        let nn = match &model {
            Some(m) => Some(predict_checked(m, &e)?),
            None => None,
        };
        if let Some(p) = &nn {
            for v in p.params.to_array() {
                let _ = write!(text, ",{v:.16e}");
            }
        }
        let _ = write!(text, ",{:.16e}", r.rate);
        if let Some(p) = &nn {
            let _ = write!(text, ",{:.16e}", p.rate);
        }
        let _ = writeln!(text, ",{}", u8::from(!(r.rate > 0.0)));
    }
    match &a.out {
        Some(path) => {
            fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            writeln!(out, "wrote {} rows to {}", distances.len(), path.display())?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodTiming {
    pub method: &'static str,
    /// Seconds per call, warm-up excluded.
    pub samples: Vec<f64>,
}

impl MethodTiming {
    fn sorted(&self) -> Vec<f64> {
        let mut v = self.samples.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn median(&self) -> f64 {
        let v = self.sorted();
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    pub fn min(&self) -> f64 {
        self.sorted()[0]
    }

    pub fn max(&self) -> f64 {
        *self.sorted().last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub machine: String,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<MethodTiming>,
}

impl BenchReport {
    pub fn method(&self, name: &str) -> Option<&MethodTiming> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "machine = {}", self.machine);
        let _ = writeln!(out, "trials = {}", self.trials);
        let _ = writeln!(out, "seed = {}", self.seed);
        for m in &self.methods {
            let _ = writeln!(out, "{}.samples = {}", m.method, m.samples.len());
            let _ = writeln!(out, "{}.median_s = {}", m.method, sig5(m.median()));
            let _ = writeln!(out, "{}.min_s = {}", m.method, sig5(m.min()));
            let _ = writeln!(out, "{}.max_s = {}", m.method, sig5(m.max()));
        }
        out
    }
}

/// Random in-range conditions shared by every benchmarked method.
pub fn bench_conditions(
    ranges: &SampleRanges,
    constants: &DeviceConstants,
    trials: usize,
    seed: u64,
) -> Vec<ExperimentParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| ranges.sample(&mut rng, constants))
        .collect()
}

fn time_calls<T>(
    method: &'static str,
    conditions: &[ExperimentParams],
    mut call: impl FnMut(&ExperimentParams) -> Result<T>,
) -> Result<MethodTiming> {
    // The first call pays for loading and is not counted.
    std::hint::black_box(call(&conditions[0])?);
    let mut samples = Vec::with_capacity(conditions.len());
    for e in conditions {
        let start = Instant::now();
        std::hint::black_box(call(e)?);
        samples.push(start.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(MethodTiming { method, samples })
}

pub fn bench(a: &BenchArgs, constants: &DeviceConstants) -> Result<BenchReport> {
    if a.trials == 0 {
        bail!("--trials must be >= 1");
    }
    let conditions = bench_conditions(&ranges(&a.ranges_file)?, constants, a.trials, a.seed);
    let config = CdConfig {
        rng_seed: a.seed,
        ..CdConfig::default()
    };
    let mut methods = vec![time_calls("cd-search", &conditions, |e| {
        Ok(optimize_point(e, &SearchBounds::default(), &config)?)
    })?];
    if let Some(path) = &a.model {
        let model = load_model(path)?;
        methods.push(time_calls("nn-inference", &conditions, |e| {
            Ok(predict_params(&model, e)?)
        })?);
    }
    if let Some(path) = &a.lut {
        let lut = Lut::open(path).with_context(|| format!("opening {}", path.display()))?;
        methods.push(time_calls("lut-query", &conditions, |e| Ok(lut.query(e)?))?);
    }
    Ok(BenchReport {
        machine: a.machine.clone(),
        trials: a.trials,
        seed: a.seed,
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_significant_digits() {
        assert_eq!(sig5(1.3335e-3), "1.3335e-3");
        assert_eq!(sig5(0.50123456), "5.0123e-1");
    }

    #[test]
    fn medians() {
        let m = MethodTiming {
            method: "x",
            samples: vec![3.0, 1.0, 2.0, 10.0],
        };
        assert_eq!((m.median(), m.min(), m.max()), (2.5, 1.0, 10.0));
    }

    #[test]
    fn bench_conditions_depend_only_on_seed() {
        let r = SampleRanges::default();
        let c = DeviceConstants::default();
        assert_eq!(
            bench_conditions(&r, &c, 5, 3),
            bench_conditions(&r, &c, 5, 3)
        );
        assert_ne!(
            bench_conditions(&r, &c, 5, 3),
            bench_conditions(&r, &c, 5, 4)
        );
    }

    #[test]
    fn incomplete_conditions_are_rejected() {
        let c = ConditionArgs {
            l_bc: Some(1.0),
            y0: None,
            e_d: Some(0.01),
            n_signals: Some(1e12),
        };
        assert!(c.experiment(&DeviceConstants::default()).is_err());
    }
}
