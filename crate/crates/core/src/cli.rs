//! Command-line interface: `analyze`, `simulate`, `compare` and `inflection`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::aoi_link::LinkModel;
use crate::error::{Error, Result};
use crate::montecarlo::{calibrate_convention, compare, estimate_rate, run_scenario, wilson_interval, AgeSpec};
use crate::outage_model::{inflection_variance, outage_curve, InflectionAxis, VarianceConvention};
use crate::report::{split_csv, Cell, OutputFormat, ResultTable};
use crate::scenario::ScenarioFile;

pub const THREADS_ENV: &str = "AOI_OUTAGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "aoi-outage", version, about = "Outage probability of control loops with aging status updates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate the model outage probability per age.
    Analyze(AnalyzeArgs),
    /// Run the Monte-Carlo loop and report empirical outage rates per age.
    Simulate(SimulateArgs),
    /// Compare simulated and model outage rates over a noise/age grid.
    Compare(CompareArgs),
    /// Locate the convex/concave switch of the outage curve.
    Inflection(InflectionArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    /// Scenario file (TOML).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub scenario: Option<PathBuf>,
    /// Built-in scenario, e.g. `table1_platoon`.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output file; standard output when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "csv|json")]
    pub format: Option<OutputFormat>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub episodes: Option<u64>,
    #[arg(long, value_name = "STEPS")]
    pub horizon: Option<u64>,
    #[arg(long, value_name = "STEPS")]
    pub warmup: Option<u64>,
    /// Worker threads for the Monte-Carlo runs.
    #[arg(long, env = THREADS_ENV, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub ages: Option<Vec<u32>>,
    /// Noise multiplier (σ₂ for the platoon preset).
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long, value_name = "paper_shifted|accumulation")]
    pub convention: Option<VarianceConvention>,
    #[arg(long, value_name = "variance|std_dev")]
    pub axis: Option<InflectionAxis>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Pin the link to this age instead of the scenario's link.
    #[arg(long, value_name = "AGE")]
    pub fixed_age: Option<u32>,
    #[arg(long, value_name = "paper_shifted|accumulation")]
    pub convention: Option<VarianceConvention>,
}

/// Variance convention for `compare`, or `auto` to pick it with a calibration run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConventionChoice {
    Fixed(VarianceConvention),
    Auto,
}

impl FromStr for ConventionChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            Ok(ConventionChoice::Auto)
        } else {
            s.parse().map(ConventionChoice::Fixed)
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub noise_grid: Option<Vec<f64>>,
    /// Ages to pin, or `stationary` for the scenario's Bernoulli link.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub ages: Option<Vec<AgeSpec>>,
    #[arg(long, value_name = "paper_shifted|accumulation|auto")]
    pub convention: Option<ConventionChoice>,
    #[arg(long)]
    pub confidence: Option<f64>,
    /// Exit with status 3 when fewer than this fraction of cells fall inside their interval.
    #[arg(long, value_name = "FRACTION", num_args = 0..=1, default_missing_value = "0.95")]
    pub acceptance: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct InflectionArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Band half-width; taken from the scenario when absent.
    #[arg(long, allow_negative_numbers = true)]
    pub delta_g: Option<f64>,
    /// Single axis; both when absent.
    #[arg(long, value_name = "variance|std_dev")]
    pub axis: Option<InflectionAxis>,
}

fn load(source: &SourceArgs) -> Result<Option<(ScenarioFile, String)>> {
    match (&source.scenario, &source.preset) {
        (Some(path), _) => Ok(Some((ScenarioFile::load(path)?, path.display().to_string()))),
        (None, Some(name)) => Ok(Some((ScenarioFile::preset(name)?, format!("preset:{name}")))),
        (None, None) => Ok(None),
    }
}

fn require(source: &SourceArgs) -> Result<(ScenarioFile, String)> {
    load(source)?.ok_or_else(|| Error::Usage("either --scenario or --preset is required".into()))
}

fn apply_run(file: &mut ScenarioFile, run: &RunArgs) {
    if let Some(seed) = run.seed {
        file.simulation.base_seed = seed;
    }
    if let Some(e) = run.episodes {
        file.simulation.episodes = e;
    }
    if let Some(h) = run.horizon {
        file.simulation.horizon = h;
    }
    if let Some(w) = run.warmup {
        file.simulation.warmup = Some(w);
    }
}

fn timestamp() -> String {
    if let Ok(s) = std::env::var("SOURCE_DATE_EPOCH") {
        return s;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_else(|_| "0".into())
}

fn header(table: &mut ResultTable, command: &str, file: Option<(&ScenarioFile, &str)>) -> Result<()> {
    table
        .meta("version", env!("CARGO_PKG_VERSION"))
        .meta("command", command);
    if let Some((file, source)) = file {
        table
            .meta("scenario", source)
            .meta("scenario_hash", file.hash()?)
            .meta("seed", file.simulation.base_seed)
            .meta("convention", file.analysis.convention)
            .meta("axis", file.analysis.axis)
            .meta("noise_scale", file.system.noise_scale)
            .meta("scenario_inline", serde_json::to_string(file).expect("scenario serializes"));
    }
    table.meta("timestamp_unix", timestamp());
    Ok(())
}

fn emit(table: &ResultTable, output: &OutputArgs, file: Option<&ScenarioFile>, stdout: &mut dyn Write) -> Result<()> {
    let format = output
        .format
        .or_else(|| file.and_then(|f| f.output.format))
        .unwrap_or_default();
    let path = output.out.clone().or_else(|| file.and_then(|f| f.output.path.clone()));
    let text = table.render(format);
    match path {
        Some(p) => std::fs::write(&p, text)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))),
        None => Ok(stdout.write_all(text.as_bytes())?),
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(0) => Err(Error::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {n} threads: {e}")))?
            .install(f),
        None => f(),
    }
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<ResultTable> {
    let (mut file, source) = require(&args.source)?;
    if let Some(s) = args.noise_scale {
        file.system.noise_scale = s;
    }
    if let Some(c) = args.convention {
        file.analysis.convention = c;
    }
    if let Some(a) = args.axis {
        file.analysis.axis = a;
    }
    if let Some(ages) = &args.ages {
        file.analysis.ages = ages.clone();
    }
    file.validate()?;
    let model = file.to_scenario()?.effective_model()?;
    let points = outage_curve(&model, &file.analysis.ages, file.analysis.convention, file.analysis.axis)?;

    let mut table = ResultTable::new(vec!["age", "sigma_g_sq", "p_out", "regime"]);
    header(&mut table, "analyze", Some((&file, &source)))?;
    for axis in InflectionAxis::ALL {
        let ip = inflection_variance(model.delta_g(), axis)?;
        table
            .meta(format!("inflection_{axis}_threshold"), crate::report::format_float(axis.threshold(model.delta_g())))
            .meta(format!("inflection_{axis}_numeric"), crate::report::format_float(ip.numeric_value));
    }
    for p in points {
        table.push(vec![p.age.into(), p.sigma_g_sq.into(), p.p_out.into(), p.regime.as_str().into()]);
    }
    Ok(table)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<ResultTable> {
    let (mut file, source) = require(&args.source)?;
    apply_run(&mut file, &args.run);
    if let Some(s) = args.noise_scale {
        file.system.noise_scale = s;
    }
    if let Some(c) = args.convention {
        file.analysis.convention = c;
    }
    if let Some(age) = args.fixed_age {
        file.link = LinkModel::fixed_age(age)?;
    }
    file.validate()?;
    let scenario = file.to_scenario()?;
    let stats = with_threads(args.run.threads, || run_scenario(&scenario))?;
    let confidence = file.analysis.confidence;

    let mut table = ResultTable::new(vec![
        "age",
        "counted_steps",
        "outage_steps",
        "p_sim",
        "ci_half_width",
        "empirical_variance",
    ]);
    header(&mut table, "simulate", Some((&file, &source)))?;
    table
        .meta("link", serde_json::to_string(&file.link).expect("link serializes"))
        .meta("episodes", scenario.episodes)
        .meta("horizon", scenario.horizon)
        .meta("warmup", scenario.warmup)
        .meta("sample_stride", scenario.sample_stride)
        .meta("confidence", confidence);
    for (age, bucket) in &stats.by_age {
        let rate = wilson_interval(bucket.outages, bucket.steps, confidence)?;
        table.push(vec![
            (*age).into(),
            bucket.steps.into(),
            bucket.outages.into(),
            rate.p_sim.into(),
            rate.ci_half_width.into(),
            bucket.moments.variance().into(),
        ]);
    }
    let rate = estimate_rate(&stats, confidence)?;
    table.push(vec![
        "all".into(),
        stats.counted_steps.into(),
        stats.outage_steps.into(),
        rate.p_sim.into(),
        rate.ci_half_width.into(),
        stats.empirical_variance().into(),
    ]);
    Ok(table)
}

/// Outcome of `compare`: the table and how many cells fell inside their interval.
pub struct CompareOutcome {
    pub table: ResultTable,
    pub within: usize,
    pub total: usize,
}

pub fn cmd_compare(args: &CompareArgs) -> Result<CompareOutcome> {
    let (mut file, source) = require(&args.source)?;
    apply_run(&mut file, &args.run);
    if let Some(grid) = &args.noise_grid {
        file.analysis.noise_grid = grid.clone();
    }
    if let Some(c) = args.confidence {
        file.analysis.confidence = c;
    }
    if let Some(ConventionChoice::Fixed(c)) = args.convention {
        file.analysis.convention = c;
    }
    let ages: Vec<AgeSpec> = match &args.ages {
        Some(a) => a.clone(),
        None => file.analysis.ages.iter().map(|&a| AgeSpec::Fixed(a)).collect(),
    };
    let fixed: Vec<u32> = ages
        .iter()
        .filter_map(|a| match a {
            AgeSpec::Fixed(k) => Some(*k),
            AgeSpec::Stationary => None,
        })
        .collect();
    if !fixed.is_empty() {
        file.analysis.ages = fixed;
    }
    if file.analysis.noise_grid.is_empty() {
        return Err(Error::Usage("noise grid is empty".into()));
    }
    if ages.is_empty() {
        return Err(Error::Usage("age grid is empty".into()));
    }
    file.validate()?;

    let mut calibration = None;
    if args.convention == Some(ConventionChoice::Auto) {
        let noise = file.analysis.noise_grid.iter().copied().fold(0.0, f64::max);
        let age = file.analysis.ages.first().copied().unwrap_or(1);
        if noise > 0.0 {
            let scenario = file.to_scenario()?;
            let cal = with_threads(args.run.threads, || calibrate_convention(&scenario, noise, age))?;
            file.analysis.convention = cal.selected;
            calibration = Some((cal, noise, age));
        }
    }

    let scenario = file.to_scenario()?;
    let confidence = file.analysis.confidence;
    let rows = with_threads(args.run.threads, || {
        compare(&scenario, &file.analysis.noise_grid, &ages, confidence)
    })?;

    let mut table = ResultTable::new(vec!["noise_scale", "age", "p_sim", "ci_half_width", "p_model", "within_ci"]);
    header(&mut table, "compare", Some((&file, &source)))?;
    table
        .meta("confidence", confidence)
        .meta("episodes", scenario.episodes)
        .meta("horizon", scenario.horizon)
        .meta("warmup", scenario.warmup)
        .meta("sample_stride", scenario.sample_stride);
    if let Some((cal, noise, age)) = &calibration {
        table.meta(
            "calibration",
            format!(
                "noise_scale={noise} age={age} empirical_variance={} {} selected={}",
                crate::report::format_float(cal.empirical_variance),
                cal.candidates
                    .iter()
                    .map(|(c, v)| format!("{c}={}", crate::report::format_float(*v)))
                    .collect::<Vec<_>>()
                    .join(" "),
                cal.selected
            ),
        );
    }
    let within = rows.iter().filter(|r| r.within_ci).count();
    table.meta("cells_within_ci", format!("{within}/{}", rows.len()));
    for r in &rows {
        let age: Cell = match r.age {
            AgeSpec::Fixed(a) => a.into(),
            AgeSpec::Stationary => "stationary".into(),
        };
        table.push(vec![
            r.noise_scale.into(),
            age,
            r.p_sim.into(),
            r.ci_half_width.into(),
            r.p_model.into(),
            r.within_ci.into(),
        ]);
    }
    Ok(CompareOutcome {
        table,
        within,
        total: rows.len(),
    })
}

pub fn cmd_inflection(args: &InflectionArgs) -> Result<ResultTable> {
    let loaded = load(&args.source)?;
    let delta_g = match (args.delta_g, &loaded) {
        (Some(d), _) => d,
        (None, Some((f, _))) => f.system.delta_g,
        (None, None) => return Err(Error::Usage("--delta-g or a scenario is required".into())),
    };
    if !(delta_g > 0.0 && delta_g.is_finite()) {
        return Err(Error::Usage(format!("--delta-g must be positive, got {delta_g}")));
    }
    let axes: Vec<InflectionAxis> = match args.axis {
        Some(a) => vec![a],
        None => InflectionAxis::ALL.to_vec(),
    };
    let mut table = ResultTable::new(vec!["axis", "paper_value", "numeric_value"]);
    header(&mut table, "inflection", loaded.as_ref().map(|(f, s)| (f, s.as_str())))?;
    table.meta("delta_g", delta_g);
    for axis in axes {
        let ip = inflection_variance(delta_g, axis)?;
        table.push(vec![axis.as_str().into(), ip.paper_value.into(), ip.numeric_value.into()]);
    }
    Ok(table)
}

/// Runs a parsed command, writing results to `--out` or `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Analyze(a) => {
            let t = cmd_analyze(a)?;
            emit(&t, &a.output, load(&a.source)?.as_ref().map(|x| &x.0), stdout)
        }
        Command::Simulate(a) => {
            let t = cmd_simulate(a)?;
            emit(&t, &a.output, load(&a.source)?.as_ref().map(|x| &x.0), stdout)
        }
        Command::Compare(a) => {
            let out = cmd_compare(a)?;
            emit(&out.table, &a.output, load(&a.source)?.as_ref().map(|x| &x.0), stdout)?;
            match a.acceptance {
                Some(required) if (out.within as f64) < required * out.total as f64 => Err(Error::AcceptanceFailed {
                    passed: out.within,
                    total: out.total,
                    required,
                }),
                _ => Ok(()),
            }
        }
        Command::Inflection(a) => {
            let t = cmd_inflection(a)?;
            emit(&t, &a.output, load(&a.source)?.as_ref().map(|x| &x.0), stdout)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Data lines of a CSV table, without the metadata header.
pub fn data_rows(csv: &str) -> Vec<&str> {
    split_csv(csv).1
}
