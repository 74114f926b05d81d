//! Command-line driver.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage or
//! input error.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::dictionary::{Dictionary, DictionaryError};
use crate::montecarlo::{
    init_dictionary, max_discrepancy, run_direct, run_odl, MonteCarloError, RunResult, Scenario, ScenarioConfig,
};
use crate::netcase::{build_ptdf, parse_case};
use crate::solver::{verify_kkt_parts, SolveStatus, Solver};
use crate::stats::{build_report, records_csv, render, Format, StatsError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

/// Tolerance for agreement between dictionary and direct results.
pub const DISCREPANCY_TOL: f64 = 1e-7;
const VERIFY_KKT_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "odlsim", version, about = "Probabilistic LMP forecasting with online dictionary learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a Monte Carlo forecast and write report files.
    Simulate(SimulateArgs),
    /// Compare dictionary and direct runs on the same samples.
    Bench(RunArgs),
    /// Tools for dictionary files.
    #[command(subcommand)]
    Dict(DictCommand),
    /// Validate a case file or print its shift factors.
    #[command(subcommand)]
    Case(CaseCommand),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file, or `preset:<name>`.
    #[arg(long)]
    pub config: String,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Solve every sample directly instead of using the dictionary.
    #[arg(long)]
    pub direct: bool,
    /// Start from a saved dictionary instead of the mean trajectory.
    #[arg(long)]
    pub resume_dict: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum DictCommand {
    /// Print dictionary statistics.
    Inspect { path: PathBuf },
    /// Union two dictionaries of the same program.
    Merge {
        a: PathBuf,
        b: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Re-check every entry at its seed against a direct solve.
    Verify {
        path: PathBuf,
        #[arg(long)]
        config: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum CaseCommand {
    Validate { path: PathBuf },
    /// Shift factors as CSV, one row per branch, one column per bus.
    Ptdf { path: PathBuf },
}

/// An error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn input(e: impl Display) -> Failure {
    Failure { code: EXIT_INPUT, message: e.to_string() }
}

fn runtime(e: impl Display) -> Failure {
    Failure { code: EXIT_FAILURE, message: e.to_string() }
}

impl From<MonteCarloError> for Failure {
    fn from(e: MonteCarloError) -> Self {
        match e {
            MonteCarloError::Config(_)
            | MonteCarloError::Io(_)
            | MonteCarloError::Case(_)
            | MonteCarloError::Formulation(_)
            | MonteCarloError::Dictionary(_) => input(e),
            MonteCarloError::Solver(_) | MonteCarloError::Infeasible(_) => runtime(e),
        }
    }
}

impl From<StatsError> for Failure {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Option(_) => input(e),
            _ => runtime(e),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_source: String,
    pub config: ScenarioConfig,
    pub case_fingerprint: String,
    pub seed: u64,
    pub workers: usize,
    pub mode: String,
    pub started_unix_s: u64,
    pub outputs: Vec<String>,
}

/// Writes via a temporary file and rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| runtime(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_scenario(args: &RunArgs) -> Result<Scenario, Failure> {
    let (text, base) = Scenario::read_config(&args.config)?;
    let mut config = ScenarioConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(Scenario::from_config(config, &base)?)
}

fn load_dictionary(path: &Path, fingerprint: Option<u64>) -> Result<Dictionary, Failure> {
    let file = std::fs::File::open(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    Dictionary::load(std::io::BufReader::new(file), fingerprint).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn save_dictionary(dict: &Dictionary, path: &Path) -> Result<(), Failure> {
    let mut buf = Vec::new();
    dict.save(&mut buf).map_err(runtime)?;
    write_atomic(path, &buf)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

const DICTIONARY_FILE: &str = "dictionary.odld";
const RECORDS_FILE: &str = "records.csv";
const MANIFEST_FILE: &str = "manifest.json";

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let scenario = load_scenario(&args.run)?;
    let out = args.run.out.clone().unwrap_or_else(|| PathBuf::from("odlsim-out"));
    std::fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let fp = scenario.mpp.fingerprint();
    let started = unix_now();

    let result = if args.direct {
        run_direct(&scenario, args.run.workers)?
    } else {
        let dict0 = match &args.resume_dict {
            Some(path) => load_dictionary(path, Some(fp))?,
            None => init_dictionary(&scenario)?.0,
        };
        run_odl(&scenario, dict0, args.run.workers)?
    };
    let report = build_report(&result, &scenario, &scenario.config.report)?;
    let format = match args.format {
        FormatArg::Csv => Format::Csv,
        FormatArg::Json => Format::Json,
    };
    let files = render(&report, format)?;
    let records = records_csv(&result, &scenario);

    let mut outputs: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    outputs.push(RECORDS_FILE.into());
    if !args.direct {
        outputs.push(DICTIONARY_FILE.into());
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: "simulate".into(),
        config_source: args.run.config.clone(),
        config: scenario.config.clone(),
        case_fingerprint: format!("{fp:016x}"),
        seed: scenario.config.seed,
        workers: args.run.workers,
        mode: if args.direct { "direct" } else { "dictionary" }.into(),
        started_unix_s: started,
        outputs,
    };
    let manifest_text = serde_json::to_string_pretty(&manifest).map_err(runtime)? + "\n";
    write_atomic(&out.join(MANIFEST_FILE), manifest_text.as_bytes())?;
    for (name, text) in &files {
        std::fs::write(out.join(name), text).map_err(|e| runtime(format!("{name}: {e}")))?;
    }
    std::fs::write(out.join(RECORDS_FILE), records).map_err(|e| runtime(format!("{RECORDS_FILE}: {e}")))?;
    if !args.direct {
        save_dictionary(&result.dictionary, &out.join(DICTIONARY_FILE))?;
    }
    print_run_summary(&result);
    println!("wrote {} files to {}", files.len() + 2 + usize::from(!args.direct), out.display());
    Ok(())
}

fn print_run_summary(result: &RunResult) {
    let c = &result.counters;
    println!("samples: {}", c.samples);
    println!("direct solves: {}", c.direct_solves);
    println!("dictionary hits: {}", c.hits);
    println!("degenerate fallbacks: {}", c.degenerate_fallbacks);
    println!("infeasible samples: {}", c.infeasible);
    println!("dictionary entries: {}", result.dictionary.len());
}

fn bench(args: &RunArgs) -> Result<(), Failure> {
    let scenario = load_scenario(args)?;
    let t0 = Instant::now();
    let (dict0, init) = init_dictionary(&scenario)?;
    let odl = run_odl(&scenario, dict0, args.workers)?;
    let odl_time = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let direct = run_direct(&scenario, args.workers)?;
    let direct_time = t1.elapsed().as_secs_f64();
    let discrepancy = max_discrepancy(&odl, &direct);
    let odl_solves = odl.counters.direct_solves + init.solves;

    let table = format!(
        "method,samples,solves,wall_s\ndictionary,{},{},{:.3}\ndirect,{},{},{:.3}\n",
        odl.counters.samples, odl_solves, odl_time, direct.counters.samples, direct.counters.direct_solves, direct_time
    );
    print!("{table}");
    println!("initial dictionary solves: {}", init.solves);
    println!("dictionary entries: {}", odl.dictionary.len());
    println!("max discrepancy: {discrepancy:e}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
        std::fs::write(out.join("bench.csv"), &table).map_err(runtime)?;
        let mut curve = String::from("samples,direct_solves\n");
        for (s, d) in crate::stats::solve_curve(&odl) {
            curve.push_str(&format!("{s},{d}\n"));
        }
        std::fs::write(out.join("solve_curve.csv"), curve).map_err(runtime)?;
    }
    if discrepancy > DISCREPANCY_TOL {
        return Err(runtime(format!("dictionary and direct results differ by {discrepancy:e}")));
    }
    Ok(())
}

fn dict_inspect(path: &Path) -> Result<(), Failure> {
    let d = load_dictionary(path, None)?;
    let s = d.stats();
    println!("fingerprint: {:016x}", d.fingerprint());
    println!("entries: {}", s.entry_count);
    println!("lookups: {}", d.total_lookups);
    println!("hits: {}", d.total_hits);
    println!("misses: {}", d.total_misses);
    println!("degenerate fallbacks: {}", d.degenerate_fallbacks);
    println!("hit rate: {:.6}", s.hit_rate);
    println!("regions covering 99% of hits: {}", s.k_covering_99);
    println!("entry,hits,faces,active_rows");
    for &(i, hits) in &s.hits_per_region {
        let r = d.get(i);
        println!("{i},{hits},{},{}", r.face_count(), r.active_set.len());
    }
    Ok(())
}

fn dict_merge(a: &Path, b: &Path, output: &Path) -> Result<(), Failure> {
    let mut da = load_dictionary(a, None)?;
    let db = load_dictionary(b, None)?;
    da.merge(db).map_err(|e| match e {
        DictionaryError::Fingerprint { .. } => input(e),
        _ => runtime(e),
    })?;
    save_dictionary(&da, output)?;
    println!("merged dictionary: {} entries", da.len());
    Ok(())
}

fn dict_verify(path: &Path, config: &str) -> Result<(), Failure> {
    let scenario = Scenario::load(config)?;
    let mpp = &scenario.mpp;
    let d = load_dictionary(path, Some(mpp.fingerprint()))?;
    let mut solver = Solver::new();
    let mut failures = Vec::new();
    for (i, region) in d.entries().iter().enumerate() {
        let theta = &region.seed_theta;
        let x = region.primal(theta);
        let (y_ineq, y_eq) = region.duals(theta);
        let kkt = verify_kkt_parts(mpp, theta, &x, &y_ineq, &y_eq);
        if !kkt.passes(VERIFY_KKT_TOL) {
            failures.push(format!("entry {i}: KKT residual {:e}", kkt.max_residual()));
            continue;
        }
        let res = solver.solve(mpp, theta).map_err(runtime)?;
        if !matches!(res.status, SolveStatus::Optimal | SolveStatus::Degenerate) {
            failures.push(format!("entry {i}: seed solve {:?}", res.status));
            continue;
        }
        let gap = (&x - &res.x_star).amax();
        if gap > DISCREPANCY_TOL {
            failures.push(format!("entry {i}: primal differs from direct solve by {gap:e}"));
        }
    }
    if failures.is_empty() {
        println!("verified {} entries", d.len());
        Ok(())
    } else {
        for f in &failures {
            eprintln!("{f}");
        }
        Err(runtime(format!("{} of {} entries failed verification", failures.len(), d.len())))
    }
}

fn read_case(path: &Path) -> Result<crate::netcase::Network, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    parse_case(&text).map_err(input)
}

fn case_validate(path: &Path) -> Result<(), Failure> {
    let net = read_case(path)?;
    build_ptdf(&net).map_err(input)?;
    println!("buses: {}", net.n_buses());
    println!("branches: {}", net.n_branches());
    println!("limited branches: {}", net.limited_branches().len());
    println!("generators: {}", net.n_generators());
    println!("slack bus: {}", net.buses[net.slack()].id);
    println!("total mean load: {}", net.load_means().iter().sum::<f64>());
    Ok(())
}

fn case_ptdf(path: &Path) -> Result<(), Failure> {
    let net = read_case(path)?;
    let s = build_ptdf(&net).map_err(input)?;
    for k in 0..s.nrows() {
        let row: Vec<String> = (0..s.ncols())
            .map(|j| {
                let v = s[(k, j)];
                if v == 0.0 { "0".to_string() } else { v.to_string() }
            })
            .collect();
        println!("{}", row.join(","));
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Bench(a) => bench(a),
        Command::Dict(DictCommand::Inspect { path }) => dict_inspect(path),
        Command::Dict(DictCommand::Merge { a, b, output }) => dict_merge(a, b, output),
        Command::Dict(DictCommand::Verify { path, config }) => dict_verify(path, config),
        Command::Case(CaseCommand::Validate { path }) => case_validate(path),
        Command::Case(CaseCommand::Ptdf { path }) => case_ptdf(path),
    }
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or("ODLSIM_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args`, runs the command, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => {
            info!("done");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
