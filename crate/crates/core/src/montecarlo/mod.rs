//! Monte Carlo simulation of ramp-coupled dispatch with dictionary-first
//! solving, and the direct benchmark that solves every sample.
//!
//! Paths are independent given the initial dispatch. The dictionary run
//! processes paths in rounds of geometrically growing size (1, 2, 4, ...,
//! capped at [`MAX_ROUND`]): every path in a round looks up against the
//! dictionary as it stood at the start of the round plus its own new
//! regions, and rounds merge in path order. Output therefore depends only on
//! the config, never on the worker count.

mod scenario;

use log::{debug, info, warn};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use scenario::{preset_names, preset_text, read_profile, MeanTrajectory, ResourceBase, Scenario, ScenarioConfig, WindFarm};

use crate::canonical::{CanonicalMpp, FormulationError};
use crate::dictionary::{Dictionary, DictionaryError};
use crate::mpregion::{region_from_solution, CriticalRegion};
use crate::netcase::CaseError;
use crate::solver::{verify_kkt_parts, SolveResult, SolveStatus, Solver, SolverError};

/// Largest number of paths sharing one dictionary snapshot.
pub const MAX_ROUND: usize = 64;
/// Dictionary hits between KKT spot checks on a path.
pub const KKT_CHECK_INTERVAL: u64 = 1000;
const KKT_CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Formulation(#[from] FormulationError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Source {
    DictHit,
    DirectSolve,
    DegenerateFallback,
    /// No feasible dispatch; the previous dispatch is held.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Path, 0-based.
    pub m: usize,
    /// Interval, 1-based.
    pub t: usize,
    pub theta: Vec<f64>,
    pub dispatch: Vec<f64>,
    /// NaN for infeasible records.
    pub lmp: Vec<f64>,
    pub flows: Vec<f64>,
    pub active_set: Vec<usize>,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunCounters {
    pub samples: u64,
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub direct_solves: u64,
    pub degenerate_fallbacks: u64,
    pub infeasible: u64,
    pub kkt_checks: u64,
    pub kkt_failures: u64,
}

impl RunCounters {
    fn add(&mut self, o: &RunCounters) {
        self.samples += o.samples;
        self.lookups += o.lookups;
        self.hits += o.hits;
        self.misses += o.misses;
        self.direct_solves += o.direct_solves;
        self.degenerate_fallbacks += o.degenerate_fallbacks;
        self.infeasible += o.infeasible;
        self.kkt_checks += o.kkt_checks;
        self.kkt_failures += o.kkt_failures;
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Path-major, then interval.
    pub records: Vec<Record>,
    pub dictionary: Dictionary,
    pub counters: RunCounters,
    pub runs: usize,
    pub horizon: usize,
}

impl RunResult {
    pub fn record(&self, m: usize, t: usize) -> &Record {
        &self.records[m * self.horizon + (t - 1)]
    }

    pub fn at_time(&self, t: usize) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.t == t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitSummary {
    pub solves: u64,
    pub inserted: usize,
    pub degenerate: u64,
}

/// Independent stream per `(seed, m, t)`.
fn stream(seed: u64, m: usize, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    rng.set_word_pos((t as u128) << 40);
    rng
}

/// Draws the net-load vector of path `m` at interval `t`: independent
/// Gaussian bus loads with std `eta * mean`, minus Gaussian wind output.
/// Normals are drawn in bus order, then wind-farm order.
pub fn sample_net_load(scenario: &Scenario, m: usize, t: usize) -> DVector<f64> {
    let mut rng = stream(scenario.config.seed, m, t);
    let eta = scenario.config.eta;
    let mut d = scenario.mean_loads[t - 1].clone();
    for v in d.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += eta * v.abs() * z;
    }
    for &(bus, mu, sd) in &scenario.wind {
        let z: f64 = StandardNormal.sample(&mut rng);
        d[bus] -= mu + sd * z;
    }
    d
}

/// Solves along the mean trajectory, collecting each new region. Points
/// already covered by a collected region are not re-solved.
pub fn init_dictionary(scenario: &Scenario) -> Result<(Dictionary, InitSummary), MonteCarloError> {
    let mpp = &scenario.mpp;
    let fp = mpp.fingerprint();
    let mut dict = Dictionary::new(fp, mpp.layout.dim());
    let mut solver = Solver::new();
    let mut summary = InitSummary { solves: 0, inserted: 0, degenerate: 0 };
    let mut g_prev = scenario.initial_dispatch.clone();
    for t in 1..=scenario.horizon() {
        let theta = scenario.theta(&scenario.mean_net_load(t), &g_prev);
        if let Some(i) = dict.find(&theta) {
            g_prev = mpp.dispatch(&dict.get(i).primal(&theta)).into_owned();
            continue;
        }
        let res = solver.solve(mpp, &theta)?;
        summary.solves += 1;
        match res.status {
            SolveStatus::Optimal => match region_from_solution(mpp, &theta, &res) {
                Ok(region) => {
                    if dict.position_of(&region.active_set).is_none() {
                        dict.insert(fp, region)?;
                        summary.inserted += 1;
                    }
                }
                Err(e) => {
                    debug!("mean trajectory t={t}: {e}");
                    summary.degenerate += 1;
                }
            },
            SolveStatus::Degenerate => summary.degenerate += 1,
            other => {
                return Err(MonteCarloError::Infeasible(format!(
                    "mean trajectory interval {t}: {other:?}"
                )))
            }
        }
        g_prev = mpp.dispatch(&res.x_star).into_owned();
    }
    info!(
        "initial dictionary: {} regions from {} solves ({} degenerate)",
        summary.inserted, summary.solves, summary.degenerate
    );
    Ok((dict, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Dictionary,
    Direct,
}

struct PathOutcome {
    records: Vec<Record>,
    counters: RunCounters,
    /// Hits on snapshot entries, by snapshot index.
    snapshot_hits: Vec<(usize, u64)>,
    local: Dictionary,
}

fn record_from(
    mpp: &CanonicalMpp,
    m: usize,
    t: usize,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    y_ineq: &DVector<f64>,
    y_eq: &DVector<f64>,
    active_set: &[usize],
    source: Source,
) -> Record {
    let d: Vec<f64> = theta.rows(0, mpp.layout.n_load).iter().copied().collect();
    Record {
        m,
        t,
        theta: theta.iter().copied().collect(),
        dispatch: mpp.dispatch(x).iter().copied().collect(),
        lmp: mpp.prices(y_ineq, y_eq).lmp.iter().copied().collect(),
        flows: mpp.line_flows(x, &d).iter().copied().collect(),
        active_set: active_set.to_vec(),
        source,
    }
}

fn simulate_path(scenario: &Scenario, m: usize, snapshot: Option<&Dictionary>, mode: Mode) -> Result<PathOutcome, MonteCarloError> {
    let mpp = &scenario.mpp;
    let fp = mpp.fingerprint();
    let mut local = Dictionary::new(fp, mpp.layout.dim());
    let mut solver = Solver::new();
    let mut counters = RunCounters::default();
    let mut snapshot_hits: Vec<u64> = vec![0; snapshot.map_or(0, |s| s.len())];
    let mut since_check = 0u64;
    let mut g_prev = scenario.initial_dispatch.clone();
    let mut records = Vec::with_capacity(scenario.horizon());

    for t in 1..=scenario.horizon() {
        let d = sample_net_load(scenario, m, t);
        let theta = scenario.theta(&d, &g_prev);
        counters.samples += 1;

        if mode == Mode::Dictionary {
            let found: Option<(&CriticalRegion, Option<usize>, Option<usize>)> = match snapshot.and_then(|s| s.find(&theta)) {
                Some(i) => Some((snapshot.unwrap().get(i), Some(i), None)),
                None => local.find(&theta).map(|j| (local.get(j), None, Some(j))),
            };
            if let Some((region, snap_idx, local_idx)) = found {
                let x = region.primal(&theta);
                let (y_ineq, y_eq) = region.duals(&theta);
                let mut accept = true;
                since_check += 1;
                if since_check >= KKT_CHECK_INTERVAL {
                    since_check = 0;
                    counters.kkt_checks += 1;
                    if !verify_kkt_parts(mpp, &theta, &x, &y_ineq, &y_eq).passes(KKT_CHECK_TOL) {
                        warn!("path {m} t={t}: region failed the KKT spot check; solving directly");
                        counters.kkt_failures += 1;
                        accept = false;
                    }
                }
                if accept {
                    let rec = record_from(mpp, m, t, &theta, &x, &y_ineq, &y_eq, &region.active_set, Source::DictHit);
                    counters.lookups += 1;
                    counters.hits += 1;
                    match (snap_idx, local_idx) {
                        (Some(i), _) => snapshot_hits[i] += 1,
                        (_, Some(j)) => local.record_hit(j),
                        _ => unreachable!(),
                    }
                    g_prev = DVector::from_vec(rec.dispatch.clone());
                    records.push(rec);
                    continue;
                }
            }
            counters.lookups += 1;
            counters.misses += 1;
            local.record_miss();
        }

        counters.direct_solves += 1;
        let res = solver.solve(mpp, &theta)?;
        let rec = match res.status {
            SolveStatus::Optimal | SolveStatus::Degenerate => {
                let source = classify_solve(scenario, &res, &theta, snapshot, &mut local, mode)?;
                if source == Source::DegenerateFallback {
                    counters.degenerate_fallbacks += 1;
                }
                record_from(mpp, m, t, &theta, &res.x_star, &res.y_ineq, &res.y_eq, &res.active_set, source)
            }
            SolveStatus::Infeasible | SolveStatus::Unbounded => {
                warn!("path {m} t={t}: {:?}; holding the previous dispatch", res.status);
                counters.infeasible += 1;
                let flows = &mpp.ptdf * (inject_at(mpp, &g_prev) - &d);
                Record {
                    m,
                    t,
                    theta: theta.iter().copied().collect(),
                    dispatch: g_prev.iter().copied().collect(),
                    lmp: vec![f64::NAN; mpp.n_buses()],
                    flows: flows.iter().copied().collect(),
                    active_set: Vec::new(),
                    source: Source::Infeasible,
                }
            }
        };
        g_prev = DVector::from_vec(rec.dispatch.clone());
        records.push(rec);
    }
    let snapshot_hits = snapshot_hits.into_iter().enumerate().filter(|&(_, h)| h > 0).collect();
    Ok(PathOutcome { records, counters, snapshot_hits, local })
}

fn inject_at(mpp: &CanonicalMpp, g: &DVector<f64>) -> DVector<f64> {
    let mut p = DVector::zeros(mpp.n_buses());
    for (i, &b) in mpp.gen_buses.iter().enumerate() {
        p[b] += g[i];
    }
    p
}

/// Builds the region of a fresh solve and stores it when new.
fn classify_solve(
    scenario: &Scenario,
    res: &SolveResult,
    theta: &DVector<f64>,
    snapshot: Option<&Dictionary>,
    local: &mut Dictionary,
    mode: Mode,
) -> Result<Source, MonteCarloError> {
    if res.status == SolveStatus::Degenerate {
        if mode == Mode::Dictionary {
            local.record_degenerate();
        }
        return Ok(Source::DegenerateFallback);
    }
    if mode == Mode::Direct {
        return Ok(Source::DirectSolve);
    }
    match region_from_solution(&scenario.mpp, theta, res) {
        Ok(region) => {
            let known = snapshot.is_some_and(|s| s.position_of(&region.active_set).is_some())
                || local.position_of(&region.active_set).is_some();
            if !known {
                local.insert(scenario.mpp.fingerprint(), region)?;
            }
            Ok(Source::DirectSolve)
        }
        Err(e) => {
            debug!("region construction failed: {e}");
            local.record_degenerate();
            Ok(Source::DegenerateFallback)
        }
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, MonteCarloError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| MonteCarloError::Io(format!("thread pool: {e}")))
}

/// Dictionary-first simulation seeded with `dict0`.
pub fn run_odl(scenario: &Scenario, dict0: Dictionary, workers: usize) -> Result<RunResult, MonteCarloError> {
    let fp = scenario.mpp.fingerprint();
    if dict0.fingerprint() != fp {
        return Err(DictionaryError::Fingerprint { expected: fp, got: dict0.fingerprint() }.into());
    }
    let pool = pool(workers)?;
    let mut dict = dict0;
    let mut records = Vec::with_capacity(scenario.runs() * scenario.horizon());
    let mut counters = RunCounters::default();
    let mut start = 0;
    let mut batch = 1;
    while start < scenario.runs() {
        let end = (start + batch).min(scenario.runs());
        let snapshot = &dict;
        let outcomes: Vec<PathOutcome> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|m| simulate_path(scenario, m, Some(snapshot), Mode::Dictionary))
                .collect::<Result<_, _>>()
        })?;
        for out in outcomes {
            for (i, h) in out.snapshot_hits {
                dict.entries_mut()[i].hit_count += h;
            }
            dict.total_lookups += out.counters.lookups - out.local.total_lookups;
            dict.total_hits += out.counters.hits - out.local.total_hits;
            dict.merge(out.local)?;
            counters.add(&out.counters);
            records.extend(out.records);
        }
        dict.reorder();
        start = end;
        batch = (batch * 2).min(MAX_ROUND);
    }
    info!(
        "dictionary run: {} samples, {} direct solves, {} regions",
        counters.samples,
        counters.direct_solves,
        dict.len()
    );
    Ok(RunResult {
        records,
        dictionary: dict,
        counters,
        runs: scenario.runs(),
        horizon: scenario.horizon(),
    })
}

/// Benchmark: every sample solved directly, same sampling streams.
pub fn run_direct(scenario: &Scenario, workers: usize) -> Result<RunResult, MonteCarloError> {
    let pool = pool(workers)?;
    let outcomes: Vec<PathOutcome> = pool.install(|| {
        (0..scenario.runs())
            .into_par_iter()
            .map(|m| simulate_path(scenario, m, None, Mode::Direct))
            .collect::<Result<_, _>>()
    })?;
    let mut records = Vec::with_capacity(scenario.runs() * scenario.horizon());
    let mut counters = RunCounters::default();
    for out in outcomes {
        counters.add(&out.counters);
        records.extend(out.records);
    }
    Ok(RunResult {
        records,
        dictionary: Dictionary::new(scenario.mpp.fingerprint(), scenario.mpp.layout.dim()),
        counters,
        runs: scenario.runs(),
        horizon: scenario.horizon(),
    })
}

/// Largest absolute difference between matching records over every output
/// entry. NaN entries (infeasible records) must coincide.
pub fn max_discrepancy(a: &RunResult, b: &RunResult) -> f64 {
    assert_eq!(a.records.len(), b.records.len(), "record counts differ");
    let mut worst = 0.0f64;
    for (ra, rb) in a.records.iter().zip(&b.records) {
        for (xa, xb) in ra
            .dispatch
            .iter()
            .zip(&rb.dispatch)
            .chain(ra.lmp.iter().zip(&rb.lmp))
            .chain(ra.flows.iter().zip(&rb.flows))
        {
            let diff = if xa.is_nan() && xb.is_nan() {
                0.0
            } else if xa.is_nan() || xb.is_nan() {
                f64::INFINITY
            } else {
                (xa - xb).abs()
            };
            worst = worst.max(diff);
        }
    }
    worst
}
