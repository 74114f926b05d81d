//! Forecast products from simulation records: LMP distributions, flow and
//! dispatch histograms, congestion probabilities, and the solve-economy and
//! region-concentration reports.
//!
//! CSV files written by [`export`] (floats with 17 significant digits):
//!
//! | file | columns |
//! |---|---|
//! | `lmp_pmf.csv` | `bus,value,probability,count` |
//! | `lmp_expected.csv` | `bus,expected` |
//! | `joint_lmp_<i>_<j>.csv` | `value_i,value_j,probability,count` |
//! | `flow_hist_<line>.csv` | `lower,upper,count,probability` |
//! | `flow_summary.csv` | `line,from,to,limit,mean,std,modes,congestion_probability` |
//! | `congestion.csv` | `line,probability` |
//! | `dispatch_hist.csv` | `generator,bus,lower,upper,count,probability` |
//! | `dispatch_summary.csv` | `generator,bus,mean,std` |
//! | `region_slices.csv` | `rank,count,share,active_set` |
//! | `region_flows.csv` | `rank,line,mean,std` |
//! | `solve_curve.csv` | `samples,direct_solves` |
//! | `region_freq.csv` | `rank,entry,hits,share,cumulative_share` |
//! | `summary.csv` | `key,value` |
//!
//! Buses are external ids, lines are 1-based branch numbers in case order,
//! generators are 0-based in case order. `active_set` lists inequality row
//! indices separated by spaces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::RowTag;
use crate::dictionary::smallest_cover;
use crate::montecarlo::{Record, RunResult, Scenario, Source};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no feasible records at interval {0}")]
    EmptySlice(usize),
    #[error("report option: {0}")]
    Option(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportOptions {
    /// Interval to report, 1-based; the last interval when absent.
    pub time: Option<usize>,
    /// External bus id pairs for joint LMP distributions.
    pub bus_pairs: Vec<[i64; 2]>,
    pub flow_bin_mw: f64,
    pub dispatch_bin_mw: f64,
    /// Prices closer than this share one atom, $/MWh.
    pub price_quantum: f64,
    /// A histogram peak counts as a mode when its prominence is at least
    /// this fraction of the tallest bin.
    pub mode_prominence: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            time: None,
            bus_pairs: Vec::new(),
            flow_bin_mw: 1.0,
            dispatch_bin_mw: 1.0,
            price_quantum: 1e-4,
            mode_prominence: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Atom {
    pub value: f64,
    pub probability: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointAtom {
    pub value_i: f64,
    pub value_j: f64,
    pub probability: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusPrices {
    pub bus: i64,
    pub expected: f64,
    pub pmf: Vec<Atom>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointPmf {
    pub bus_i: i64,
    pub bus_j: i64,
    pub atoms: Vec<JointAtom>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: Vec<Bin>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineStats {
    pub line: usize,
    pub from_bus: i64,
    pub to_bus: i64,
    pub limit: Option<f64>,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
    pub modes: usize,
    pub congestion_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorStats {
    pub generator: usize,
    pub bus: i64,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

/// Records at the report interval that share one active set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSlice {
    pub active_set: Vec<usize>,
    pub count: u64,
    pub share: f64,
    pub flow_mean: Vec<f64>,
    pub flow_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionShare {
    pub entry: usize,
    pub hits: u64,
    pub share: f64,
    pub cumulative_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionFrequency {
    pub entry_count: usize,
    pub hit_rate: f64,
    /// Most-hit first.
    pub shares: Vec<RegionShare>,
    pub k_covering_99: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastReport {
    pub time: usize,
    pub records: u64,
    pub infeasible: u64,
    pub buses: Vec<BusPrices>,
    pub joint: Vec<JointPmf>,
    pub lines: Vec<LineStats>,
    pub generators: Vec<GeneratorStats>,
    pub regions_at_time: Vec<RegionSlice>,
    /// `(samples, direct solves)` after each sample, in record order.
    pub solve_curve: Vec<(u64, u64)>,
    pub region_frequency: RegionFrequency,
}

/// Groups values into atoms no wider than `quantum`; atom value is the
/// member mean. Returns the atoms (ascending) and each value's atom index.
pub fn pmf(values: &[f64], quantum: f64) -> (Vec<Atom>, Vec<usize>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut atoms = Vec::new();
    let mut assign = vec![0; n];
    let mut i = 0;
    while i < n {
        let start = values[order[i]];
        let mut j = i;
        let mut sum = 0.0;
        while j < n && values[order[j]] - start <= quantum {
            sum += values[order[j]];
            assign[order[j]] = atoms.len();
            j += 1;
        }
        let count = (j - i) as u64;
        atoms.push(Atom {
            value: sum / count as f64,
            probability: count as f64 / n as f64,
            count,
        });
        i = j;
    }
    (atoms, assign)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn histogram(values: &[f64], width: f64) -> Histogram {
    let index = |v: f64| (v / width).floor() as i64;
    let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
    for &v in values {
        *counts.entry(index(v)).or_default() += 1;
    }
    let (Some(&lo), Some(&hi)) = (counts.keys().next(), counts.keys().next_back()) else {
        return Histogram { bin_width: width, bins: Vec::new() };
    };
    let n = values.len() as f64;
    let bins = (lo..=hi)
        .map(|k| {
            let count = counts.get(&k).copied().unwrap_or(0);
            Bin {
                lower: k as f64 * width,
                upper: (k + 1) as f64 * width,
                count,
                probability: count as f64 / n,
            }
        })
        .collect();
    Histogram { bin_width: width, bins }
}

/// Peaks whose topographic prominence is at least `min_fraction` of the
/// tallest bin. Plateaus count once.
pub fn count_modes(counts: &[u64], min_fraction: f64) -> usize {
    // collapse plateaus so every run of equal counts is one point
    let mut runs: Vec<u64> = Vec::new();
    for &c in counts {
        if runs.last() != Some(&c) {
            runs.push(c);
        }
    }
    let max = runs.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return 0;
    }
    let threshold = (min_fraction * max as f64).max(1.0);
    let at = |i: isize| if i < 0 || i as usize >= runs.len() { 0 } else { runs[i as usize] };
    let mut modes = 0;
    for p in 0..runs.len() as isize {
        let h = at(p);
        if !(at(p - 1) < h && at(p + 1) < h) {
            continue;
        }
        let mut left_min = h;
        let mut i = p - 1;
        loop {
            let v = at(i);
            left_min = left_min.min(v);
            if v > h || i < 0 {
                break;
            }
            i -= 1;
        }
        let mut right_min = h;
        let mut i = p + 1;
        loop {
            let v = at(i);
            right_min = right_min.min(v);
            if v > h || i >= runs.len() as isize {
                break;
            }
            i += 1;
        }
        if (h - left_min.max(right_min)) as f64 >= threshold {
            modes += 1;
        }
    }
    modes
}

fn flow_rows(scenario: &Scenario, line: usize) -> [Option<usize>; 2] {
    [
        scenario.mpp.ineq_row_of(RowTag::FlowUpper(line)),
        scenario.mpp.ineq_row_of(RowTag::FlowLower(line)),
    ]
}

fn is_congested(record: &Record, rows: &[Option<usize>; 2]) -> bool {
    rows.iter().flatten().any(|r| record.active_set.binary_search(r).is_ok())
}

/// Fraction of feasible records at `t` with a flow limit of `line` (0-based)
/// active.
pub fn congestion_probability(result: &RunResult, scenario: &Scenario, line: usize, t: usize) -> f64 {
    let rows = flow_rows(scenario, line);
    let (mut hit, mut n) = (0u64, 0u64);
    for r in result.at_time(t).filter(|r| r.source != Source::Infeasible) {
        n += 1;
        if is_congested(r, &rows) {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

pub fn solve_curve(result: &RunResult) -> Vec<(u64, u64)> {
    let mut solves = 0;
    result
        .records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if r.source != Source::DictHit {
                solves += 1;
            }
            (k as u64 + 1, solves)
        })
        .collect()
}

pub fn region_frequency(result: &RunResult) -> RegionFrequency {
    let stats = result.dictionary.stats();
    let total: u64 = stats.hits_per_region.iter().map(|&(_, h)| h).sum();
    let mut cumulative = 0u64;
    let shares = stats
        .hits_per_region
        .iter()
        .map(|&(entry, hits)| {
            cumulative += hits;
            let frac = |x: u64| if total == 0 { 0.0 } else { x as f64 / total as f64 };
            RegionShare {
                entry,
                hits,
                share: frac(hits),
                cumulative_share: frac(cumulative),
            }
        })
        .collect();
    RegionFrequency {
        entry_count: stats.entry_count,
        hit_rate: stats.hit_rate,
        shares,
        k_covering_99: stats.k_covering_99,
    }
}

pub fn build_report(result: &RunResult, scenario: &Scenario, options: &ReportOptions) -> Result<ForecastReport, StatsError> {
    let t = options.time.unwrap_or(result.horizon);
    if t == 0 || t > result.horizon {
        return Err(StatsError::Option(format!("time {t} is outside 1..={}", result.horizon)));
    }
    if !(options.flow_bin_mw > 0.0 && options.dispatch_bin_mw > 0.0 && options.price_quantum >= 0.0) {
        return Err(StatsError::Option("bin widths must be positive and price_quantum nonnegative".into()));
    }
    let net = &scenario.network;
    let all: Vec<&Record> = result.at_time(t).collect();
    let slice: Vec<&Record> = all.iter().copied().filter(|r| r.source != Source::Infeasible).collect();
    if slice.is_empty() {
        return Err(StatsError::EmptySlice(t));
    }
    let n = slice.len();
    let column = |f: &dyn Fn(&Record) -> f64| slice.iter().map(|r| f(r)).collect::<Vec<f64>>();

    let mut assignments = Vec::with_capacity(net.n_buses());
    let mut buses = Vec::with_capacity(net.n_buses());
    for (b, rec) in net.buses.iter().enumerate() {
        let values = column(&|r| r.lmp[b]);
        let (atoms, assign) = pmf(&values, options.price_quantum);
        buses.push(BusPrices {
            bus: rec.id,
            expected: mean_std(&values).0,
            pmf: atoms,
        });
        assignments.push(assign);
    }

    let mut joint = Vec::new();
    for &[bi, bj] in &options.bus_pairs {
        let idx = |id: i64| {
            net.bus_index(id)
                .ok_or_else(|| StatsError::Option(format!("bus pair references unknown bus {id}")))
        };
        let (i, j) = (idx(bi)?, idx(bj)?);
        let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for k in 0..n {
            *counts.entry((assignments[i][k], assignments[j][k])).or_default() += 1;
        }
        let atoms = counts
            .into_iter()
            .map(|((a, b), count)| JointAtom {
                value_i: buses[i].pmf[a].value,
                value_j: buses[j].pmf[b].value,
                probability: count as f64 / n as f64,
                count,
            })
            .collect();
        joint.push(JointPmf { bus_i: bi, bus_j: bj, atoms });
    }

    let mut lines = Vec::with_capacity(net.n_branches());
    for (k, br) in net.branches.iter().enumerate() {
        let values = column(&|r| r.flows[k]);
        let (mean, std) = mean_std(&values);
        let hist = histogram(&values, options.flow_bin_mw);
        let counts: Vec<u64> = hist.bins.iter().map(|b| b.count).collect();
        let rows = flow_rows(scenario, k);
        let congested = slice.iter().filter(|r| is_congested(r, &rows)).count();
        lines.push(LineStats {
            line: k + 1,
            from_bus: net.buses[br.from_bus].id,
            to_bus: net.buses[br.to_bus].id,
            limit: br.flow_limit,
            mean,
            std,
            histogram: hist,
            modes: count_modes(&counts, options.mode_prominence),
            congestion_probability: congested as f64 / n as f64,
        });
    }

    let mut generators = Vec::with_capacity(net.n_generators());
    for (i, g) in net.generators.iter().enumerate() {
        let values = column(&|r| r.dispatch[i]);
        let (mean, std) = mean_std(&values);
        generators.push(GeneratorStats {
            generator: i,
            bus: net.buses[g.bus].id,
            mean,
            std,
            histogram: histogram(&values, options.dispatch_bin_mw),
        });
    }

    let mut groups: BTreeMap<&[usize], Vec<&Record>> = BTreeMap::new();
    for r in &slice {
        groups.entry(r.active_set.as_slice()).or_default().push(r);
    }
    let mut regions_at_time: Vec<RegionSlice> = groups
        .into_iter()
        .map(|(set, recs)| {
            let (flow_mean, flow_std) = (0..net.n_branches())
                .map(|k| mean_std(&recs.iter().map(|r| r.flows[k]).collect::<Vec<_>>()))
                .unzip();
            RegionSlice {
                active_set: set.to_vec(),
                count: recs.len() as u64,
                share: recs.len() as f64 / n as f64,
                flow_mean,
                flow_std,
            }
        })
        .collect();
    regions_at_time.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.active_set.cmp(&b.active_set)));

    Ok(ForecastReport {
        time: t,
        records: n as u64,
        infeasible: (all.len() - n) as u64,
        buses,
        joint,
        lines,
        generators,
        regions_at_time,
        solve_curve: solve_curve(result),
        region_frequency: region_frequency(result),
    })
}

impl RegionFrequency {
    /// Smallest number of regions covering `share` of hits.
    pub fn k_covering(&self, share: f64) -> usize {
        smallest_cover(self.shares.iter().map(|s| s.hits), share)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// 17 significant digits; parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v == 0.0 {
        "0".into()
    } else {
        format!("{v:.16e}")
    }
}

struct Csv {
    text: String,
}

impl Csv {
    fn new(header: &str) -> Self {
        Csv { text: format!("{header}\n") }
    }

    fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }
}

fn f(v: f64) -> String {
    fmt_f64(v)
}

fn u<T: std::fmt::Display>(v: T) -> String {
    v.to_string()
}

fn emit(out: &mut Vec<(String, String)>, name: &str, text: String) {
    out.push((name.to_string(), text));
}

/// Writes the report into `dir`; returns the files written.
pub fn export(report: &ForecastReport, format: Format, dir: &Path) -> Result<Vec<PathBuf>, StatsError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, text) in render(report, format)? {
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}

/// The report as `(file name, contents)` pairs, in a fixed order.
pub fn render(report: &ForecastReport, format: Format) -> Result<Vec<(String, String)>, StatsError> {
    let mut written = Vec::new();
    if format == Format::Json {
        let text = serde_json::to_string_pretty(report)?;
        emit(&mut written, "report.json", text + "\n");
        return Ok(written);
    }

    let mut pmf = Csv::new("bus,value,probability,count");
    let mut expected = Csv::new("bus,expected");
    for b in &report.buses {
        for a in &b.pmf {
            pmf.row(&[u(b.bus), f(a.value), f(a.probability), u(a.count)]);
        }
        expected.row(&[u(b.bus), f(b.expected)]);
    }
    emit(&mut written, "lmp_pmf.csv", pmf.text);
    emit(&mut written, "lmp_expected.csv", expected.text);

    for j in &report.joint {
        let mut c = Csv::new("value_i,value_j,probability,count");
        for a in &j.atoms {
            c.row(&[f(a.value_i), f(a.value_j), f(a.probability), u(a.count)]);
        }
        emit(&mut written, &format!("joint_lmp_{}_{}.csv", j.bus_i, j.bus_j), c.text);
    }

    let mut summary = Csv::new("line,from,to,limit,mean,std,modes,congestion_probability");
    let mut congestion = Csv::new("line,probability");
    for l in &report.lines {
        let mut c = Csv::new("lower,upper,count,probability");
        for b in &l.histogram.bins {
            c.row(&[f(b.lower), f(b.upper), u(b.count), f(b.probability)]);
        }
        emit(&mut written, &format!("flow_hist_{}.csv", l.line), c.text);
        let limit = l.limit.map(f).unwrap_or_default();
        summary.row(&[
            u(l.line),
            u(l.from_bus),
            u(l.to_bus),
            limit,
            f(l.mean),
            f(l.std),
            u(l.modes),
            f(l.congestion_probability),
        ]);
        congestion.row(&[u(l.line), f(l.congestion_probability)]);
    }
    emit(&mut written, "flow_summary.csv", summary.text);
    emit(&mut written, "congestion.csv", congestion.text);

    let mut hist = Csv::new("generator,bus,lower,upper,count,probability");
    let mut gsum = Csv::new("generator,bus,mean,std");
    for g in &report.generators {
        for b in &g.histogram.bins {
            hist.row(&[u(g.generator), u(g.bus), f(b.lower), f(b.upper), u(b.count), f(b.probability)]);
        }
        gsum.row(&[u(g.generator), u(g.bus), f(g.mean), f(g.std)]);
    }
    emit(&mut written, "dispatch_hist.csv", hist.text);
    emit(&mut written, "dispatch_summary.csv", gsum.text);

    let mut slices = Csv::new("rank,count,share,active_set");
    let mut rflows = Csv::new("rank,line,mean,std");
    for (rank, s) in report.regions_at_time.iter().enumerate() {
        let set = s.active_set.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        slices.row(&[u(rank + 1), u(s.count), f(s.share), set]);
        for k in 0..s.flow_mean.len() {
            rflows.row(&[u(rank + 1), u(k + 1), f(s.flow_mean[k]), f(s.flow_std[k])]);
        }
    }
    emit(&mut written, "region_slices.csv", slices.text);
    emit(&mut written, "region_flows.csv", rflows.text);

    let mut curve = Csv::new("samples,direct_solves");
    for &(s, d) in &report.solve_curve {
        curve.row(&[u(s), u(d)]);
    }
    emit(&mut written, "solve_curve.csv", curve.text);

    let mut freq = Csv::new("rank,entry,hits,share,cumulative_share");
    for (rank, s) in report.region_frequency.shares.iter().enumerate() {
        freq.row(&[u(rank + 1), u(s.entry), u(s.hits), f(s.share), f(s.cumulative_share)]);
    }
    emit(&mut written, "region_freq.csv", freq.text);

    let mut sum = Csv::new("key,value");
    let solves = report.solve_curve.last().map_or(0, |&(_, d)| d);
    let samples = report.solve_curve.last().map_or(0, |&(s, _)| s);
    for (k, v) in [
        ("time", u(report.time)),
        ("records", u(report.records)),
        ("infeasible", u(report.infeasible)),
        ("samples", u(samples)),
        ("direct_solves", u(solves)),
        ("dictionary_entries", u(report.region_frequency.entry_count)),
        ("hit_rate", f(report.region_frequency.hit_rate)),
        ("k_covering_99", u(report.region_frequency.k_covering_99)),
    ] {
        sum.row(&[k.to_string(), v]);
    }
    emit(&mut written, "summary.csv", sum.text);
    Ok(written)
}

/// Raw per-record dump: `m,t,source,active_set,` then per-bus `lmp_<bus>`,
/// per-line `flow_<line>`, per-generator `g_<index>`.
pub fn records_csv(result: &RunResult, scenario: &Scenario) -> String {
    let net = &scenario.network;
    let mut header = String::from("m,t,source,active_set");
    for b in &net.buses {
        let _ = write!(header, ",lmp_{}", b.id);
    }
    for k in 0..net.n_branches() {
        let _ = write!(header, ",flow_{}", k + 1);
    }
    for i in 0..net.n_generators() {
        let _ = write!(header, ",g_{i}");
    }
    let mut c = Csv::new(&header);
    for r in &result.records {
        let mut cells = vec![
            u(r.m),
            u(r.t),
            format!("{:?}", r.source),
            r.active_set.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "),
        ];
        cells.extend(r.lmp.iter().chain(&r.flows).chain(&r.dispatch).map(|&v| f(v)));
        c.row(&cells);
    }
    c.text
}
