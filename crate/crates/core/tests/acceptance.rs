//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use odlsim::canonical::{build_energy_only, build_energy_reserve, CanonicalMpp, MarketKind, RowTag};
use odlsim::dictionary::Dictionary;
use odlsim::montecarlo::{init_dictionary, max_discrepancy, run_direct, run_odl, sample_net_load, RunResult, Scenario};
use odlsim::mpregion::{CriticalRegion, DualMap, RegionKind};
use odlsim::netcase::{build_ptdf, parse_case};
use odlsim::solver::{verify_kkt_parts, SolveStatus, Solver};
use odlsim::stats::build_report;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_odlsim")
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(&format!("preset:{name}")).unwrap_or_else(|e| panic!("preset {name}: {e}"))
}

struct Paired {
    scenario: Scenario,
    odl: RunResult,
    direct: RunResult,
    init_solves: u64,
    seconds: f64,
}

fn paired(name: &str) -> Paired {
    let scenario = scenario(name);
    let t0 = Instant::now();
    let (dict0, init) = init_dictionary(&scenario).expect("init");
    let odl = run_odl(&scenario, dict0, 4).expect("odl");
    let direct = run_direct(&scenario, 4).expect("direct");
    Paired { seconds: t0.elapsed().as_secs_f64(), init_solves: init.solves, scenario, odl, direct }
}

fn max_abs(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

fn equivalence(runs: &[&Paired]) -> Check {
    let mut notes = Vec::new();
    for p in runs {
        let n = p.odl.records.len();
        if n != p.scenario.runs() * p.scenario.horizon() || n != 24_000 {
            return Err(format!("{}: {n} records", p.scenario.config.case));
        }
        let d = max_discrepancy(&p.odl, &p.direct);
        if !(d <= 1e-7) {
            return Err(format!("{}: discrepancy {d:e}", p.scenario.config.case));
        }
        if p.seconds >= 60.0 {
            return Err(format!("{}: {:.1} s", p.scenario.config.case, p.seconds));
        }
        notes.push(format!("{} max diff {d:.1e} in {:.1} s", p.scenario.config.case, p.seconds));
    }
    Ok(notes.join("; "))
}

/// Solves used by a dictionary run, initialization included.
fn odl_solves(p: &Paired) -> u64 {
    p.init_solves + p.odl.counters.direct_solves
}

/// Checks every entry at 100 interior points against a fresh solve.
fn check_region_maps(p: &Paired, expect: RegionKind) -> Check {
    let mpp = &p.scenario.mpp;
    let mut solver = Solver::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut points = 0usize;
    let mut worst_primal = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut worst_dual = 0.0f64;
    for (i, region) in p.odl.dictionary.entries().iter().enumerate() {
        if region.kind != expect {
            return Err(format!("entry {i} has kind {:?}", region.kind));
        }
        let samples = region.sample_interior(&mut rng, 100, 10.0, 1e-6);
        if samples.len() < 100 {
            return Err(format!("entry {i}: only {} interior samples", samples.len()));
        }
        for theta in &samples {
            let (x, y_ineq, y_eq) = region.evaluate(theta).map_err(|e| format!("entry {i}: {e}"))?;
            let res = solver.solve(mpp, theta).map_err(|e| e.to_string())?;
            if !res.has_solution() {
                return Err(format!("entry {i}: direct solve {:?} inside region", res.status));
            }
            worst_primal = worst_primal.max(max_abs(&x, &res.x_star));
            if res.status == SolveStatus::Optimal && res.active_set != region.active_set {
                return Err(format!("entry {i}: active set changes inside the region"));
            }
            let kkt = verify_kkt_parts(mpp, theta, &x, &y_ineq, &y_eq);
            if !kkt.passes(1e-6) {
                return Err(format!("entry {i}: KKT residual {:e}", kkt.max_residual()));
            }
            worst_kkt = worst_kkt.max(kkt.max_residual());
            if let DualMap::Constant { y_ineq: y0, y_eq: e0 } = &region.dual_map {
                // unique duals only on nondegenerate solves
                if res.status == SolveStatus::Optimal {
                    worst_dual = worst_dual.max(max_abs(y0, &res.y_ineq)).max(max_abs(e0, &res.y_eq));
                }
            }
            points += 1;
        }
    }
    if worst_primal > 1e-7 {
        return Err(format!("primal differs by {worst_primal:e}"));
    }
    if worst_dual > 1e-6 {
        return Err(format!("duals vary by {worst_dual:e}"));
    }
    Ok(format!(
        "{} entries, {points} points, primal {worst_primal:.1e}, kkt {worst_kkt:.1e}, dual {worst_dual:.1e}",
        p.odl.dictionary.len()
    ))
}

fn criterion_1(tb: &Paired, ieee: &Paired) -> Check {
    equivalence(&[tb, ieee])
}

fn criterion_2(tb: &Paired, ieee: &Paired) -> Check {
    let a = odl_solves(ieee);
    let b = odl_solves(tb);
    if a as f64 > 0.05 * 24_000.0 {
        return Err(format!("ieee14-duck used {a} solves"));
    }
    if b > 10 {
        return Err(format!("twobus-boundary used {b} solves"));
    }
    Ok(format!("ieee14-duck {a} solves of 24000, twobus-boundary {b}"))
}

fn criterion_3(ieee: &Paired) -> Check {
    let stats = ieee.odl.dictionary.stats();
    let report = odlsim::stats::region_frequency(&ieee.odl);
    let monotone_hits = stats.hits_per_region.windows(2).all(|w| w[0].1 >= w[1].1);
    let monotone_share = report.shares.windows(2).all(|w| w[0].cumulative_share <= w[1].cumulative_share);
    let last = report.shares.last().map_or(0.0, |s| s.cumulative_share);
    if report.shares.len() != stats.entry_count || !monotone_hits || !monotone_share || (last - 1.0).abs() > 1e-12 {
        return Err("concentration report is not monotone".into());
    }
    // independent count of the smallest cover
    let total: u64 = stats.hits_per_region.iter().map(|h| h.1).sum();
    let mut hits: Vec<u64> = ieee.odl.dictionary.entries().iter().map(|r| r.hit_count).collect();
    hits.sort_unstable_by(|a, b| b.cmp(a));
    let mut k = 0;
    let mut acc = 0u64;
    while (acc as f64) < 0.99 * total as f64 {
        acc += hits[k];
        k += 1;
    }
    if k != stats.k_covering_99 {
        return Err(format!("k99 reported {} but counted {k}", stats.k_covering_99));
    }
    if k as f64 > 0.25 * stats.entry_count as f64 {
        return Err(format!("k99 = {k} of {} entries", stats.entry_count));
    }
    Ok(format!("k99 = {k} of {} entries", stats.entry_count))
}

fn criterion_4(tb: &Paired, ieee: &Paired) -> Check {
    let a = check_region_maps(tb, RegionKind::Mplp)?;
    let b = check_region_maps(ieee, RegionKind::Mplp)?;
    Ok(format!("twobus: {a}; ieee14: {b}"))
}

fn criterion_5(tb: &Paired, ieee: &Paired) -> Check {
    let eq = equivalence(&[tb, ieee])?;
    let a = check_region_maps(tb, RegionKind::Mpqp)?;
    let b = check_region_maps(ieee, RegionKind::Mpqp)?;
    // membership is the intersection of primal and dual feasibility
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut probes = [0usize; 2];
    for p in [tb, ieee] {
        for region in p.odl.dictionary.entries() {
            for _ in 0..200 {
                let step = DVector::from_fn(region.theta_dim(), |_, _| 10.0 * (rng.random::<f64>() - 0.5));
                let probe = &region.seed_theta + step;
                let inside = region.contains(&probe);
                let x = region.primal(&probe);
                let (y, _) = region.duals(&probe);
                let mpp = &p.scenario.mpp;
                let primal_ok = (&mpp.a_ineq * &x - mpp.rhs_ineq(&probe)).max() <= 1e-7;
                let dual_ok = y.min() >= -1e-7;
                if inside != (primal_ok && dual_ok) {
                    return Err("membership disagrees with primal and dual feasibility".into());
                }
                probes[usize::from(inside)] += 1;
            }
        }
    }
    Ok(format!("{eq}; twobus: {a}; ieee14: {b}; membership probes {} in, {} out", probes[1], probes[0]))
}

/// `lambda 1 - S' mu+ + S' mu-` assembled from the row tags.
fn lmp_oracle(mpp: &CanonicalMpp, y_ineq: &DVector<f64>, y_eq: &DVector<f64>) -> DVector<f64> {
    let balance = mpp.eq_tags.iter().position(|t| *t == RowTag::Balance).unwrap();
    let lambda = -y_eq[balance];
    let s = &mpp.ptdf;
    let mut pi = DVector::from_element(s.ncols(), lambda);
    for (r, tag) in mpp.ineq_tags.iter().enumerate() {
        let sign = match tag {
            RowTag::FlowUpper(_) => -1.0,
            RowTag::FlowLower(_) => 1.0,
            _ => continue,
        };
        let k = match tag {
            RowTag::FlowUpper(k) | RowTag::FlowLower(k) => *k,
            _ => unreachable!(),
        };
        for b in 0..s.ncols() {
            pi[b] += sign * s[(k, b)] * y_ineq[r];
        }
    }
    pi
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

fn criterion_6(suites: &[&Paired]) -> Check {
    let mut solver = Solver::new();
    let mut solves = 0usize;
    let mut worst = 0.0f64;
    for p in suites {
        let mpp = &p.scenario.mpp;
        for rec in &p.direct.records {
            let theta = DVector::from_column_slice(&rec.theta);
            let res = solver.solve(mpp, &theta).map_err(|e| e.to_string())?;
            if res.status != SolveStatus::Optimal {
                continue;
            }
            let oracle = lmp_oracle(mpp, &res.y_ineq, &res.y_eq);
            let reported = mpp.prices(&res.y_ineq, &res.y_eq).lmp;
            let recorded = DVector::from_column_slice(&rec.lmp);
            let mut e = rel_err(&reported, &oracle).max(rel_err(&recorded, &oracle));
            if mpp.market == MarketKind::EnergyOnly {
                e = e.max(rel_err(&mpp.load_sensitivity(&res.y_ineq, &res.y_eq), &oracle));
            }
            worst = worst.max(e);
            solves += 1;
        }
    }
    if worst > 1e-9 {
        return Err(format!("relative error {worst:e}"));
    }
    Ok(format!("{solves} optimal solves, worst relative error {worst:.1e}"))
}

fn criterion_7() -> Check {
    let read = |name: &str| {
        let text = std::fs::read_to_string(manifest_dir().join("data/cases").join(name)).unwrap();
        let net = parse_case(&text).unwrap();
        let s = build_ptdf(&net).unwrap();
        (net, s)
    };
    let (_, s2) = read("twobus.json");
    if s2 != DMatrix::from_row_slice(1, 2, &[0.0, -1.0]) {
        return Err(format!("two-bus S = {s2}"));
    }
    let (_, s3) = read("threebus.json");
    // withdrawal at bus 3 splits 2/3 on the direct line, 1/3 via bus 2
    let expect = [-1.0 / 3.0, -1.0 / 3.0, -2.0 / 3.0];
    for (k, e) in expect.iter().enumerate() {
        if (s3[(k, 2)] - e).abs() > 1e-9 {
            return Err(format!("three-bus S[{k},3] = {}", s3[(k, 2)]));
        }
    }
    let mut cases = 0;
    for entry in std::fs::read_dir(manifest_dir().join("data/cases")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        let (net, s) = read(&name);
        if s.column(net.slack()).iter().any(|&v| v != 0.0) {
            return Err(format!("{name}: slack column nonzero"));
        }
        cases += 1;
    }
    Ok(format!("exact two-bus, three-bus split, {cases} slack columns zero"))
}

fn criterion_8() -> Check {
    let mut notes = Vec::new();
    let crossing = paired_odl("ieee14-duck-crossing");
    let report = build_report(&crossing.1, &crossing.0, &crossing.0.config.report).map_err(|e| e.to_string())?;
    let atoms = report.joint.iter().map(|j| j.atoms.len()).max().unwrap_or(0);
    let modes = report.lines.iter().map(|l| l.modes).max().unwrap_or(0);
    if atoms < 2 || modes < 2 {
        return Err(format!("boundary interval: {atoms} joint atoms, {modes} flow modes"));
    }
    notes.push(format!("boundary interval {atoms} joint atoms, {modes} flow modes"));
    let steady = paired_odl("ieee14-duck-steady");
    let report = build_report(&steady.1, &steady.0, &steady.0.config.report).map_err(|e| e.to_string())?;
    if report.joint.is_empty() || report.joint.iter().any(|j| j.atoms.len() != 1) {
        return Err("steady interval is not a point mass".into());
    }
    notes.push("steady interval point mass".into());
    Ok(notes.join("; "))
}

fn paired_odl(name: &str) -> (Scenario, RunResult) {
    let s = scenario(name);
    let (d, _) = init_dictionary(&s).unwrap();
    let r = run_odl(&s, d, 4).unwrap();
    (s, r)
}

fn simulate(out: &Path, workers: usize) -> Result<(), String> {
    let status = Command::new(bin())
        .args(["simulate", "--config", "preset:ieee14-duck", "--workers", &workers.to_string(), "--out"])
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    Ok(())
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn criterion_9(tmp: &Path) -> Check {
    let dirs = [(tmp.join("w1a"), 1), (tmp.join("w1b"), 1), (tmp.join("w8"), 8)];
    for (d, w) in &dirs {
        simulate(d, *w)?;
    }
    let base = outputs(&dirs[0].0);
    if !base.keys().any(|k| k.ends_with(".csv")) {
        return Err("no CSV outputs".into());
    }
    for (d, _) in &dirs[1..] {
        let other = outputs(d);
        if other.keys().ne(base.keys()) {
            return Err(format!("{}: different file set", d.display()));
        }
        if let Some(name) = base.keys().find(|k| base[*k] != other[*k]) {
            return Err(format!("{name} differs in {}", d.display()));
        }
    }
    Ok(format!("{} files identical across 3 runs", base.len()))
}

fn bits(m: &DMatrix<f64>) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

fn same_region(a: &CriticalRegion, b: &CriticalRegion) -> bool {
    bits(&a.f_mat) == bits(&b.f_mat)
        && a.f_vec.iter().map(|v| v.to_bits()).eq(b.f_vec.iter().map(|v| v.to_bits()))
        && bits(&a.g) == bits(&b.g)
        && a.h.iter().map(|v| v.to_bits()).eq(b.h.iter().map(|v| v.to_bits()))
}

fn criterion_10(tmp: &Path, runs: &[(&str, &Paired)]) -> Check {
    let mut notes = Vec::new();
    for (name, p) in runs {
        let dict = &p.odl.dictionary;
        let path = tmp.join(format!("{name}.odld"));
        let mut buf = Vec::new();
        dict.save(&mut buf).map_err(|e| e.to_string())?;
        std::fs::write(&path, &buf).map_err(|e| e.to_string())?;
        let back = Dictionary::load(std::fs::File::open(&path).unwrap(), Some(p.scenario.mpp.fingerprint()))
            .map_err(|e| e.to_string())?;
        if back.len() != dict.len() || !dict.entries().iter().zip(back.entries()).all(|(a, b)| same_region(a, b)) {
            return Err(format!("{name}: round trip changed an entry"));
        }
        let out = Command::new(bin())
            .args(["dict", "verify"])
            .arg(&path)
            .args(["--config", &format!("preset:{name}")])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{name}: dict verify failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        notes.push(format!("{name} {} entries", dict.len()));
    }
    Ok(notes.join("; "))
}

fn criterion_11() -> Check {
    let s = scenario("ieee14-reserve");
    let spec = s.config.reserve_spec.clone().expect("reserve preset");
    let energy = build_energy_only(&s.network).map_err(|e| e.to_string())?;
    let mut zero_spec = spec.clone();
    for r in &mut zero_spec.system {
        r.requirement = 0.0;
    }
    let zero = build_energy_reserve(&s.network, &zero_spec).map_err(|e| e.to_string())?;
    let binding = &s.mpp;
    let ngen = s.network.n_generators();
    let nj = spec.types.len();
    let requirement = spec.system[0].requirement;

    let mut solver = Solver::new();
    let mut g_path = vec![s.initial_dispatch.clone()];
    for t in 1..=s.horizon() {
        let theta = s.theta(&s.mean_net_load(t), g_path.last().unwrap());
        let res = solver.solve(&energy, &theta).map_err(|e| e.to_string())?;
        g_path.push(energy.dispatch(&res.x_star).into_owned());
    }
    let (mut worst_zero, mut worst_req, mut compared) = (0.0f64, 0.0f64, 0);
    for k in 0..100 {
        let t = 1 + k % s.horizon();
        let d = sample_net_load(&s, k / s.horizon(), t);
        let theta = s.theta(&d, &g_path[t - 1]);
        let a = solver.solve(&energy, &theta).map_err(|e| e.to_string())?;
        let b = solver.solve(&zero, &theta).map_err(|e| e.to_string())?;
        if !a.has_solution() || !b.has_solution() {
            continue;
        }
        compared += 1;
        worst_zero = worst_zero.max(max_abs(&energy.dispatch(&a.x_star).into_owned(), &zero.dispatch(&b.x_star).into_owned()));
        let c = solver.solve(binding, &theta).map_err(|e| e.to_string())?;
        if !c.has_solution() {
            return Err(format!("sample {k}: reserve market {:?}", c.status));
        }
        let procured: f64 = (0..ngen * nj).map(|i| c.x_star[ngen + i]).sum();
        let deficit = c.x_star[binding.n_vars - 1];
        if deficit.abs() < 1e-9 {
            worst_req = worst_req.max((procured - requirement).abs());
        } else {
            return Err(format!("sample {k}: requirement short by {deficit}"));
        }
    }
    if compared < 100 {
        return Err(format!("only {compared} feasible samples"));
    }
    if worst_zero > 1e-7 || worst_req > 1e-7 {
        return Err(format!("dispatch gap {worst_zero:e}, requirement gap {worst_req:e}"));
    }
    Ok(format!("{compared} samples, dispatch gap {worst_zero:.1e}, requirement gap {worst_req:.1e}"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let tb = paired("twobus-boundary");
    let ieee = paired("ieee14-duck");
    let tbq = paired("twobus-boundary-quadratic");
    let ieeeq = paired("ieee14-duck-quadratic");
    let reserve = paired("ieee14-reserve");

    let results: Vec<(usize, &str, Check)> = vec![
        (1, "oracle equivalence", criterion_1(&tb, &ieee)),
        (2, "solve economy", criterion_2(&tb, &ieee)),
        (3, "region concentration", criterion_3(&ieee)),
        (4, "region maps match direct solves", criterion_4(&tb, &ieee)),
        (5, "quadratic regions", criterion_5(&tbq, &ieeeq)),
        (6, "LMP identity", criterion_6(&[&tb, &ieee, &tbq, &ieeeq, &reserve])),
        (7, "shift factors", criterion_7()),
        (8, "multi-modality", criterion_8()),
        (9, "determinism", criterion_9(tmp.path())),
        (10, "dictionary persistence", criterion_10(tmp.path(), &[("twobus-boundary", &tb), ("ieee14-duck", &ieee)])),
        (11, "energy-reserve market", criterion_11()),
    ];
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail})");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
