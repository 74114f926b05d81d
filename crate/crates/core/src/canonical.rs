//! Market clearing problems in right-hand-side multiparametric form.
//!
//! Every market is written as
//!
//! ```text
//!   minimize   z(x)
//!   subject to A_ineq x <= b_ineq + E_ineq theta     (y_ineq >= 0)
//!              A_eq   x  = b_eq   + E_eq   theta     (y_eq free)
//! ```
//!
//! with `theta = (d, g_prev)`: the per-bus net load followed by the
//! previous-interval dispatch of each generator. Only right-hand sides move
//! with `theta`; the `A` matrices are fixed at build time.
//!
//! Dual sign convention: the Lagrangian is
//! `z(x) + y_ineq'(A_ineq x - b_ineq - E_ineq theta) + y_eq'(A_eq x - b_eq - E_eq theta)`,
//! so stationarity reads `grad z(x) + A_ineq' y_ineq + A_eq' y_eq = 0`. The
//! balance price is `lambda = -y_eq[balance]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netcase::{build_ptdf, CaseError, Network};

#[derive(Debug, Error)]
pub enum FormulationError {
    #[error("generator costs mix linear and quadratic terms")]
    MixedCosts,
    #[error("energy-reserve co-optimization requires linear costs")]
    QuadraticReserve,
    #[error("inconsistent reserve data: {0}")]
    Reserve(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("negative dual multiplier on line {0}")]
    NegativeDual(usize),
    #[error("injections not balanced: mismatch {0} MW")]
    Balance(f64),
    #[error(transparent)]
    Case(#[from] CaseError),
}

/// Label carried by every constraint row. Indices are 0-based internal ids
/// (branch, generator, requirement).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowTag {
    Balance,
    FlowUpper(usize),
    FlowLower(usize),
    GenUpper(usize),
    GenLower(usize),
    RampUp(usize),
    RampDown(usize),
    ReserveLocal(usize),
    ReserveSystem(usize),
    ReserveUpper { generator: usize, kind: usize },
    ReserveLower { generator: usize, kind: usize },
    DeficitLocal(usize),
    DeficitSystem(usize),
}

impl RowTag {
    fn code(&self) -> [u64; 3] {
        match *self {
            RowTag::Balance => [0, 0, 0],
            RowTag::FlowUpper(k) => [1, k as u64, 0],
            RowTag::FlowLower(k) => [2, k as u64, 0],
            RowTag::GenUpper(i) => [3, i as u64, 0],
            RowTag::GenLower(i) => [4, i as u64, 0],
            RowTag::RampUp(i) => [5, i as u64, 0],
            RowTag::RampDown(i) => [6, i as u64, 0],
            RowTag::ReserveLocal(u) => [7, u as u64, 0],
            RowTag::ReserveSystem(v) => [8, v as u64, 0],
            RowTag::ReserveUpper { generator, kind } => [9, generator as u64, kind as u64],
            RowTag::ReserveLower { generator, kind } => [10, generator as u64, kind as u64],
            RowTag::DeficitLocal(u) => [11, u as u64, 0],
            RowTag::DeficitSystem(v) => [12, v as u64, 0],
        }
    }

    pub fn is_ramp(&self) -> bool {
        matches!(self, RowTag::RampUp(_) | RowTag::RampDown(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cost {
    Linear(DVector<f64>),
    /// `1/2 x'Hx + c'x` with `H` symmetric positive definite.
    Quadratic { h: DMatrix<f64>, c: DVector<f64> },
}

impl Cost {
    pub fn linear_term(&self) -> &DVector<f64> {
        match self {
            Cost::Linear(c) => c,
            Cost::Quadratic { c, .. } => c,
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            Cost::Linear(c) => c.dot(x),
            Cost::Quadratic { h, c } => 0.5 * x.dot(&(h * x)) + c.dot(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Cost::Linear(c) => c.clone(),
            Cost::Quadratic { h, c } => h * x + c,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Cost::Quadratic { .. })
    }
}

/// Slices of `theta`: net load per bus first, then previous dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub n_load: usize,
    pub n_prev: usize,
}

impl ThetaLayout {
    pub fn dim(&self) -> usize {
        self.n_load + self.n_prev
    }

    pub fn load_range(&self) -> std::ops::Range<usize> {
        0..self.n_load
    }

    pub fn prev_range(&self) -> std::ops::Range<usize> {
        self.n_load..self.n_load + self.n_prev
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarketKind {
    EnergyOnly,
    EnergyReserve,
}

/// Parameter value `theta = (d, g_prev)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPoint {
    pub d: Vec<f64>,
    pub g_prev: Vec<f64>,
}

impl ParameterPoint {
    pub fn to_theta(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.d.len() + self.g_prev.len(),
            self.d.iter().chain(&self.g_prev).copied(),
        )
    }

    pub fn from_theta(theta: &DVector<f64>, layout: ThetaLayout) -> Self {
        ParameterPoint {
            d: theta.rows(0, layout.n_load).iter().copied().collect(),
            g_prev: theta.rows(layout.n_load, layout.n_prev).iter().copied().collect(),
        }
    }
}

/// A right-hand-side multiparametric program built from a market.
#[derive(Debug, Clone)]
pub struct CanonicalMpp {
    pub n_vars: usize,
    pub cost: Cost,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub e_ineq: DMatrix<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub e_eq: DMatrix<f64>,
    pub ineq_tags: Vec<RowTag>,
    pub eq_tags: Vec<RowTag>,
    pub layout: ThetaLayout,
    pub market: MarketKind,
    /// Shift factors, branches x buses.
    pub ptdf: DMatrix<f64>,
    /// Bus index of each generator; the first `gen_buses.len()` variables are dispatch.
    pub gen_buses: Vec<usize>,
}

impl CanonicalMpp {
    pub fn n_ineq(&self) -> usize {
        self.a_ineq.nrows()
    }

    pub fn n_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn n_generators(&self) -> usize {
        self.gen_buses.len()
    }

    pub fn n_buses(&self) -> usize {
        self.ptdf.ncols()
    }

    pub fn n_branches(&self) -> usize {
        self.ptdf.nrows()
    }

    pub fn is_quadratic(&self) -> bool {
        self.cost.is_quadratic()
    }

    /// `b_ineq + E_ineq theta`.
    pub fn rhs_ineq(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.b_ineq + &self.e_ineq * theta
    }

    pub fn rhs_eq(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.b_eq + &self.e_eq * theta
    }

    pub fn dispatch<'a>(&self, x: &'a DVector<f64>) -> nalgebra::DVectorView<'a, f64> {
        x.rows(0, self.n_generators())
    }

    /// Per-bus generation from the decision vector.
    pub fn injections(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_buses());
        for (j, &bus) in self.gen_buses.iter().enumerate() {
            g[bus] += x[j];
        }
        g
    }

    /// Line flows for decision `x` at net load `d`.
    pub fn line_flows(&self, x: &DVector<f64>, d: &[f64]) -> DVector<f64> {
        let g = self.injections(x);
        let net = DVector::from_iterator(d.len(), g.iter().zip(d).map(|(g, d)| g - d));
        &self.ptdf * net
    }

    pub fn ineq_row_of(&self, tag: RowTag) -> Option<usize> {
        self.ineq_tags.iter().position(|&t| t == tag)
    }

    fn balance_row(&self) -> usize {
        self.eq_tags
            .iter()
            .position(|&t| t == RowTag::Balance)
            .expect("every market has a balance row")
    }

    /// Energy and congestion prices read from solver duals.
    pub fn prices(&self, y_ineq: &DVector<f64>, y_eq: &DVector<f64>) -> PriceVector {
        let lambda = -y_eq[self.balance_row()];
        let nb = self.n_branches();
        let mut mu_plus = DVector::zeros(nb);
        let mut mu_minus = DVector::zeros(nb);
        for (r, tag) in self.ineq_tags.iter().enumerate() {
            match *tag {
                RowTag::FlowUpper(k) => mu_plus[k] = y_ineq[r],
                RowTag::FlowLower(k) => mu_minus[k] = y_ineq[r],
                _ => {}
            }
        }
        let lmp = lmp_formula(lambda, &mu_plus, &mu_minus, &self.ptdf);
        PriceVector {
            lmp,
            lambda,
            mu_plus,
            mu_minus,
        }
    }

    /// Sensitivity of the optimal cost to each bus load, `-E_d' y`.
    /// For the energy-only market this is an independent route to the LMP.
    pub fn load_sensitivity(&self, y_ineq: &DVector<f64>, y_eq: &DVector<f64>) -> DVector<f64> {
        let n = self.layout.n_load;
        let e_in = self.e_ineq.columns(0, n);
        let e_eq = self.e_eq.columns(0, n);
        -(e_in.transpose() * y_ineq + e_eq.transpose() * y_eq)
    }

    /// A copy with every row carrying one of `tags` removed.
    pub fn without_rows(&self, drop: impl Fn(&RowTag) -> bool) -> CanonicalMpp {
        let keep: Vec<usize> = (0..self.n_ineq()).filter(|&r| !drop(&self.ineq_tags[r])).collect();
        let mut out = self.clone();
        out.a_ineq = self.a_ineq.select_rows(&keep);
        out.b_ineq = self.b_ineq.select_rows(&keep);
        out.e_ineq = self.e_ineq.select_rows(&keep);
        out.ineq_tags = keep.iter().map(|&r| self.ineq_tags[r]).collect();
        out
    }

    /// Hash of the problem structure; dictionaries are bound to it.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        let mut put_f = |h: &mut Sha256, v: f64| h.update(v.to_bits().to_le_bytes());
        let put_m = |h: &mut Sha256, m: &DMatrix<f64>, put: &mut dyn FnMut(&mut Sha256, f64)| {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                put(h, *v);
            }
        };
        hasher.update(b"odlsim-mpp-v1");
        hasher.update((self.n_vars as u64).to_le_bytes());
        hasher.update((self.layout.n_load as u64).to_le_bytes());
        hasher.update((self.layout.n_prev as u64).to_le_bytes());
        match &self.cost {
            Cost::Linear(c) => {
                hasher.update([0u8]);
                for v in c.iter() {
                    put_f(&mut hasher, *v);
                }
            }
            Cost::Quadratic { h, c } => {
                hasher.update([1u8]);
                put_m(&mut hasher, h, &mut put_f);
                for v in c.iter() {
                    put_f(&mut hasher, *v);
                }
            }
        }
        for m in [&self.a_ineq, &self.e_ineq, &self.a_eq, &self.e_eq, &self.ptdf] {
            put_m(&mut hasher, m, &mut put_f);
        }
        for v in self.b_ineq.iter().chain(self.b_eq.iter()) {
            put_f(&mut hasher, *v);
        }
        for tag in self.ineq_tags.iter().chain(&self.eq_tags) {
            for w in tag.code() {
                hasher.update(w.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

/// Per-bus LMPs with their energy and congestion components.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceVector {
    pub lmp: DVector<f64>,
    pub lambda: f64,
    pub mu_plus: DVector<f64>,
    pub mu_minus: DVector<f64>,
}

impl PriceVector {
    /// Lines on which both directions carry a positive multiplier.
    pub fn conflicting_lines(&self) -> Vec<usize> {
        (0..self.mu_plus.len())
            .filter(|&k| self.mu_plus[k] > 0.0 && self.mu_minus[k] > 0.0)
            .collect()
    }
}

fn lmp_formula(
    lambda: f64,
    mu_plus: &DVector<f64>,
    mu_minus: &DVector<f64>,
    s: &DMatrix<f64>,
) -> DVector<f64> {
    let congestion = s.tr_mul(&(mu_minus - mu_plus));
    congestion.add_scalar(lambda)
}

/// `pi = lambda 1 - S' mu_plus + S' mu_minus`.
pub fn lmp_from_duals(
    lambda: f64,
    mu_plus: &DVector<f64>,
    mu_minus: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Result<PriceVector, FormulationError> {
    if mu_plus.len() != s.nrows() || mu_minus.len() != s.nrows() {
        return Err(FormulationError::Dimension(format!(
            "{} lines in S, {} / {} multipliers",
            s.nrows(),
            mu_plus.len(),
            mu_minus.len()
        )));
    }
    if let Some(k) = (0..mu_plus.len()).find(|&k| mu_plus[k] < 0.0 || mu_minus[k] < 0.0) {
        return Err(FormulationError::NegativeDual(k));
    }
    Ok(PriceVector {
        lmp: lmp_formula(lambda, mu_plus, mu_minus, s),
        lambda,
        mu_plus: mu_plus.clone(),
        mu_minus: mu_minus.clone(),
    })
}

/// Line flows `S (g - d)` for per-bus generation `g` and net load `d`.
pub fn flows(g: &[f64], d: &[f64], s: &DMatrix<f64>) -> Result<DVector<f64>, FormulationError> {
    if g.len() != s.ncols() || d.len() != s.ncols() {
        return Err(FormulationError::Dimension(format!(
            "{} buses in S, got g {} and d {}",
            s.ncols(),
            g.len(),
            d.len()
        )));
    }
    let mismatch: f64 = g.iter().sum::<f64>() - d.iter().sum::<f64>();
    let total: f64 = d.iter().sum::<f64>().abs();
    if mismatch.abs() > 1e-6 * total.max(1e-3) {
        return Err(FormulationError::Balance(mismatch));
    }
    let p = DVector::from_iterator(g.len(), g.iter().zip(d).map(|(g, d)| g - d));
    Ok(s * p)
}

struct RowBuilder {
    n_vars: usize,
    n_theta: usize,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    e: Vec<Vec<f64>>,
    tags: Vec<RowTag>,
}

impl RowBuilder {
    fn new(n_vars: usize, n_theta: usize) -> Self {
        RowBuilder {
            n_vars,
            n_theta,
            a: Vec::new(),
            b: Vec::new(),
            e: Vec::new(),
            tags: Vec::new(),
        }
    }

    fn push(&mut self, tag: RowTag, a: Vec<f64>, b: f64, e: Vec<f64>) {
        debug_assert_eq!(a.len(), self.n_vars);
        debug_assert_eq!(e.len(), self.n_theta);
        self.a.push(a);
        self.b.push(b);
        self.e.push(e);
        self.tags.push(tag);
    }

    fn finish(self) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, Vec<RowTag>) {
        let m = self.b.len();
        let a = DMatrix::from_fn(m, self.n_vars, |r, c| self.a[r][c]);
        let e = DMatrix::from_fn(m, self.n_theta, |r, c| self.e[r][c]);
        (a, DVector::from_vec(self.b), e, self.tags)
    }
}

fn classify_cost(net: &Network) -> Result<bool, FormulationError> {
    let quad = net.generators.iter().filter(|g| g.cost_quadratic > 0.0).count();
    match quad {
        0 => Ok(false),
        q if q == net.n_generators() => Ok(true),
        _ => Err(FormulationError::MixedCosts),
    }
}

/// Five row families shared by both markets: balance, flow limits,
/// generator bounds, and ramp limits. `n_extra` trailing variables are
/// left out of all of them; `headroom(i)` lists extra variables that share
/// generator `i`'s upper capacity.
struct EnergyRows {
    ineq: RowBuilder,
    eq: RowBuilder,
}

fn energy_rows(
    net: &Network,
    s: &DMatrix<f64>,
    n_vars: usize,
    headroom: impl Fn(usize) -> Vec<usize>,
) -> EnergyRows {
    let nbus = net.n_buses();
    let ngen = net.n_generators();
    let n_theta = nbus + ngen;
    let mut ineq = RowBuilder::new(n_vars, n_theta);
    let mut eq = RowBuilder::new(n_vars, n_theta);

    // 1'(g - d) = 0
    let mut a = vec![0.0; n_vars];
    a[..ngen].iter_mut().for_each(|v| *v = 1.0);
    let mut e = vec![0.0; n_theta];
    e[..nbus].iter_mut().for_each(|v| *v = 1.0);
    eq.push(RowTag::Balance, a, 0.0, e);

    let limited = net.limited_branches();
    for sign in [1.0, -1.0] {
        for &k in &limited {
            let limit = net.branches[k].flow_limit.expect("limited branch");
            let mut a = vec![0.0; n_vars];
            for (j, g) in net.generators.iter().enumerate() {
                a[j] = sign * s[(k, g.bus)];
            }
            let mut e = vec![0.0; n_theta];
            for i in 0..nbus {
                e[i] = sign * s[(k, i)];
            }
            let tag = if sign > 0.0 { RowTag::FlowUpper(k) } else { RowTag::FlowLower(k) };
            ineq.push(tag, a, limit, e);
        }
    }

    for (j, g) in net.generators.iter().enumerate() {
        let mut a = vec![0.0; n_vars];
        a[j] = 1.0;
        for extra in headroom(j) {
            a[extra] = 1.0;
        }
        ineq.push(RowTag::GenUpper(j), a, g.p_max, vec![0.0; n_theta]);
    }
    for (j, g) in net.generators.iter().enumerate() {
        let mut a = vec![0.0; n_vars];
        a[j] = -1.0;
        ineq.push(RowTag::GenLower(j), a, -g.p_min, vec![0.0; n_theta]);
    }
    for (j, g) in net.generators.iter().enumerate() {
        let mut a = vec![0.0; n_vars];
        a[j] = 1.0;
        let mut e = vec![0.0; n_theta];
        e[nbus + j] = 1.0;
        ineq.push(RowTag::RampUp(j), a, g.ramp_up, e);
    }
    for (j, g) in net.generators.iter().enumerate() {
        let mut a = vec![0.0; n_vars];
        a[j] = -1.0;
        let mut e = vec![0.0; n_theta];
        e[nbus + j] = -1.0;
        ineq.push(RowTag::RampDown(j), a, g.ramp_down, e);
    }
    EnergyRows { ineq, eq }
}

/// Energy-only real-time dispatch: decision `x = g`, one entry per generator.
pub fn build_energy_only(net: &Network) -> Result<CanonicalMpp, FormulationError> {
    let quadratic = classify_cost(net)?;
    let s = build_ptdf(net)?;
    let ngen = net.n_generators();
    let rows = energy_rows(net, &s, ngen, |_| Vec::new());
    let (a_ineq, b_ineq, e_ineq, ineq_tags) = rows.ineq.finish();
    let (a_eq, b_eq, e_eq, eq_tags) = rows.eq.finish();

    let c = DVector::from_iterator(ngen, net.generators.iter().map(|g| g.cost_linear));
    let cost = if quadratic {
        let h = DMatrix::from_diagonal(&DVector::from_iterator(
            ngen,
            net.generators.iter().map(|g| 2.0 * g.cost_quadratic),
        ));
        Cost::Quadratic { h, c }
    } else {
        Cost::Linear(c)
    };

    Ok(CanonicalMpp {
        n_vars: ngen,
        cost,
        a_ineq,
        b_ineq,
        e_ineq,
        a_eq,
        b_eq,
        e_eq,
        ineq_tags,
        eq_tags,
        layout: ThetaLayout {
            n_load: net.n_buses(),
            n_prev: ngen,
        },
        market: MarketKind::EnergyOnly,
        ptdf: s,
        gen_buses: net.generators.iter().map(|g| g.bus).collect(),
    })
}

fn default_membership() -> Option<Vec<Vec<f64>>> {
    None
}

/// System-wide reserve requirement `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemRequirement {
    pub requirement: f64,
    pub penalty: f64,
    /// generators x reserve types, 1 where the product counts; all ones when absent.
    #[serde(default = "default_membership")]
    pub delta: Option<Vec<Vec<f64>>>,
}

/// Locational reserve requirement `u` behind an interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalRequirement {
    pub requirement: f64,
    pub penalty: f64,
    #[serde(default = "default_membership")]
    pub delta: Option<Vec<Vec<f64>>>,
    /// 1-based branch numbers forming the interface.
    pub interface: Vec<usize>,
    pub interface_limit: f64,
}

/// Reserve products and requirements for co-optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReserveSpec {
    pub types: Vec<String>,
    /// generators x types, $/MW.
    pub cost: Vec<Vec<f64>>,
    /// generators x types, MW.
    pub cap: Vec<Vec<f64>>,
    #[serde(default)]
    pub system: Vec<SystemRequirement>,
    #[serde(default)]
    pub locational: Vec<LocalRequirement>,
}

fn check_table(name: &str, t: &[Vec<f64>], rows: usize, cols: usize) -> Result<(), FormulationError> {
    if t.len() != rows || t.iter().any(|r| r.len() != cols) {
        return Err(FormulationError::Reserve(format!(
            "{name} must be {rows} x {cols}"
        )));
    }
    if t.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FormulationError::Reserve(format!("{name} has non-finite entries")));
    }
    Ok(())
}

/// Joint energy and reserve co-optimization.
///
/// Decision vector `x = (g, r, s_local, s_system)` with `r` stored
/// generator-major (`r[i * types + j]`).
pub fn build_energy_reserve(net: &Network, spec: &ReserveSpec) -> Result<CanonicalMpp, FormulationError> {
    if classify_cost(net)? {
        return Err(FormulationError::QuadraticReserve);
    }
    let s = build_ptdf(net)?;
    let ngen = net.n_generators();
    let nbus = net.n_buses();
    let nj = spec.types.len();
    let nu = spec.locational.len();
    let nv = spec.system.len();
    if nj == 0 {
        return Err(FormulationError::Reserve("no reserve types".into()));
    }
    check_table("cost", &spec.cost, ngen, nj)?;
    check_table("cap", &spec.cap, ngen, nj)?;
    if spec.cap.iter().flatten().any(|&v| v < 0.0) {
        return Err(FormulationError::Reserve("negative reserve capacity".into()));
    }
    let max_reserve_cost = spec.cost.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let mut deltas_sys = Vec::with_capacity(nv);
    for (v, req) in spec.system.iter().enumerate() {
        if req.requirement < 0.0 {
            return Err(FormulationError::Reserve(format!("system requirement {} is negative", v + 1)));
        }
        if req.penalty <= max_reserve_cost {
            return Err(FormulationError::Reserve(format!(
                "system requirement {} penalty must exceed every reserve cost",
                v + 1
            )));
        }
        let delta = req.delta.clone().unwrap_or_else(|| vec![vec![1.0; nj]; ngen]);
        check_table(&format!("system[{}].delta", v + 1), &delta, ngen, nj)?;
        deltas_sys.push(delta);
    }
    let mut deltas_loc = Vec::with_capacity(nu);
    for (u, req) in spec.locational.iter().enumerate() {
        if req.requirement < 0.0 || req.interface_limit < 0.0 {
            return Err(FormulationError::Reserve(format!(
                "locational requirement {} has a negative requirement or limit",
                u + 1
            )));
        }
        if req.penalty <= max_reserve_cost {
            return Err(FormulationError::Reserve(format!(
                "locational requirement {} penalty must exceed every reserve cost",
                u + 1
            )));
        }
        if let Some(&k) = req.interface.iter().find(|&&k| k == 0 || k > net.n_branches()) {
            return Err(FormulationError::Reserve(format!(
                "locational requirement {} references branch {k}",
                u + 1
            )));
        }
        let delta = req.delta.clone().unwrap_or_else(|| vec![vec![1.0; nj]; ngen]);
        check_table(&format!("locational[{}].delta", u + 1), &delta, ngen, nj)?;
        deltas_loc.push(delta);
    }

    let r_off = ngen;
    let sl_off = r_off + ngen * nj;
    let ss_off = sl_off + nu;
    let n_vars = ss_off + nv;
    let n_theta = nbus + ngen;
    let rvar = |i: usize, j: usize| r_off + i * nj + j;

    let EnergyRows { mut ineq, eq } =
        energy_rows(net, &s, n_vars, |i| (0..nj).map(|j| rvar(i, j)).collect());

    // sum delta r + (I+ - I) + s >= Q   <=>   -sum delta r + I - s <= I+ - Q
    for (u, req) in spec.locational.iter().enumerate() {
        let mut a = vec![0.0; n_vars];
        let mut e = vec![0.0; n_theta];
        for (i, g) in net.generators.iter().enumerate() {
            for j in 0..nj {
                a[rvar(i, j)] = -deltas_loc[u][i][j];
            }
            a[i] = req.interface.iter().map(|&k| s[(k - 1, g.bus)]).sum();
        }
        for (b, eb) in e.iter_mut().take(nbus).enumerate() {
            *eb = req.interface.iter().map(|&k| s[(k - 1, b)]).sum();
        }
        a[sl_off + u] = -1.0;
        ineq.push(RowTag::ReserveLocal(u), a, req.interface_limit - req.requirement, e);
    }
    for (v, req) in spec.system.iter().enumerate() {
        let mut a = vec![0.0; n_vars];
        for i in 0..ngen {
            for j in 0..nj {
                a[rvar(i, j)] = -deltas_sys[v][i][j];
            }
        }
        a[ss_off + v] = -1.0;
        ineq.push(RowTag::ReserveSystem(v), a, -req.requirement, vec![0.0; n_theta]);
    }
    for i in 0..ngen {
        for j in 0..nj {
            let mut a = vec![0.0; n_vars];
            a[rvar(i, j)] = 1.0;
            ineq.push(RowTag::ReserveUpper { generator: i, kind: j }, a, spec.cap[i][j], vec![0.0; n_theta]);
        }
    }
    for i in 0..ngen {
        for j in 0..nj {
            let mut a = vec![0.0; n_vars];
            a[rvar(i, j)] = -1.0;
            ineq.push(RowTag::ReserveLower { generator: i, kind: j }, a, 0.0, vec![0.0; n_theta]);
        }
    }
    for u in 0..nu {
        let mut a = vec![0.0; n_vars];
        a[sl_off + u] = -1.0;
        ineq.push(RowTag::DeficitLocal(u), a, 0.0, vec![0.0; n_theta]);
    }
    for v in 0..nv {
        let mut a = vec![0.0; n_vars];
        a[ss_off + v] = -1.0;
        ineq.push(RowTag::DeficitSystem(v), a, 0.0, vec![0.0; n_theta]);
    }

    let mut c = vec![0.0; n_vars];
    for (i, g) in net.generators.iter().enumerate() {
        c[i] = g.cost_linear;
        for j in 0..nj {
            c[rvar(i, j)] = spec.cost[i][j];
        }
    }
    for (u, req) in spec.locational.iter().enumerate() {
        c[sl_off + u] = req.penalty;
    }
    for (v, req) in spec.system.iter().enumerate() {
        c[ss_off + v] = req.penalty;
    }

    let (a_ineq, b_ineq, e_ineq, ineq_tags) = ineq.finish();
    let (a_eq, b_eq, e_eq, eq_tags) = eq.finish();
    Ok(CanonicalMpp {
        n_vars,
        cost: Cost::Linear(DVector::from_vec(c)),
        a_ineq,
        b_ineq,
        e_ineq,
        a_eq,
        b_eq,
        e_eq,
        ineq_tags,
        eq_tags,
        layout: ThetaLayout {
            n_load: nbus,
            n_prev: ngen,
        },
        market: MarketKind::EnergyReserve,
        ptdf: s,
        gen_buses: net.generators.iter().map(|g| g.bus).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcase::parse_case;

    fn two_bus(c2: f64) -> Network {
        parse_case(&format!(
            r#"{{
            "base_mva": 100,
            "buses": [{{"id": 1, "slack": true}}, {{"id": 2, "load_mean": 60}}],
            "branches": [{{"from": 1, "to": 2, "x": 0.1, "limit": 50}}],
            "generators": [
                {{"bus": 1, "c1": 10, "c2": {c2}, "pmin": 0, "pmax": 100, "ramp_up": 100, "ramp_down": 100}},
                {{"bus": 2, "c1": 30, "c2": {c2}, "pmin": 0, "pmax": 100, "ramp_up": 100, "ramp_down": 100}}
            ]
        }}"#
        ))
        .unwrap()
    }

    #[test]
    fn two_bus_row_counts() {
        let mpp = build_energy_only(&two_bus(0.0)).unwrap();
        assert_eq!(mpp.n_vars, 2);
        assert_eq!(mpp.n_eq(), 1);
        assert_eq!(mpp.n_ineq(), 2 + 4 * 2);
        let count = |f: fn(&RowTag) -> bool| mpp.ineq_tags.iter().filter(|t| f(t)).count();
        assert_eq!(count(|t| matches!(t, RowTag::FlowUpper(_))), 1);
        assert_eq!(count(|t| matches!(t, RowTag::FlowLower(_))), 1);
        assert_eq!(count(|t| matches!(t, RowTag::GenUpper(_) | RowTag::GenLower(_))), 4);
        assert_eq!(count(|t| t.is_ramp()), 4);
        assert!(!mpp.is_quadratic());
    }

    #[test]
    fn quadratic_cost_expands_to_generator_costs() {
        let mpp = build_energy_only(&two_bus(0.05)).unwrap();
        let x = DVector::from_vec(vec![37.0, 11.5]);
        let expected: f64 = [(37.0, 10.0), (11.5, 30.0)]
            .iter()
            .map(|&(g, c1)| 0.05 * g * g + c1 * g)
            .sum();
        assert!((mpp.cost.value(&x) - expected).abs() < 1e-12);
    }

    #[test]
    fn mixed_costs_rejected() {
        let text = two_bus(0.0).render().replacen(r#""c2": 0.0"#, r#""c2": 0.1"#, 1);
        let net = parse_case(&text).unwrap();
        assert!(matches!(build_energy_only(&net), Err(FormulationError::MixedCosts)));
    }

    #[test]
    fn uniform_price_without_congestion() {
        let s = DMatrix::from_row_slice(1, 2, &[0.0, -1.0]);
        let z = DVector::zeros(1);
        let p = lmp_from_duals(30.0, &z, &z, &s).unwrap();
        assert_eq!(p.lmp.as_slice(), &[30.0, 30.0]);
    }

    #[test]
    fn congested_two_bus_prices() {
        let s = DMatrix::from_row_slice(1, 2, &[0.0, -1.0]);
        let p = lmp_from_duals(10.0, &DVector::from_vec(vec![20.0]), &DVector::zeros(1), &s).unwrap();
        assert_eq!(p.lmp.as_slice(), &[10.0, 30.0]);
    }

    #[test]
    fn opposing_multipliers_cancel_and_are_flagged() {
        let s = DMatrix::from_row_slice(1, 2, &[0.0, -1.0]);
        let v = DVector::from_vec(vec![5.0]);
        let p = lmp_from_duals(12.0, &v, &v, &s).unwrap();
        assert_eq!(p.lmp.as_slice(), &[12.0, 12.0]);
        assert_eq!(p.conflicting_lines(), vec![0]);
        assert!(lmp_from_duals(12.0, &DVector::from_vec(vec![-1.0]), &v, &s).is_err());
        assert!(matches!(
            lmp_from_duals(12.0, &DVector::zeros(2), &v, &s),
            Err(FormulationError::Dimension(_))
        ));
    }

    #[test]
    fn flow_sign_convention() {
        let s = DMatrix::from_row_slice(1, 2, &[0.0, -1.0]);
        let f = flows(&[60.0, 0.0], &[0.0, 60.0], &s).unwrap();
        assert_eq!(f[0], 60.0);
        let zero = flows(&[10.0, 50.0], &[10.0, 50.0], &s).unwrap();
        assert_eq!(zero[0], 0.0);
        assert!(matches!(flows(&[61.0, 0.0], &[0.0, 60.0], &s), Err(FormulationError::Balance(_))));
    }

    #[test]
    fn energy_only_rhs_moves_with_theta_only() {
        let mpp = build_energy_only(&two_bus(0.0)).unwrap();
        let t1 = ParameterPoint { d: vec![0.0, 40.0], g_prev: vec![30.0, 5.0] }.to_theta();
        let t2 = ParameterPoint { d: vec![1.0, 55.0], g_prev: vec![10.0, 0.0] }.to_theta();
        let diff = mpp.rhs_ineq(&t2) - mpp.rhs_ineq(&t1);
        assert_eq!(diff, &mpp.e_ineq * (&t2 - &t1));
        let ramp_up = mpp.ineq_row_of(RowTag::RampUp(0)).unwrap();
        assert_eq!(mpp.rhs_ineq(&t1)[ramp_up], 130.0);
    }

    #[test]
    fn reserve_validation() {
        let net = two_bus(0.0);
        let mut spec = ReserveSpec {
            types: vec!["spin10".into()],
            cost: vec![vec![1.0], vec![2.0]],
            cap: vec![vec![20.0], vec![20.0]],
            system: vec![SystemRequirement { requirement: 10.0, penalty: 100.0, delta: None }],
            locational: vec![],
        };
        assert!(build_energy_reserve(&net, &spec).is_ok());
        spec.system[0].requirement = -1.0;
        assert!(matches!(build_energy_reserve(&net, &spec), Err(FormulationError::Reserve(_))));
        spec.system[0].requirement = 1.0;
        spec.system[0].delta = Some(vec![vec![1.0, 0.0]]);
        assert!(matches!(build_energy_reserve(&net, &spec), Err(FormulationError::Reserve(_))));
        spec.system[0].delta = None;
        spec.system[0].penalty = 1.5;
        assert!(matches!(build_energy_reserve(&net, &spec), Err(FormulationError::Reserve(_))));
        assert!(matches!(
            build_energy_reserve(&two_bus(0.1), &spec),
            Err(FormulationError::QuadraticReserve)
        ));
    }

    #[test]
    fn fingerprint_tracks_structure() {
        let a = build_energy_only(&two_bus(0.0)).unwrap();
        let b = build_energy_only(&two_bus(0.0)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let text = two_bus(0.0).render().replace(r#""limit": 50.0"#, r#""limit": 51.0"#);
        let c = build_energy_only(&parse_case(&text).unwrap()).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
