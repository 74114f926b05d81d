//! Deterministic dense LP/QP solver that reports duals and the active set.
//!
//! LPs go through a two-phase revised simplex with Bland's rule, QPs through
//! a primal active-set method started from the simplex phase-one point.
//! Duals follow the sign convention documented in [`crate::canonical`]:
//! `grad z(x) + A_ineq' y_ineq + A_eq' y_eq = 0` with `y_ineq >= 0`.

mod active_set;
mod simplex;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::canonical::{CanonicalMpp, Cost};

pub(crate) use active_set::solve_kkt;

/// Activity tolerance, relative to the row scale.
pub const EPS_ACT: f64 = 1e-7;
/// Duals at or below this are weakly active.
pub const EPS_DUAL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("numerical breakdown: {0}")]
    Numerical(String),
    #[error("parameter has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Optimal, but primal or dual degenerate; no critical region is built.
    Degenerate,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub x_star: DVector<f64>,
    pub y_ineq: DVector<f64>,
    pub y_eq: DVector<f64>,
    /// Sorted inequality rows active at `x_star`.
    pub active_set: Vec<usize>,
    pub status: SolveStatus,
}

impl SolveResult {
    fn without_solution(status: SolveStatus, mpp: &CanonicalMpp) -> Self {
        SolveResult {
            x_star: DVector::zeros(mpp.n_vars),
            y_ineq: DVector::zeros(mpp.n_ineq()),
            y_eq: DVector::zeros(mpp.n_eq()),
            active_set: Vec::new(),
            status,
        }
    }

    /// Optimal or degenerate: a usable optimum exists.
    pub fn has_solution(&self) -> bool {
        matches!(self.status, SolveStatus::Optimal | SolveStatus::Degenerate)
    }
}

fn row_scale(a_row: nalgebra::DMatrixView<'_, f64>, rhs: f64, x: &DVector<f64>) -> f64 {
    let ax: f64 = a_row.iter().zip(x.iter()).map(|(a, x)| (a * x).abs()).sum();
    1.0 + rhs.abs() + ax
}

/// Inequality rows with `|A_i x - r_i| <= EPS_ACT * scale_i`.
pub fn active_rows(mpp: &CanonicalMpp, rhs: &DVector<f64>, x: &DVector<f64>) -> Vec<usize> {
    (0..mpp.n_ineq())
        .filter(|&i| {
            let row = mpp.a_ineq.row(i);
            let slack = rhs[i] - row.dot(&x.transpose());
            slack.abs() <= EPS_ACT * row_scale(mpp.a_ineq.rows(i, 1), rhs[i], x)
        })
        .collect()
}

/// Solver instance. Stateless apart from a solve counter, so one per worker.
#[derive(Debug, Default)]
pub struct Solver {
    solves: u64,
}

impl Solver {
    pub fn new() -> Self {
        Solver::default()
    }

    pub fn solve_count(&self) -> u64 {
        self.solves
    }

    pub fn solve(&mut self, mpp: &CanonicalMpp, theta: &DVector<f64>) -> Result<SolveResult, SolverError> {
        if theta.len() != mpp.layout.dim() {
            return Err(SolverError::Dimension {
                expected: mpp.layout.dim(),
                got: theta.len(),
            });
        }
        self.solves += 1;
        let r = mpp.rhs_ineq(theta);
        let r_eq = mpp.rhs_eq(theta);
        let (x, y_ineq, y_eq) = match &mpp.cost {
            Cost::Linear(c) => match simplex::solve_lp(c, &mpp.a_ineq, &r, &mpp.a_eq, &r_eq)? {
                simplex::LpOutcome::Optimal { x, y_ineq, y_eq } => (x, y_ineq, y_eq),
                simplex::LpOutcome::Infeasible => {
                    return Ok(SolveResult::without_solution(SolveStatus::Infeasible, mpp))
                }
                simplex::LpOutcome::Unbounded => {
                    return Ok(SolveResult::without_solution(SolveStatus::Unbounded, mpp))
                }
            },
            Cost::Quadratic { h, c } => {
                match active_set::solve_qp(h, c, &mpp.a_ineq, &r, &mpp.a_eq, &r_eq)? {
                    active_set::QpOutcome::Optimal { x, y_ineq, y_eq } => (x, y_ineq, y_eq),
                    active_set::QpOutcome::Infeasible => {
                        return Ok(SolveResult::without_solution(SolveStatus::Infeasible, mpp))
                    }
                }
            }
        };
        let active_set = active_rows(mpp, &r, &x);
        let mut result = SolveResult {
            x_star: x,
            y_ineq,
            y_eq,
            active_set,
            status: SolveStatus::Optimal,
        };
        if !mpp.is_quadratic() && result.active_set.len() + mpp.n_eq() == mpp.n_vars {
            // recompute on the vertex basis so the result matches the affine region map exactly
            if let Some(polished) = solve_on_active_set(mpp, theta, &result.active_set) {
                result.x_star = polished.0;
                result.y_ineq = polished.1;
                result.y_eq = polished.2;
            }
        }
        result.status = classify(mpp, &result);
        Ok(result)
    }
}

fn classify(mpp: &CanonicalMpp, result: &SolveResult) -> SolveStatus {
    let n_active = result.active_set.len() + mpp.n_eq();
    if n_active > mpp.n_vars {
        return SolveStatus::Degenerate;
    }
    if !mpp.is_quadratic() && n_active < mpp.n_vars {
        // an LP optimum off a vertex is not unique
        return SolveStatus::Degenerate;
    }
    if result.active_set.iter().any(|&i| result.y_ineq[i] <= EPS_DUAL) {
        return SolveStatus::Degenerate;
    }
    SolveStatus::Optimal
}

/// Re-solves with `active` (inequality rows) imposed as equalities along with
/// the equality block. Returns `(x, y_ineq, y_eq)`, or `None` if the reduced
/// system is singular (or, for LPs, not square).
pub fn solve_on_active_set(
    mpp: &CanonicalMpp,
    theta: &DVector<f64>,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let r = mpp.rhs_ineq(theta);
    let r_eq = mpp.rhs_eq(theta);
    let n = mpp.n_vars;
    let k = active.len() + mpp.n_eq();
    let mut a_t = DMatrix::zeros(k, n);
    let mut r_t = DVector::zeros(k);
    for (p, &i) in active.iter().enumerate() {
        a_t.row_mut(p).copy_from(&mpp.a_ineq.row(i));
        r_t[p] = r[i];
    }
    for e in 0..mpp.n_eq() {
        a_t.row_mut(active.len() + e).copy_from(&mpp.a_eq.row(e));
        r_t[active.len() + e] = r_eq[e];
    }
    let (x, y_t) = match &mpp.cost {
        Cost::Linear(c) => {
            if k != n {
                return None;
            }
            let lu = a_t.clone().lu();
            let x = lu.solve(&r_t)?;
            let y = a_t.transpose().lu().solve(&(-c))?;
            (x, y)
        }
        Cost::Quadratic { h, c } => {
            let rows: Vec<usize> = (0..k).collect();
            solve_kkt(h, c, &a_t, &rows, &r_t)?
        }
    };
    if x.iter().chain(y_t.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    let mut y_ineq = DVector::zeros(mpp.n_ineq());
    for (p, &i) in active.iter().enumerate() {
        y_ineq[i] = y_t[p];
    }
    let y_eq = DVector::from_iterator(mpp.n_eq(), (0..mpp.n_eq()).map(|e| y_t[active.len() + e]));
    Some((x, y_ineq, y_eq))
}

/// KKT residuals of a candidate primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `max |grad z(x) + A' y + A_eq' y_eq|`
    pub stationarity_residual: f64,
    /// worst violation of `A x <= r` and `A_eq x = r_eq`
    pub feasibility_residual: f64,
    /// `max |y_i (A_i x - r_i)|`
    pub complementarity_residual: f64,
    pub dual_feasibility_ok: bool,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity_residual
            .max(self.feasibility_residual)
            .max(self.complementarity_residual)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.dual_feasibility_ok && self.max_residual() <= tol
    }
}

/// Checks the KKT conditions for `(x, y_ineq, y_eq)` at `theta`.
pub fn verify_kkt_parts(
    mpp: &CanonicalMpp,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    y_ineq: &DVector<f64>,
    y_eq: &DVector<f64>,
) -> KktReport {
    let r = mpp.rhs_ineq(theta);
    let r_eq = mpp.rhs_eq(theta);
    let grad = mpp.cost.gradient(x);
    let stat = grad + mpp.a_ineq.tr_mul(y_ineq) + mpp.a_eq.tr_mul(y_eq);
    let slack_in = &mpp.a_ineq * x - &r;
    let slack_eq = &mpp.a_eq * x - &r_eq;
    let feas = slack_in
        .iter()
        .map(|&v| v.max(0.0))
        .chain(slack_eq.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let comp = y_ineq
        .iter()
        .zip(slack_in.iter())
        .map(|(y, s)| (y * s).abs())
        .fold(0.0, f64::max);
    KktReport {
        stationarity_residual: stat.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        feasibility_residual: feas,
        complementarity_residual: comp,
        dual_feasibility_ok: y_ineq.iter().all(|&y| y >= -EPS_DUAL),
    }
}

pub fn verify_kkt(mpp: &CanonicalMpp, theta: &DVector<f64>, result: &SolveResult) -> KktReport {
    verify_kkt_parts(mpp, theta, &result.x_star, &result.y_ineq, &result.y_eq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::{build_energy_only, ParameterPoint, RowTag, ThetaLayout, MarketKind};
    use crate::netcase::parse_case;

    pub(crate) fn two_bus_mpp(c2: f64) -> CanonicalMpp {
        let net = parse_case(&format!(
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
        .unwrap();
        build_energy_only(&net).unwrap()
    }

    fn theta(load: f64) -> DVector<f64> {
        ParameterPoint { d: vec![0.0, load], g_prev: vec![40.0, 10.0] }.to_theta()
    }

    #[test]
    fn uncongested_two_bus() {
        let mpp = two_bus_mpp(0.0);
        let res = Solver::new().solve(&mpp, &theta(40.0)).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!((res.x_star[0] - 40.0).abs() < 1e-9 && res.x_star[1].abs() < 1e-9);
        let prices = mpp.prices(&res.y_ineq, &res.y_eq);
        assert!((prices.lambda - 10.0).abs() < 1e-9);
        let flow_up = mpp.ineq_row_of(RowTag::FlowUpper(0)).unwrap();
        assert!(!res.active_set.contains(&flow_up));
    }

    #[test]
    fn congested_two_bus() {
        let mpp = two_bus_mpp(0.0);
        let res = Solver::new().solve(&mpp, &theta(60.0)).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!((res.x_star[0] - 50.0).abs() < 1e-9 && (res.x_star[1] - 10.0).abs() < 1e-9);
        let flow_up = mpp.ineq_row_of(RowTag::FlowUpper(0)).unwrap();
        assert!(res.active_set.contains(&flow_up));
        let prices = mpp.prices(&res.y_ineq, &res.y_eq);
        assert!((prices.mu_plus[0] - 20.0).abs() < 1e-9);
        assert!((prices.lmp[0] - 10.0).abs() < 1e-9 && (prices.lmp[1] - 30.0).abs() < 1e-9);
        assert!(verify_kkt(&mpp, &theta(60.0), &res).passes(1e-7));
    }

    #[test]
    fn unconstrained_qp_minimum() {
        let mpp = CanonicalMpp {
            n_vars: 2,
            cost: Cost::Quadratic { h: DMatrix::identity(2, 2), c: DVector::zeros(2) },
            a_ineq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_ineq: DVector::from_vec(vec![5.0]),
            e_ineq: DMatrix::zeros(1, 1),
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            e_eq: DMatrix::zeros(0, 1),
            ineq_tags: vec![RowTag::GenUpper(0)],
            eq_tags: vec![],
            layout: ThetaLayout { n_load: 1, n_prev: 0 },
            market: MarketKind::EnergyOnly,
            ptdf: DMatrix::zeros(0, 1),
            gen_buses: vec![],
        };
        let res = Solver::new().solve(&mpp, &DVector::zeros(1)).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!(res.x_star.amax() < 1e-12);
        assert!(res.active_set.is_empty());
    }

    #[test]
    fn flipped_dual_fails_kkt() {
        let mpp = two_bus_mpp(0.0);
        let t = theta(60.0);
        let mut res = Solver::new().solve(&mpp, &t).unwrap();
        res.y_ineq = -res.y_ineq;
        assert!(!verify_kkt(&mpp, &t, &res).dual_feasibility_ok);
    }

    #[test]
    fn rejects_wrong_theta_dimension() {
        let mpp = two_bus_mpp(0.0);
        assert!(matches!(
            Solver::new().solve(&mpp, &DVector::zeros(3)),
            Err(SolverError::Dimension { .. })
        ));
    }

    #[test]
    fn infeasible_load() {
        let mpp = two_bus_mpp(0.0);
        let res = Solver::new().solve(&mpp, &theta(500.0)).unwrap();
        assert_eq!(res.status, SolveStatus::Infeasible);
    }

    #[test]
    fn qp_two_bus_kkt() {
        let mpp = two_bus_mpp(0.05);
        for load in [20.0, 45.0, 60.0, 80.0] {
            let t = theta(load);
            let res = Solver::new().solve(&mpp, &t).unwrap();
            assert!(res.has_solution(), "load {load}");
            assert!(verify_kkt(&mpp, &t, &res).passes(1e-7), "load {load}");
        }
    }
}
