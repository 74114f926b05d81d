//! Critical regions around a solved parameter point.
//!
//! Given the optimal active set at `theta0`, the stacked matrices `A~, E~,
//! b~` (active inequality rows followed by the always-active equality block)
//! and `A-, E-, b-` (inactive rows) define a polyhedron `G theta <= h` on
//! which the optimizer is an affine function of `theta`.
//!
//! * LP: `x(theta) = A~^-1 (b~ + E~ theta)`, duals constant,
//!   region `(A- A~^-1 E~ - E-) theta < b- - A- A~^-1 b~`.
//! * QP with `z = 1/2 x'Hx + c'x`: with `M = A~ H^-1 A~'` and
//!   `q = b~ + A~ H^-1 c`, the active duals are `y~ = -M^-1 (q + E~ theta)`,
//!   `x = -H^-1 (c + A~' y~)`. The region intersects primal feasibility of
//!   the inactive rows with `y~ >= 0` on active inequality rows. With
//!   `c = 0` these reduce to the textbook `H^-1 A~' M^-1 (b~ + E~ theta)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::canonical::{CanonicalMpp, Cost};
use crate::solver::{SolveResult, SolveStatus};

/// Default membership slack.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("degenerate solution: {0}")]
    Degeneracy(String),
    #[error("program kind mismatch: {0}")]
    Kind(&'static str),
    #[error("parameter lies outside the critical region")]
    Membership,
    #[error("parameter has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Mplp,
    Mpqp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DualMap {
    /// LP duals are constant over the region.
    Constant { y_ineq: DVector<f64>, y_eq: DVector<f64> },
    /// QP duals of active inequality rows (in `active_set` order) followed by
    /// the equality rows: `y = D theta + e`. Inactive rows carry zero.
    Affine { d: DMatrix<f64>, e: DVector<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalRegion {
    /// Halfspaces `G theta <= h`.
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub active_set: Vec<usize>,
    /// `x(theta) = F theta + f`.
    pub f_mat: DMatrix<f64>,
    pub f_vec: DVector<f64>,
    pub dual_map: DualMap,
    pub kind: RegionKind,
    pub seed_theta: DVector<f64>,
    pub n_ineq: usize,
    pub n_eq: usize,
    pub hit_count: u64,
}

struct Partition {
    a_t: DMatrix<f64>,
    b_t: DVector<f64>,
    e_t: DMatrix<f64>,
    a_b: DMatrix<f64>,
    b_b: DVector<f64>,
    e_b: DMatrix<f64>,
}

fn partition(mpp: &CanonicalMpp, active: &[usize]) -> Partition {
    let inactive: Vec<usize> = (0..mpp.n_ineq()).filter(|i| active.binary_search(i).is_err()).collect();
    let stack = |m_in: &DMatrix<f64>, m_eq: &DMatrix<f64>| {
        let top = m_in.select_rows(active);
        let mut out = DMatrix::zeros(top.nrows() + m_eq.nrows(), m_in.ncols());
        out.view_mut((0, 0), (top.nrows(), top.ncols())).copy_from(&top);
        out.view_mut((top.nrows(), 0), (m_eq.nrows(), m_eq.ncols())).copy_from(m_eq);
        out
    };
    let b_t = DVector::from_iterator(
        active.len() + mpp.n_eq(),
        active.iter().map(|&i| mpp.b_ineq[i]).chain(mpp.b_eq.iter().copied()),
    );
    Partition {
        a_t: stack(&mpp.a_ineq, &mpp.a_eq),
        b_t,
        e_t: stack(&mpp.e_ineq, &mpp.e_eq),
        a_b: mpp.a_ineq.select_rows(&inactive),
        b_b: mpp.b_ineq.select_rows(&inactive),
        e_b: mpp.e_ineq.select_rows(&inactive),
    }
}

fn check_inputs(mpp: &CanonicalMpp, theta0: &DVector<f64>, result: &SolveResult) -> Result<(), RegionError> {
    if theta0.len() != mpp.layout.dim() {
        return Err(RegionError::Dimension {
            expected: mpp.layout.dim(),
            got: theta0.len(),
        });
    }
    match result.status {
        SolveStatus::Optimal => Ok(()),
        other => Err(RegionError::Degeneracy(format!("solve status {other:?}"))),
    }
}

fn has_full_rank(lu_diag: impl Iterator<Item = f64>, scale: f64) -> bool {
    let mut ok = true;
    for u in lu_diag {
        if !(u.abs() > 1e-10 * scale) {
            ok = false;
        }
    }
    ok
}

/// LP branch: `x(theta) = A~^-1 (b~ + E~ theta)`, constant duals.
pub fn region_from_solution_lp(
    mpp: &CanonicalMpp,
    theta0: &DVector<f64>,
    result: &SolveResult,
) -> Result<CriticalRegion, RegionError> {
    if mpp.is_quadratic() {
        return Err(RegionError::Kind("LP region requested for a quadratic program"));
    }
    check_inputs(mpp, theta0, result)?;
    let p = partition(mpp, &result.active_set);
    if p.a_t.nrows() != mpp.n_vars {
        return Err(RegionError::Degeneracy(format!(
            "{} active rows for {} variables",
            p.a_t.nrows(),
            mpp.n_vars
        )));
    }
    let scale = p.a_t.amax().max(1.0);
    let lu = p.a_t.clone().lu();
    if !has_full_rank(lu.u().diagonal().iter().copied(), scale) {
        return Err(RegionError::Degeneracy("active rows are linearly dependent".into()));
    }
    let f_mat = lu
        .solve(&p.e_t)
        .ok_or_else(|| RegionError::Degeneracy("singular active matrix".into()))?;
    let f_vec = lu
        .solve(&p.b_t)
        .ok_or_else(|| RegionError::Degeneracy("singular active matrix".into()))?;
    let g = &p.a_b * &f_mat - &p.e_b;
    let h = &p.b_b - &p.a_b * &f_vec;
    Ok(CriticalRegion {
        g,
        h,
        active_set: result.active_set.clone(),
        f_mat,
        f_vec,
        dual_map: DualMap::Constant {
            y_ineq: result.y_ineq.clone(),
            y_eq: result.y_eq.clone(),
        },
        kind: RegionKind::Mplp,
        seed_theta: theta0.clone(),
        n_ineq: mpp.n_ineq(),
        n_eq: mpp.n_eq(),
        hit_count: 0,
    })
}

/// QP branch: primal feasibility of inactive rows intersected with
/// nonnegativity of the active inequality duals.
pub fn region_from_solution_qp(
    mpp: &CanonicalMpp,
    theta0: &DVector<f64>,
    result: &SolveResult,
) -> Result<CriticalRegion, RegionError> {
    let Cost::Quadratic { h: hess, c } = &mpp.cost else {
        return Err(RegionError::Kind("QP region requested for a linear program"));
    };
    check_inputs(mpp, theta0, result)?;
    let p = partition(mpp, &result.active_set);
    let n = mpp.n_vars;
    let k = p.a_t.nrows();
    let n_act = result.active_set.len();
    let n_theta = mpp.layout.dim();
    if k > n {
        return Err(RegionError::Degeneracy(format!("{k} active rows for {n} variables")));
    }
    let chol = hess
        .clone()
        .cholesky()
        .ok_or(RegionError::Kind("Hessian is not positive definite"))?;
    let hinv_c = chol.solve(c);

    let (d, e) = if k == 0 {
        (DMatrix::zeros(0, n_theta), DVector::zeros(0))
    } else {
        let hinv_at = chol.solve(&p.a_t.transpose());
        let m = &p.a_t * &hinv_at;
        let m_chol = m
            .cholesky()
            .ok_or_else(|| RegionError::Degeneracy("active rows are linearly dependent".into()))?;
        let q = &p.b_t + &p.a_t * &hinv_c;
        (-m_chol.solve(&p.e_t), -m_chol.solve(&q))
    };
    // x = -H^-1 (c + A~' y~)
    let (f_mat, f_vec) = if k == 0 {
        (DMatrix::zeros(n, n_theta), -hinv_c.clone())
    } else {
        let at_d = p.a_t.transpose() * &d;
        let at_e = p.a_t.transpose() * &e;
        (-chol.solve(&at_d), -chol.solve(&(c + at_e)))
    };

    let g_p = &p.a_b * &f_mat - &p.e_b;
    let h_p = &p.b_b - &p.a_b * &f_vec;
    // -y~_active <= 0  <=>  -D theta <= e
    let rows = g_p.nrows() + n_act;
    let mut g = DMatrix::zeros(rows, n_theta);
    let mut h = DVector::zeros(rows);
    g.view_mut((0, 0), (g_p.nrows(), n_theta)).copy_from(&g_p);
    h.rows_mut(0, g_p.nrows()).copy_from(&h_p);
    for a in 0..n_act {
        g.row_mut(g_p.nrows() + a).copy_from(&(-d.row(a)));
        h[g_p.nrows() + a] = e[a];
    }

    Ok(CriticalRegion {
        g,
        h,
        active_set: result.active_set.clone(),
        f_mat,
        f_vec,
        dual_map: DualMap::Affine { d, e },
        kind: RegionKind::Mpqp,
        seed_theta: theta0.clone(),
        n_ineq: mpp.n_ineq(),
        n_eq: mpp.n_eq(),
        hit_count: 0,
    })
}

/// Dispatches on the program's cost type.
pub fn region_from_solution(
    mpp: &CanonicalMpp,
    theta0: &DVector<f64>,
    result: &SolveResult,
) -> Result<CriticalRegion, RegionError> {
    if mpp.is_quadratic() {
        region_from_solution_qp(mpp, theta0, result)
    } else {
        region_from_solution_lp(mpp, theta0, result)
    }
}

impl CriticalRegion {
    pub fn theta_dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn face_count(&self) -> usize {
        self.g.nrows()
    }

    /// Slack `h - G theta` of each face.
    pub fn slacks(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.h - &self.g * theta
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        self.contains_tol(theta, MEMBERSHIP_TOL)
    }

    pub fn contains_tol(&self, theta: &DVector<f64>, tol: f64) -> bool {
        if theta.len() != self.theta_dim() {
            return false;
        }
        let dim = theta.len();
        (0..self.g.nrows()).all(|i| {
            let mut s = 0.0;
            for j in 0..dim {
                s += self.g[(i, j)] * theta[j];
            }
            s <= self.h[i] + tol
        })
    }

    pub fn primal(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.f_mat * theta + &self.f_vec
    }

    /// Full dual vectors `(y_ineq, y_eq)` at `theta`.
    pub fn duals(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match &self.dual_map {
            DualMap::Constant { y_ineq, y_eq } => (y_ineq.clone(), y_eq.clone()),
            DualMap::Affine { d, e } => {
                let y_t = d * theta + e;
                let mut y_ineq = DVector::zeros(self.n_ineq);
                for (p, &i) in self.active_set.iter().enumerate() {
                    y_ineq[i] = y_t[p];
                }
                let n_act = self.active_set.len();
                let y_eq = DVector::from_iterator(self.n_eq, (0..self.n_eq).map(|q| y_t[n_act + q]));
                (y_ineq, y_eq)
            }
        }
    }

    /// Affine-map evaluation; fails outside the region.
    pub fn evaluate(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), RegionError> {
        if theta.len() != self.theta_dim() {
            return Err(RegionError::Dimension {
                expected: self.theta_dim(),
                got: theta.len(),
            });
        }
        if !self.contains(theta) {
            return Err(RegionError::Membership);
        }
        let x = self.primal(theta);
        let (y_ineq, y_eq) = self.duals(theta);
        Ok((x, y_ineq, y_eq))
    }

    /// Hit-and-run samples from the region intersected with a box of
    /// half-width `radius` around the seed, each at normalized distance at
    /// least `margin` from every face.
    pub fn sample_interior<R: Rng>(&self, rng: &mut R, count: usize, radius: f64, margin: f64) -> Vec<DVector<f64>> {
        let dim = self.theta_dim();
        let norms: Vec<f64> = (0..self.g.nrows()).map(|i| self.g.row(i).norm()).collect();
        let mut point = self.seed_theta.clone();
        let mut out = Vec::with_capacity(count);
        let inside = |p: &DVector<f64>| {
            let s = self.slacks(p);
            (0..s.len()).all(|i| norms[i] == 0.0 || s[i] >= margin * norms[i])
        };
        if !inside(&point) {
            return out;
        }
        let mut attempts = 0;
        while out.len() < count && attempts < 50 * count {
            attempts += 1;
            let mut dir = DVector::from_fn(dim, |_, _| rng.random::<f64>() - 0.5);
            let norm = dir.norm();
            if norm == 0.0 {
                continue;
            }
            dir /= norm;
            let (mut lo, mut hi) = (-radius, radius);
            for j in 0..dim {
                // stay within the box around the seed
                let off = point[j] - self.seed_theta[j];
                if dir[j].abs() > 1e-15 {
                    let a = (-radius - off) / dir[j];
                    let b = (radius - off) / dir[j];
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
            }
            let slack = self.slacks(&point);
            let gd = &self.g * &dir;
            for i in 0..gd.len() {
                let room = slack[i] - margin * norms[i];
                if gd[i] > 1e-15 {
                    hi = hi.min(room / gd[i]);
                } else if gd[i] < -1e-15 {
                    lo = lo.max(room / gd[i]);
                }
            }
            if !(hi > lo) {
                continue;
            }
            let t = lo + (hi - lo) * rng.random::<f64>();
            let candidate = &point + &dir * t;
            if inside(&candidate) {
                point = candidate;
                out.push(point.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::{build_energy_only, MarketKind, RowTag, ThetaLayout};
    use crate::netcase::parse_case;
    use crate::solver::Solver;

    fn two_bus(c2: f64) -> CanonicalMpp {
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
        DVector::from_vec(vec![0.0, load, 40.0, 10.0])
    }

    /// 1-D parametric program `min 1/2 x^2 s.t. x <= theta`.
    fn scalar_qp() -> CanonicalMpp {
        CanonicalMpp {
            n_vars: 1,
            cost: Cost::Quadratic { h: DMatrix::identity(1, 1), c: DVector::zeros(1) },
            a_ineq: DMatrix::from_element(1, 1, 1.0),
            b_ineq: DVector::zeros(1),
            e_ineq: DMatrix::from_element(1, 1, 1.0),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            e_eq: DMatrix::zeros(0, 1),
            ineq_tags: vec![RowTag::GenUpper(0)],
            eq_tags: vec![],
            layout: ThetaLayout { n_load: 1, n_prev: 0 },
            market: MarketKind::EnergyOnly,
            ptdf: DMatrix::zeros(0, 1),
            gen_buses: vec![],
        }
    }

    #[test]
    fn lp_region_uncongested() {
        let mpp = two_bus(0.0);
        let t0 = theta(40.0);
        let res = Solver::new().solve(&mpp, &t0).unwrap();
        let region = region_from_solution_lp(&mpp, &t0, &res).unwrap();
        assert!(region.contains(&t0));
        assert!(region.contains(&theta(49.9)));
        assert!(!region.contains(&theta(50.1)));
        assert!(region.contains(&theta(50.0)));
        let x = region.primal(&theta(47.0));
        assert!((x[0] - 47.0).abs() < 1e-12 && x[1].abs() < 1e-12);
        assert!((region.primal(&t0) - &res.x_star).amax() < 1e-9);
    }

    #[test]
    fn lp_region_congested() {
        let mpp = two_bus(0.0);
        let t0 = theta(60.0);
        let res = Solver::new().solve(&mpp, &t0).unwrap();
        let region = region_from_solution_lp(&mpp, &t0, &res).unwrap();
        assert!(region.contains(&theta(50.5)));
        assert!(!region.contains(&theta(49.5)));
        let x = region.primal(&theta(70.0));
        assert!((x[0] - 50.0).abs() < 1e-12 && (x[1] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_qp_regions() {
        let mpp = scalar_qp();
        let mut solver = Solver::new();
        let t_neg = DVector::from_vec(vec![-1.0]);
        let res = solver.solve(&mpp, &t_neg).unwrap();
        assert_eq!(res.active_set, vec![0]);
        let active = region_from_solution_qp(&mpp, &t_neg, &res).unwrap();
        assert!(active.contains(&DVector::from_vec(vec![-3.0])));
        assert!(!active.contains(&DVector::from_vec(vec![0.5])));
        let (x, y, _) = active.evaluate(&DVector::from_vec(vec![-2.5])).unwrap();
        assert!((x[0] + 2.5).abs() < 1e-12);
        assert!((y[0] - 2.5).abs() < 1e-12);

        let t_pos = DVector::from_vec(vec![1.0]);
        let res = solver.solve(&mpp, &t_pos).unwrap();
        assert!(res.active_set.is_empty());
        let inactive = region_from_solution_qp(&mpp, &t_pos, &res).unwrap();
        assert!(inactive.contains(&DVector::from_vec(vec![7.0])));
        assert!(!inactive.contains(&DVector::from_vec(vec![-0.5])));
        let (x, y, _) = inactive.evaluate(&DVector::from_vec(vec![3.0])).unwrap();
        assert_eq!(x[0], 0.0);
        assert_eq!(y[0], 0.0);
        assert!(matches!(
            inactive.evaluate(&DVector::from_vec(vec![-1.0])),
            Err(RegionError::Membership)
        ));
    }

    #[test]
    fn unconstrained_qp_region_is_everything() {
        let mut mpp = scalar_qp();
        mpp.b_ineq[0] = 100.0;
        mpp.e_ineq[(0, 0)] = 0.0;
        let t0 = DVector::from_vec(vec![0.0]);
        let res = Solver::new().solve(&mpp, &t0).unwrap();
        let region = region_from_solution_qp(&mpp, &t0, &res).unwrap();
        for v in [-1e6, 0.0, 1e6] {
            let t = DVector::from_vec(vec![v]);
            assert!(region.contains(&t));
            assert_eq!(region.primal(&t)[0], 0.0);
        }
    }

    #[test]
    fn face_boundary_membership() {
        let mpp = two_bus(0.0);
        let t0 = theta(40.0);
        let res = Solver::new().solve(&mpp, &t0).unwrap();
        let region = region_from_solution_lp(&mpp, &t0, &res).unwrap();
        assert!(region.contains(&theta(50.0)));
        assert!(!region.contains(&theta(51.0)));
    }

    #[test]
    fn kind_mismatch() {
        let mpp = two_bus(0.0);
        let t0 = theta(40.0);
        let res = Solver::new().solve(&mpp, &t0).unwrap();
        assert!(matches!(region_from_solution_qp(&mpp, &t0, &res), Err(RegionError::Kind(_))));
    }

    #[test]
    fn degenerate_result_rejected() {
        let mpp = two_bus(0.0);
        let t0 = theta(40.0);
        let mut res = Solver::new().solve(&mpp, &t0).unwrap();
        res.status = SolveStatus::Degenerate;
        assert!(matches!(region_from_solution_lp(&mpp, &t0, &res), Err(RegionError::Degeneracy(_))));
    }
}
