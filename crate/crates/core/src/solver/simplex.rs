//! Dense revised simplex with Bland's rule.
//!
//! The inequality-form program `min c'x, A x <= r, A_eq x = r_eq` (x free)
//! is rewritten in standard form over `z = (x+, x-, s, a) >= 0`, with an
//! artificial column only on rows whose slack cannot start basic.

use nalgebra::{DMatrix, DVector};

use super::SolverError;

pub(crate) enum LpOutcome {
    Optimal { x: DVector<f64>, y_ineq: DVector<f64>, y_eq: DVector<f64> },
    Infeasible,
    Unbounded,
}

struct Tableau {
    n: usize,
    m_in: usize,
    mat: DMatrix<f64>,
    rhs: DVector<f64>,
    flip: Vec<f64>,
    art_start: usize,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    binv: DMatrix<f64>,
    xb: DVector<f64>,
}

const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 40;

impl Tableau {
    fn new(a: &DMatrix<f64>, r: &DVector<f64>, a_eq: &DMatrix<f64>, r_eq: &DVector<f64>) -> Self {
        let n = a.ncols().max(a_eq.ncols());
        let m_in = a.nrows();
        let m_eq = a_eq.nrows();
        let m = m_in + m_eq;

        let mut flip = vec![1.0; m];
        let mut rhs = DVector::zeros(m);
        let mut needs_art = Vec::new();
        for i in 0..m {
            let v = if i < m_in { r[i] } else { r_eq[i - m_in] };
            if v < 0.0 {
                flip[i] = -1.0;
            }
            rhs[i] = flip[i] * v;
            if i >= m_in || flip[i] < 0.0 {
                needs_art.push(i);
            }
        }
        let art_start = 2 * n + m_in;
        let cols = art_start + needs_art.len();
        let mut mat = DMatrix::zeros(m, cols);
        for i in 0..m {
            let row = if i < m_in { a.row(i) } else { a_eq.row(i - m_in) };
            for j in 0..n {
                mat[(i, j)] = flip[i] * row[j];
                mat[(i, n + j)] = -flip[i] * row[j];
            }
            if i < m_in {
                mat[(i, 2 * n + i)] = flip[i];
            }
        }
        let mut basis = vec![0; m];
        for i in 0..m_in {
            basis[i] = 2 * n + i;
        }
        for (k, &i) in needs_art.iter().enumerate() {
            mat[(i, art_start + k)] = 1.0;
            basis[i] = art_start + k;
        }
        let mut is_basic = vec![false; cols];
        for &b in &basis {
            is_basic[b] = true;
        }
        Tableau {
            n,
            m_in,
            binv: DMatrix::identity(m, m),
            xb: rhs.clone(),
            mat,
            rhs,
            flip,
            art_start,
            basis,
            is_basic,
        }
    }

    fn m(&self) -> usize {
        self.rhs.len()
    }

    fn refactor(&mut self) -> Result<(), SolverError> {
        let b = self.mat.select_columns(&self.basis);
        self.binv = b
            .lu()
            .try_inverse()
            .ok_or_else(|| SolverError::Numerical("basis matrix became singular".into()))?;
        self.xb = &self.binv * &self.rhs;
        Ok(())
    }

    fn pivot(&mut self, row: usize, enter: usize, col: &DVector<f64>) {
        let m = self.m();
        let p = col[row];
        for c in 0..m {
            self.binv[(row, c)] /= p;
        }
        self.xb[row] /= p;
        for i in 0..m {
            if i == row || col[i] == 0.0 {
                continue;
            }
            let f = col[i];
            for c in 0..m {
                let v = self.binv[(row, c)];
                self.binv[(i, c)] -= f * v;
            }
            self.xb[i] -= f * self.xb[row];
        }
        self.is_basic[self.basis[row]] = false;
        self.basis[row] = enter;
        self.is_basic[enter] = true;
    }

    /// Runs Bland-rule iterations on `cost` over columns `< allowed_end`.
    /// With `pin_artificials`, basic artificials (already at zero) leave as
    /// soon as the entering column touches their row. Returns `false` when
    /// the problem is unbounded.
    fn iterate(&mut self, cost: &[f64], allowed_end: usize, pin_artificials: bool, max_iter: usize) -> Result<bool, SolverError> {
        let m = self.m();
        let scale = cost.iter().fold(1.0f64, |s, c| s.max(c.abs()));
        let dj_tol = 1e-9 * scale;
        for it in 0..max_iter {
            if it > 0 && it % REFACTOR_EVERY == 0 {
                self.refactor()?;
            }
            let cb = DVector::from_iterator(m, self.basis.iter().map(|&b| cost[b]));
            let y = self.binv.tr_mul(&cb);
            let enter = (0..allowed_end).find(|&j| {
                !self.is_basic[j] && cost[j] - self.mat.column(j).dot(&y) < -dj_tol
            });
            let Some(enter) = enter else {
                return Ok(true);
            };
            let col = &self.binv * self.mat.column(enter);

            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let ratio = if pin_artificials && self.basis[i] >= self.art_start && col[i].abs() > PIVOT_TOL {
                    // basic artificial at zero must leave before it turns positive
                    0.0
                } else if col[i] > PIVOT_TOL {
                    self.xb[i].max(0.0) / col[i]
                } else {
                    continue;
                };
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((li, lr)) => {
                        let tie = (ratio - lr).abs() <= 1e-12 * (1.0 + lr.abs());
                        if ratio < lr && !tie || tie && self.basis[i] < self.basis[li] {
                            Some((i, ratio))
                        } else {
                            Some((li, lr))
                        }
                    }
                };
            }
            let Some((row, _)) = leave else {
                return Ok(false);
            };
            self.pivot(row, enter, &col);
        }
        Err(SolverError::Numerical(format!("simplex exceeded {max_iter} iterations")))
    }

    fn phase_one(&mut self, max_iter: usize) -> Result<bool, SolverError> {
        let cols = self.mat.ncols();
        if self.art_start == cols {
            return Ok(true);
        }
        let cost: Vec<f64> = (0..cols).map(|j| if j >= self.art_start { 1.0 } else { 0.0 }).collect();
        self.iterate(&cost, cols, false, max_iter)?;
        self.refactor()?;
        let infeas: f64 = (0..self.m())
            .filter(|&i| self.basis[i] >= self.art_start)
            .map(|i| self.xb[i])
            .sum();
        let rhs_scale = self.rhs.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        if infeas > 1e-8 * rhs_scale {
            return Ok(false);
        }
        // drive zero-level artificials out of the basis where possible
        for row in 0..self.m() {
            if self.basis[row] < self.art_start {
                continue;
            }
            let brow = self.binv.row(row).clone_owned();
            let candidate = (0..self.art_start)
                .find(|&j| !self.is_basic[j] && (brow.dot(&self.mat.column(j).transpose())).abs() > 1e-7);
            if let Some(j) = candidate {
                let col = &self.binv * self.mat.column(j);
                self.pivot(row, j, &col);
            }
        }
        self.refactor()?;
        Ok(true)
    }

    fn primal(&self) -> DVector<f64> {
        let n = self.n;
        let mut x = DVector::zeros(n);
        for (i, &b) in self.basis.iter().enumerate() {
            if b < n {
                x[b] += self.xb[i];
            } else if b < 2 * n {
                x[b - n] -= self.xb[i];
            }
        }
        x
    }
}

/// Finds a feasible point, or `None` when the constraints are inconsistent.
pub(crate) fn feasible_point(
    a: &DMatrix<f64>,
    r: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    r_eq: &DVector<f64>,
) -> Result<Option<DVector<f64>>, SolverError> {
    let mut t = Tableau::new(a, r, a_eq, r_eq);
    let max_iter = 50 * (t.mat.ncols() + t.m()) + 100;
    if !t.phase_one(max_iter)? {
        return Ok(None);
    }
    Ok(Some(t.primal()))
}

pub(crate) fn solve_lp(
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    r: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    r_eq: &DVector<f64>,
) -> Result<LpOutcome, SolverError> {
    let mut t = Tableau::new(a, r, a_eq, r_eq);
    let max_iter = 50 * (t.mat.ncols() + t.m()) + 100;
    if !t.phase_one(max_iter)? {
        return Ok(LpOutcome::Infeasible);
    }
    let n = t.n;
    let cols = t.mat.ncols();
    let mut cost = vec![0.0; cols];
    for j in 0..n {
        cost[j] = c[j];
        cost[n + j] = -c[j];
    }
    if !t.iterate(&cost, t.art_start, true, max_iter)? {
        return Ok(LpOutcome::Unbounded);
    }
    t.refactor()?;

    let m = t.m();
    let cb = DVector::from_iterator(m, t.basis.iter().map(|&b| cost[b]));
    let pi = t.binv.tr_mul(&cb);
    let m_in = t.m_in;
    let y_ineq = DVector::from_iterator(m_in, (0..m_in).map(|i| -t.flip[i] * pi[i]));
    let y_eq = DVector::from_iterator(m - m_in, (m_in..m).map(|i| -t.flip[i] * pi[i]));
    Ok(LpOutcome::Optimal {
        x: t.primal(),
        y_ineq,
        y_eq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn optimal(out: LpOutcome) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        match out {
            LpOutcome::Optimal { x, y_ineq, y_eq } => (x, y_ineq, y_eq),
            LpOutcome::Infeasible => panic!("infeasible"),
            LpOutcome::Unbounded => panic!("unbounded"),
        }
    }

    #[test]
    fn small_lp() {
        // min -x - y  s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0
        let c = DVector::from_vec(vec![-1.0, -1.0]);
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let r = DVector::from_vec(vec![4.0, 6.0, 0.0, 0.0]);
        let (x, y, _) = optimal(solve_lp(&c, &a, &r, &DMatrix::zeros(0, 2), &DVector::zeros(0)).unwrap());
        assert!((x[0] - 1.6).abs() < 1e-12 && (x[1] - 1.2).abs() < 1e-12);
        // c + A'y = 0
        let resid = &c + a.tr_mul(&y);
        assert!(resid.amax() < 1e-12);
        assert!(y.iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn equality_and_negative_rhs() {
        // min x1 + 2 x2 s.t. x1 + x2 = 3, x1 <= 1, x2 >= 0.5  (-x2 <= -0.5)
        let c = DVector::from_vec(vec![1.0, 2.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let r = DVector::from_vec(vec![1.0, -0.5]);
        let a_eq = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let r_eq = DVector::from_vec(vec![3.0]);
        let (x, y, ye) = optimal(solve_lp(&c, &a, &r, &a_eq, &r_eq).unwrap());
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        assert!((ye[0] + 2.0).abs() < 1e-12);
        assert!((y[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let c = DVector::from_vec(vec![1.0]);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let r = DVector::from_vec(vec![1.0, -2.0]);
        let none = DMatrix::zeros(0, 1);
        assert!(matches!(
            solve_lp(&c, &a, &r, &none, &DVector::zeros(0)).unwrap(),
            LpOutcome::Infeasible
        ));
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let r = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            solve_lp(&c, &a, &r, &none, &DVector::zeros(0)).unwrap(),
            LpOutcome::Unbounded
        ));
    }
}
