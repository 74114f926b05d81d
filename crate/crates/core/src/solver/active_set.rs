//! Primal active-set method for strictly convex quadratic programs
//! `min 1/2 x'Hx + c'x, A x <= r, A_eq x = r_eq`.

use nalgebra::{DMatrix, DVector};

use super::simplex::feasible_point;
use super::SolverError;

pub(crate) enum QpOutcome {
    Optimal {
        x: DVector<f64>,
        y_ineq: DVector<f64>,
        y_eq: DVector<f64>,
    },
    Infeasible,
}

/// Solves the equality-constrained subproblem on `rows` (indices into the
/// stacked `[A; A_eq]` matrix): `H x + c + A_W' y = 0`, `A_W x = r_W`.
pub(crate) fn solve_kkt(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    stacked: &DMatrix<f64>,
    rows: &[usize],
    r_w: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let w = rows.len();
    let mut k = DMatrix::zeros(n + w, n + w);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (p, &row) in rows.iter().enumerate() {
        for j in 0..n {
            let v = stacked[(row, j)];
            k[(n + p, j)] = v;
            k[(j, n + p)] = v;
        }
    }
    let mut rhs = DVector::zeros(n + w);
    for j in 0..n {
        rhs[j] = -c[j];
    }
    for p in 0..w {
        rhs[n + p] = r_w[p];
    }
    let sol = k.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, w).into_owned()))
}

fn independent_rows(stacked: &DMatrix<f64>, candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    // incremental Gram-Schmidt over row space
    let n = stacked.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut chosen = Vec::new();
    for row in candidates {
        if basis.len() == n {
            break;
        }
        let mut v: DVector<f64> = stacked.row(row).transpose();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-9 * norm0 {
            basis.push(v / norm);
            chosen.push(row);
        }
    }
    chosen
}

pub(crate) fn solve_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    r: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    r_eq: &DVector<f64>,
) -> Result<QpOutcome, SolverError> {
    let n = h.nrows();
    let m_in = a.nrows();
    let m_eq = a_eq.nrows();
    let mut stacked = DMatrix::zeros(m_in + m_eq, n);
    stacked.view_mut((0, 0), (m_in, n)).copy_from(a);
    stacked.view_mut((m_in, 0), (m_eq, n)).copy_from(a_eq);
    let rhs_all = DVector::from_iterator(m_in + m_eq, r.iter().chain(r_eq.iter()).copied());

    let mut x = match feasible_point(a, r, a_eq, r_eq)? {
        Some(x) => x,
        None => return Ok(QpOutcome::Infeasible),
    };
    let slack_tol = |i: usize| 1e-9 * (1.0 + rhs_all[i].abs());

    let eq_rows = m_in..m_in + m_eq;
    let active0 = (0..m_in).filter(|&i| rhs_all[i] - a.row(i).dot(&x.transpose()) <= slack_tol(i));
    let mut working = independent_rows(&stacked, eq_rows.clone().chain(active0));
    if working.iter().filter(|&&i| i >= m_in).count() < m_eq {
        return Err(SolverError::Numerical("equality rows are linearly dependent".into()));
    }

    let max_iter = 20 * (m_in + n) + 50;
    for _ in 0..max_iter {
        let g = h * &x + c;
        // step toward the minimizer on the current working set: A_W p = 0
        let zero = DVector::zeros(working.len());
        let (p, y_w) = solve_kkt(h, &g, &stacked, &working, &zero)
            .ok_or_else(|| SolverError::Numerical("singular KKT system".into()))?;
        let p_scale = 1.0 + x.amax();
        if p.amax() <= 1e-11 * p_scale {
            let worst = working
                .iter()
                .enumerate()
                .filter(|(_, &row)| row < m_in)
                .map(|(k, &row)| (k, row, y_w[k]))
                .filter(|&(_, _, y)| y < -1e-10 * (1.0 + g.amax()))
                .min_by(|a, b| a.2.total_cmp(&b.2).then(a.1.cmp(&b.1)));
            match worst {
                None => {
                    // polish: exact solve on the optimal working set
                    let r_w = DVector::from_iterator(working.len(), working.iter().map(|&i| rhs_all[i]));
                    let (x_opt, y_opt) = solve_kkt(h, c, &stacked, &working, &r_w)
                        .ok_or_else(|| SolverError::Numerical("singular KKT system".into()))?;
                    let mut y_ineq = DVector::zeros(m_in);
                    let mut y_eq = DVector::zeros(m_eq);
                    for (k, &row) in working.iter().enumerate() {
                        if row < m_in {
                            y_ineq[row] = y_opt[k];
                        } else {
                            y_eq[row - m_in] = y_opt[k];
                        }
                    }
                    return Ok(QpOutcome::Optimal { x: x_opt, y_ineq, y_eq });
                }
                Some((k, _, _)) => {
                    working.remove(k);
                }
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m_in {
            if working.contains(&i) {
                continue;
            }
            let ap = a.row(i).dot(&p.transpose());
            if ap <= 1e-12 * (1.0 + p.amax()) {
                continue;
            }
            let slack = (rhs_all[i] - a.row(i).dot(&x.transpose())).max(0.0);
            let step = slack / ap;
            if step < alpha {
                alpha = step;
                blocking = Some(i);
            }
        }
        x.axpy(alpha, &p, 1.0);
        if let Some(i) = blocking {
            let pos = working.partition_point(|&w| w < i);
            working.insert(pos, i);
        }
    }
    Err(SolverError::Numerical(format!("active-set method exceeded {max_iter} iterations")))
}
