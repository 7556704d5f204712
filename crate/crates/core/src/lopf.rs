//! Linearized OPF baseline: affine voltage model `v = Rp + Xq + v0·1`,
//! quadratic loss surrogate and a 32-sided inverter capability polytope.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{unpack_theta, FeederModel};

/// Number of half-plane pairs approximating each inverter's capability disk.
pub const POLY_PAIRS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGridModel {
    /// `R_nm = 2 Σ r` over lines shared by the paths of `n` and `m`.
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub v0: f64,
}

pub fn build_rx(f: &FeederModel, v0: f64) -> LinearGridModel {
    let n = f.n();
    let mut on_path = vec![vec![false; n]; n];
    for b in 1..=n {
        for l in f.path(b) {
            on_path[b - 1][l - 1] = true;
        }
    }
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (mut sr, mut sx) = (0.0, 0.0);
            for l in 0..n {
                if on_path[i][l] && on_path[j][l] {
                    sr += f.r[l];
                    sx += f.x[l];
                }
            }
            r[(i, j)] = 2.0 * sr;
            r[(j, i)] = 2.0 * sr;
            x[(i, j)] = 2.0 * sx;
            x[(j, i)] = 2.0 * sx;
        }
    }
    LinearGridModel { r, x, v0 }
}

impl LinearGridModel {
    pub fn voltages(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        (&self.r * p + &self.x * q).add_scalar(self.v0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LopfOptions {
    /// Scale the loss term by ½ (the usual DistFlow loss approximation).
    pub half_loss: bool,
    pub v0: f64,
    pub tol: f64,
}

impl Default for LopfOptions {
    fn default() -> Self {
        LopfOptions {
            half_loss: false,
            v0: 1.0,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LopfSolution {
    pub pg: DVector<f64>,
    pub qg: DVector<f64>,
    /// Squared voltages of the linear model at the solution, buses 1..=N.
    pub v: DVector<f64>,
    pub objective: f64,
    /// Max of the stationarity, primal and complementarity residuals.
    pub kkt_residual: f64,
}

/// Dense to CSC, keeping only the upper triangle when `upper` is set.
fn to_csc(a: &DMatrix<f64>, upper: bool) -> CscMatrix<f64> {
    let mut colptr = vec![0];
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    for j in 0..a.ncols() {
        let end = if upper { j + 1 } else { a.nrows() };
        for i in 0..end {
            if a[(i, j)] != 0.0 {
                rowval.push(i);
                nzval.push(a[(i, j)]);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(a.nrows(), a.ncols(), colptr, rowval, nzval)
}

/// Solves the linearized OPF for grid conditions `theta`.
pub fn solve_lopf(
    f: &FeederModel,
    model: &LinearGridModel,
    theta: &DVector<f64>,
    opts: &LopfOptions,
) -> Result<LopfSolution> {
    let gc = unpack_theta(f, theta)?;
    let (n, ng) = (f.n(), f.ng());
    let w = if opts.half_loss { 0.5 } else { 1.0 };
    let mut cmat = DMatrix::zeros(n, ng);
    for (k, inv) in f.inverters.iter().enumerate() {
        cmat[(inv.bus - 1, k)] = 1.0;
    }
    let rc = &model.r * &cmat;
    let xc = &model.x * &cmat;
    let crc = cmat.transpose() * &rc;

    // objective −1ᵀp + w (pᵀRp + qᵀRq), p = C p_g − p_load, q = C q_g − q_load
    let nv = 2 * ng;
    let mut hess = DMatrix::zeros(nv, nv);
    hess.view_mut((0, 0), (ng, ng)).copy_from(&(&crc * (2.0 * w)));
    hess.view_mut((ng, ng), (ng, ng)).copy_from(&(&crc * (2.0 * w)));
    let mut lin = DVector::zeros(nv);
    lin.rows_mut(0, ng)
        .copy_from(&(-(DVector::from_element(ng, 1.0)) - rc.tr_mul(&gc.p_load) * (2.0 * w)));
    lin.rows_mut(ng, ng).copy_from(&(-(rc.tr_mul(&gc.q_load)) * (2.0 * w)));

    let n_rows = 2 * n + 2 * ng + 2 * POLY_PAIRS * ng;
    let mut a = DMatrix::zeros(n_rows, nv);
    let mut b = DVector::zeros(n_rows);
    let v_load = model.voltages(&(-&gc.p_load), &(-&gc.q_load));
    for i in 0..n {
        for k in 0..ng {
            a[(i, k)] = rc[(i, k)];
            a[(i, ng + k)] = xc[(i, k)];
            a[(n + i, k)] = -rc[(i, k)];
            a[(n + i, ng + k)] = -xc[(i, k)];
        }
        b[i] = f.vmax[i] - v_load[i];
        b[n + i] = v_load[i] - f.vmin[i];
    }
    let mut row = 2 * n;
    for k in 0..ng {
        a[(row, k)] = 1.0;
        b[row] = gc.pg_cap[k];
        a[(row + 1, k)] = -1.0;
        row += 2;
    }
    for (k, inv) in f.inverters.iter().enumerate() {
        for j in 1..=POLY_PAIRS {
            let ang = j as f64 * std::f64::consts::PI / POLY_PAIRS as f64;
            let (s, c) = ang.sin_cos();
            for sign in [1.0, -1.0] {
                a[(row, k)] = sign * c;
                a[(row, ng + k)] = sign * s;
                b[row] = inv.sbar;
                row += 1;
            }
        }
    }

    let tol = opts.tol.clamp(1e-12, 1e-8);
    let settings = DefaultSettings {
        verbose: false,
        tol_gap_abs: tol,
        tol_gap_rel: tol,
        tol_feas: tol,
        tol_ktratio: tol,
        ..DefaultSettings::default()
    };
    let cones: Vec<SupportedConeT<f64>> = vec![NonnegativeConeT(n_rows)];
    let mut solver = DefaultSolver::new(
        &to_csc(&hess, true),
        lin.as_slice(),
        &to_csc(&a, false),
        b.as_slice(),
        &cones,
        settings,
    )
    .map_err(|e| Error::Numerical(format!("solver setup: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => return Err(Error::Infeasible),
        SolverStatus::MaxIterations | SolverStatus::MaxTime => return Err(Error::MaxIterations),
        s => return Err(Error::Numerical(format!("solver status {s:?}"))),
    }
    let xv = DVector::from_column_slice(&sol.x);
    let z = DVector::from_column_slice(&sol.z);
    let slack = &b - &a * &xv;
    let stat = (&hess * &xv + &lin + a.tr_mul(&z)).amax();
    let prim = slack.iter().fold(0.0f64, |m, &s| m.max(-s));
    let comp = slack.component_mul(&z).amax();
    let dual = z.iter().fold(0.0f64, |m, &v| m.max(-v));

    let pg = xv.rows(0, ng).into_owned();
    let qg = xv.rows(ng, ng).into_owned();
    let p = &cmat * &pg - &gc.p_load;
    let q = &cmat * &qg - &gc.q_load;
    let objective = -p.sum() + w * (p.dot(&(&model.r * &p)) + q.dot(&(&model.r * &q)));
    Ok(LopfSolution {
        v: model.voltages(&p, &q),
        pg,
        qg,
        objective,
        kkt_residual: stat.max(prim).max(comp).max(dual),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acpf::{net_injections, solve_pf, PfOptions};
    use crate::feeder::{fixtures, gen_scenarios, ScenarioConfig};
    use crate::linalg::Cholesky;
    use crate::opf::{build_socp, solve_theta, SolveOptions};

    #[test]
    fn path_matrices() {
        let f = fixtures::chain(1, 0.03, 0.05, &[]);
        let m = build_rx(&f, 1.0);
        assert_eq!(m.r, DMatrix::from_element(1, 1, 0.06));
        let file = {
            let mut ff = fixtures::chain(2, 0.01, 0.02, &[]).to_file();
            ff.lines[1].r = 0.04;
            ff
        };
        let f = FeederModel::from_file(&file).unwrap();
        let m = build_rx(&f, 1.0);
        let want = DMatrix::from_row_slice(2, 2, &[0.01, 0.01, 0.01, 0.05]) * 2.0;
        assert!((m.r - want).amax() < 1e-15);
        for f in [fixtures::feeder13(), fixtures::feeder123()] {
            let m = build_rx(&f, 1.0);
            assert_eq!(m.r, m.r.transpose());
            assert_eq!(m.x, m.x.transpose());
            assert!(Cholesky::new(&m.r).is_some() && Cholesky::new(&m.x).is_some());
        }
    }

    #[test]
    fn linear_voltages_match_power_flow_at_light_load() {
        let f = fixtures::feeder13();
        let m = build_rx(&f, 1.0);
        let set = gen_scenarios(&f, &ScenarioConfig::default(), 1).unwrap();
        let gc = &set.scenarios[600].conditions;
        let p = -&gc.p_load * 0.01;
        let q = -&gc.q_load * 0.01;
        let pf = solve_pf(&f, &p, &q, 1.0, &PfOptions::default()).unwrap();
        let lin = m.voltages(&p, &q);
        for b in 1..=f.n() {
            assert!((pf.v[b] - lin[b - 1]).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_conditions_give_zero_setpoints() {
        let f = fixtures::feeder13();
        let m = build_rx(&f, 1.0);
        let s = solve_lopf(&f, &m, &DVector::zeros(f.m()), &LopfOptions::default()).unwrap();
        assert!(s.pg.amax() < 1e-8 && s.qg.amax() < 1e-8, "{s:?}");
    }

    #[test]
    fn polytope_holds_and_kkt_is_tight() {
        let f = fixtures::feeder13();
        let m = build_rx(&f, 1.0);
        let set = gen_scenarios(&f, &ScenarioConfig::default(), 2).unwrap();
        let outer = (std::f64::consts::PI / 32.0).cos();
        for half_loss in [false, true] {
            let opts = LopfOptions { half_loss, ..LopfOptions::default() };
            for s in set.scenarios.iter().step_by(40) {
                let sol = solve_lopf(&f, &m, &s.conditions.theta(), &opts).unwrap();
                assert!(sol.kkt_residual <= 1e-8, "t={} {}", s.t, sol.kkt_residual);
                for (k, inv) in f.inverters.iter().enumerate() {
                    let (p, q) = (sol.pg[k], sol.qg[k]);
                    assert!(p * p + q * q <= (inv.sbar / outer).powi(2) + 1e-9);
                    for j in 1..=POLY_PAIRS {
                        let ang = j as f64 * std::f64::consts::PI / 16.0;
                        assert!((p * ang.cos() + q * ang.sin()).abs() <= inv.sbar + 1e-9);
                    }
                    assert!(p >= -1e-9 && p <= s.conditions.pg_cap[k] + 1e-9);
                }
                assert!(sol.v.iter().zip(&f.vmax).all(|(v, hi)| *v <= hi + 1e-9));
                assert!(sol.v.iter().zip(&f.vmin).all(|(v, lo)| *v >= lo - 1e-9));
            }
        }
    }

    /// Side-by-side with the relaxation at light load; a sanity band only.
    #[test]
    fn close_to_relaxation_at_light_load() {
        let f = fixtures::feeder13();
        let m = build_rx(&f, 1.0);
        let ps = build_socp(&f);
        let set = gen_scenarios(&f, &ScenarioConfig::default(), 4).unwrap();
        let lay = ps.layout;
        let opts = LopfOptions { half_loss: true, ..LopfOptions::default() };
        let scale: f64 = f.inverters.iter().map(|i| i.sbar).sum();
        for s in set.scenarios.iter().step_by(60) {
            let mut gc = s.conditions.clone();
            gc.p_load *= 0.3;
            gc.q_load *= 0.3;
            let th = gc.theta();
            let lo = solve_lopf(&f, &m, &th, &opts).unwrap();
            let ex = solve_theta(&ps, &th, &SolveOptions::default()).unwrap();
            let mut gap = 0.0;
            for k in 0..f.ng() {
                gap += (lo.pg[k] - ex.x[lay.pg(k)]).abs() + (lo.qg[k] - ex.x[lay.qg(k)]).abs();
            }
            assert!(gap <= 0.05 * scale, "t={} gap {gap} scale {scale}", s.t);
            let (pi, qi) = net_injections(&f, &th, &lo.pg, &lo.qg).unwrap();
            assert!(solve_pf(&f, &pi, &qi, 1.0, &PfOptions::default()).is_ok());
        }
    }
}
