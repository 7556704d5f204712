//! Second-order cone relaxation of the branch-flow OPF.
//!
//! Decision vector layout: `[p_g; q_g; P; Q; v; l; v0]` with `N_g` inverter
//! entries and `N` line/bus entries each. The objective is the active power
//! drawn at the substation, `sum(r l) - sum(p_g) + sum(p_load)`; the load term
//! is constant and kept out of `c`.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus,
    SupportedConeT, ZeroConeT,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::feeder::FeederModel;

/// Index map of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub ng: usize,
}

impl Layout {
    pub fn pg(&self, k: usize) -> usize {
        k
    }
    pub fn qg(&self, k: usize) -> usize {
        self.ng + k
    }
    /// Active flow on the line into bus `b` (1-based).
    pub fn pf(&self, b: usize) -> usize {
        2 * self.ng + b - 1
    }
    pub fn qf(&self, b: usize) -> usize {
        2 * self.ng + self.n + b - 1
    }
    /// Squared voltage of bus `b`; bus 0 maps to `v0`.
    pub fn v(&self, b: usize) -> usize {
        if b == 0 {
            self.v0()
        } else {
            2 * self.ng + 2 * self.n + b - 1
        }
    }
    pub fn l(&self, b: usize) -> usize {
        2 * self.ng + 3 * self.n + b - 1
    }
    pub fn v0(&self) -> usize {
        2 * self.ng + 4 * self.n
    }
    pub fn nx(&self) -> usize {
        2 * self.ng + 4 * self.n + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    /// Relaxed current equation of the line into this bus.
    Relaxation(usize),
    /// Apparent-power limit of this inverter (index into the feeder's list).
    Inverter(usize),
}

/// `‖A x‖ ≤ bᵀx + f`, with `A` and `b` stored sparsely.
#[derive(Debug, Clone)]
pub struct Cone {
    pub kind: ConeKind,
    pub a: Vec<Vec<(usize, f64)>>,
    pub b: Vec<(usize, f64)>,
    pub f: f64,
}

impl Cone {
    pub fn ax(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.a.len(),
            self.a.iter().map(|row| row.iter().map(|&(j, v)| v * x[j]).sum::<f64>()),
        )
    }

    pub fn rhs(&self, x: &DVector<f64>) -> f64 {
        self.b.iter().map(|&(j, v)| v * x[j]).sum::<f64>() + self.f
    }

    /// `bᵀx + f − ‖Ax‖`, nonnegative when feasible.
    pub fn slack(&self, x: &DVector<f64>) -> f64 {
        self.rhs(x) - self.ax(x).norm()
    }

    pub fn dense_a(&self, nx: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.a.len(), nx);
        for (i, row) in self.a.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] += v;
            }
        }
        m
    }

    pub fn dense_b(&self, nx: usize) -> DVector<f64> {
        let mut b = DVector::zeros(nx);
        for &(j, v) in &self.b {
            b[j] += v;
        }
        b
    }

    /// Columns touched by `A`.
    pub fn support(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.a.iter().flatten().map(|&(j, _)| j).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// `min cᵀx  s.t.  A_e x = B_e θ + f_e,  A_i x ≤ B_i θ + f_i,  ‖A_m x‖ ≤ b_mᵀx + f_m`.
#[derive(Debug, Clone)]
pub struct ParametricSocp {
    pub layout: Layout,
    pub c: DVector<f64>,
    pub a_e: DMatrix<f64>,
    pub b_e: DMatrix<f64>,
    pub f_e: DVector<f64>,
    pub a_i: DMatrix<f64>,
    pub b_i: DMatrix<f64>,
    pub f_i: DVector<f64>,
    /// Relaxation cones for buses 1..N, then inverter cones.
    pub cones: Vec<Cone>,
    /// Length of θ.
    pub m: usize,
    csc: CscMatrix<f64>,
    cone_spec: Vec<SupportedConeT<f64>>,
}

/// Row offsets of the inequality block.
pub mod rows {
    /// `l_n ≤ lbar_n`
    pub fn current(n: usize, b: usize) -> usize {
        let _ = n;
        b - 1
    }
    pub fn v_upper(n: usize, b: usize) -> usize {
        n + b - 1
    }
    pub fn v_lower(n: usize, b: usize) -> usize {
        2 * n + b - 1
    }
    pub fn pg_upper(n: usize, k: usize) -> usize {
        3 * n + k
    }
    pub fn pg_lower(n: usize, ng: usize, k: usize) -> usize {
        3 * n + ng + k
    }
}

pub fn build_socp(f: &FeederModel) -> ParametricSocp {
    let n = f.n();
    let ng = f.ng();
    let lay = Layout { n, ng };
    let nx = lay.nx();
    let m = f.m();
    let fixed = f.fixed_v0();
    let n_e = 3 * n + usize::from(fixed.is_some());
    let n_i = 3 * n + 2 * ng;

    let mut c = DVector::zeros(nx);
    for k in 0..ng {
        c[lay.pg(k)] = -1.0;
    }
    for b in 1..=n {
        c[lay.l(b)] = f.r[b - 1];
    }

    let mut a_e = DMatrix::zeros(n_e, nx);
    let mut b_e = DMatrix::zeros(n_e, m);
    let mut f_e = DVector::zeros(n_e);
    for b in 1..=n {
        let (r, x) = (f.r[b - 1], f.x[b - 1]);
        let (rp, rq, rv) = (b - 1, n + b - 1, 2 * n + b - 1);
        // p_g - p_load = sum_children P_k - P_b + r l_b
        if let Some(k) = f.inverter_at(b) {
            a_e[(rp, lay.pg(k))] = 1.0;
            a_e[(rq, lay.qg(k))] = 1.0;
        }
        a_e[(rp, lay.pf(b))] = 1.0;
        a_e[(rq, lay.qf(b))] = 1.0;
        for &ch in f.children(b) {
            a_e[(rp, lay.pf(ch))] = -1.0;
            a_e[(rq, lay.qf(ch))] = -1.0;
        }
        a_e[(rp, lay.l(b))] = -r;
        a_e[(rq, lay.l(b))] = -x;
        b_e[(rp, b - 1)] = 1.0;
        b_e[(rq, n + b - 1)] = 1.0;
        // v_b = v_parent - 2(r P + x Q) + (r² + x²) l
        a_e[(rv, lay.v(b))] = 1.0;
        a_e[(rv, lay.v(f.parent[b - 1]))] = -1.0;
        a_e[(rv, lay.pf(b))] = 2.0 * r;
        a_e[(rv, lay.qf(b))] = 2.0 * x;
        a_e[(rv, lay.l(b))] = -(r * r + x * x);
    }
    if let Some(v0) = fixed {
        a_e[(3 * n, lay.v0())] = 1.0;
        f_e[3 * n] = v0;
    }

    let mut a_i = DMatrix::zeros(n_i, nx);
    let mut b_i = DMatrix::zeros(n_i, m);
    let mut f_i = DVector::zeros(n_i);
    for b in 1..=n {
        a_i[(rows::current(n, b), lay.l(b))] = 1.0;
        f_i[rows::current(n, b)] = f.lbar[b - 1];
        a_i[(rows::v_upper(n, b), lay.v(b))] = 1.0;
        f_i[rows::v_upper(n, b)] = f.vmax[b - 1];
        a_i[(rows::v_lower(n, b), lay.v(b))] = -1.0;
        f_i[rows::v_lower(n, b)] = -f.vmin[b - 1];
    }
    for k in 0..ng {
        a_i[(rows::pg_upper(n, k), lay.pg(k))] = 1.0;
        b_i[(rows::pg_upper(n, k), 2 * n + k)] = 1.0;
        a_i[(rows::pg_lower(n, ng, k), lay.pg(k))] = -1.0;
    }

    let mut cones = Vec::with_capacity(n + ng);
    for b in 1..=n {
        let vp = lay.v(f.parent[b - 1]);
        cones.push(Cone {
            kind: ConeKind::Relaxation(b),
            a: vec![
                vec![(lay.pf(b), 2.0)],
                vec![(lay.qf(b), 2.0)],
                vec![(vp, 1.0), (lay.l(b), -1.0)],
            ],
            b: vec![(vp, 1.0), (lay.l(b), 1.0)],
            f: 0.0,
        });
    }
    for (k, inv) in f.inverters.iter().enumerate() {
        cones.push(Cone {
            kind: ConeKind::Inverter(k),
            a: vec![vec![(lay.pg(k), 1.0)], vec![(lay.qg(k), 1.0)]],
            b: vec![],
            f: inv.sbar,
        });
    }

    let (csc, cone_spec) = clarabel_structure(&a_e, &a_i, &cones);
    ParametricSocp {
        layout: lay,
        c,
        a_e,
        b_e,
        f_e,
        a_i,
        b_i,
        f_i,
        cones,
        m,
        csc,
        cone_spec,
    }
}

/// Stacks `[A_e; A_i; -b_mᵀ; -A_m; ...]` in the solver's `Ax + s = b` form.
fn clarabel_structure(
    a_e: &DMatrix<f64>,
    a_i: &DMatrix<f64>,
    cones: &[Cone],
) -> (CscMatrix<f64>, Vec<SupportedConeT<f64>>) {
    let nx = a_e.ncols();
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nx];
    let mut row = 0;
    for a in [a_e, a_i] {
        for i in 0..a.nrows() {
            for j in 0..nx {
                if a[(i, j)] != 0.0 {
                    cols[j].push((row + i, a[(i, j)]));
                }
            }
        }
        row += a.nrows();
    }
    let mut spec = vec![ZeroConeT(a_e.nrows()), NonnegativeConeT(a_i.nrows())];
    for cone in cones {
        for &(j, v) in &cone.b {
            cols[j].push((row, -v));
        }
        for (k, r) in cone.a.iter().enumerate() {
            for &(j, v) in r {
                cols[j].push((row + 1 + k, -v));
            }
        }
        row += 1 + cone.a.len();
        spec.push(SecondOrderConeT(1 + cone.a.len()));
    }
    let mut colptr = vec![0];
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    for mut col in cols {
        col.sort_by_key(|e| e.0);
        for (r, v) in col {
            if rowval.len() > *colptr.last().unwrap() && *rowval.last().unwrap() == r {
                *nzval.last_mut().unwrap() += v;
            } else {
                rowval.push(r);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    (CscMatrix::new(row, nx, colptr, rowval, nzval), spec)
}

impl ParametricSocp {
    pub fn n_eq(&self) -> usize {
        self.a_e.nrows()
    }
    pub fn n_ineq(&self) -> usize {
        self.a_i.nrows()
    }
    pub fn nx(&self) -> usize {
        self.layout.nx()
    }

    pub fn instantiate(&self, theta: &DVector<f64>) -> Result<ConeProgram<'_>> {
        check_len("theta", self.m, theta.len())?;
        Ok(ConeProgram {
            ps: self,
            theta: theta.clone(),
            b_e: &self.b_e * theta + &self.f_e,
            b_i: &self.b_i * theta + &self.f_i,
        })
    }

    /// Constant part of the objective, `sum(p_load)`.
    pub fn objective_offset(&self, theta: &DVector<f64>) -> f64 {
        theta.rows(0, self.layout.n).sum()
    }
}

/// A parametric SOCP with its right-hand sides fixed by θ.
#[derive(Debug, Clone)]
pub struct ConeProgram<'a> {
    pub ps: &'a ParametricSocp,
    pub theta: DVector<f64>,
    pub b_e: DVector<f64>,
    pub b_i: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Bound on every KKT residual of the returned point.
    pub kkt_tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { kkt_tol: 1e-8, max_iter: 200, verbose: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    /// ‖∇ₓL‖∞ of the direct Lagrangian.
    pub stationarity: f64,
    pub equality: f64,
    /// Largest inequality violation.
    pub inequality: f64,
    /// Largest cone violation.
    pub cone: f64,
    /// Largest negative dual.
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [
            self.stationarity,
            self.equality,
            self.inequality,
            self.cone,
            self.dual,
            self.complementarity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Solved,
    AlmostSolved,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimalDualSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    /// First entry of each conic dual.
    pub nu: DVector<f64>,
    /// Substation active power, constant load term included.
    pub objective: f64,
    pub status: SolveStatus,
    pub residuals: KktResiduals,
    pub iterations: u32,
    pub solve_time: f64,
}

pub fn solve(cp: &ConeProgram<'_>, opts: &SolveOptions) -> Result<PrimalDualSolution> {
    let started = Instant::now();
    let ps = cp.ps;
    let nx = ps.nx();
    let p = CscMatrix::zeros((nx, nx));
    let mut b = Vec::with_capacity(ps.csc.m);
    b.extend(cp.b_e.iter());
    b.extend(cp.b_i.iter());
    for cone in &ps.cones {
        b.push(cone.f);
        b.extend(std::iter::repeat_n(0.0, cone.a.len()));
    }
    let tol = (opts.kkt_tol * 1e-2).clamp(1e-12, 1e-8);
    let settings = DefaultSettings {
        verbose: opts.verbose,
        max_iter: opts.max_iter,
        tol_gap_abs: tol,
        tol_gap_rel: tol,
        tol_feas: tol,
        tol_ktratio: tol,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, ps.c.as_slice(), &ps.csc, &b, &ps.cone_spec, settings)
        .map_err(|e| Error::Numerical(format!("solver setup: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Solved,
        SolverStatus::AlmostSolved => SolveStatus::AlmostSolved,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(Error::Infeasible)
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(Error::Unbounded)
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime => return Err(Error::MaxIterations),
        s => return Err(Error::Numerical(format!("solver status {s:?}"))),
    };
    let (n_e, n_i) = (ps.n_eq(), ps.n_ineq());
    let x = DVector::from_column_slice(&sol.x);
    let lambda = DVector::from_column_slice(&sol.z[..n_e]);
    let mu = DVector::from_column_slice(&sol.z[n_e..n_e + n_i]);
    let mut nu = DVector::zeros(ps.cones.len());
    let mut z1 = Vec::with_capacity(ps.cones.len());
    let mut off = n_e + n_i;
    for (k, cone) in ps.cones.iter().enumerate() {
        nu[k] = sol.z[off];
        z1.push(DVector::from_column_slice(&sol.z[off + 1..off + 1 + cone.a.len()]));
        off += 1 + cone.a.len();
    }
    let iterations = sol.iterations;
    let mut out = PrimalDualSolution {
        objective: ps.c.dot(&x) + ps.objective_offset(&cp.theta),
        x,
        lambda,
        mu,
        nu,
        status,
        residuals: KktResiduals::default(),
        iterations,
        solve_time: 0.0,
    };
    out.residuals = kkt_residuals(cp, &out, Some(&z1));
    if out.residuals.max() > opts.kkt_tol {
        if let Some(polished) = polish(cp, &out) {
            let r = kkt_residuals(cp, &polished, None);
            if r.max() < out.residuals.max() {
                out = PrimalDualSolution { residuals: r, ..polished };
            }
        }
    }
    out.solve_time = started.elapsed().as_secs_f64();
    if !(out.residuals.max() <= opts.kkt_tol) {
        return Err(Error::Numerical(format!(
            "KKT residuals above tolerance {:.1e}: {:?}",
            opts.kkt_tol, out.residuals
        )));
    }
    Ok(out)
}

/// Convenience: instantiate and solve.
pub fn solve_theta(
    ps: &ParametricSocp,
    theta: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<PrimalDualSolution> {
    solve(&ps.instantiate(theta)?, opts)
}

/// Refines an interior-point iterate by Newton steps on the KKT equations of
/// its active set. Interior-point iterates leave the conic dual tails slightly
/// misaligned with `A_m x`, which shows up as a stationarity error of the
/// direct Lagrangian; a couple of Newton steps remove it. Constraints whose
/// dual exceeds their slack (or whose slack is tiny) start out active; the set
/// is then corrected a few times, adding violated constraints and dropping
/// negative duals.
fn polish(cp: &ConeProgram<'_>, sol: &PrimalDualSolution) -> Option<PrimalDualSolution> {
    let ps = cp.ps;
    let x = &sol.x;
    let s_i = &cp.b_i - &ps.a_i * x;
    let mut act_i: Vec<usize> = (0..ps.n_ineq())
        .filter(|&j| sol.mu[j] > s_i[j] || s_i[j] < ACTIVE_TOL)
        .collect();
    // opposite bounds on one variable cannot both bind unless the box is
    // (numerically) flat; keep the tighter one
    let (n, ng) = (ps.layout.n, ps.layout.ng);
    let pairs = (1..=n)
        .map(|b| (rows::v_upper(n, b), rows::v_lower(n, b)))
        .chain((0..ng).map(|k| (rows::pg_upper(n, k), rows::pg_lower(n, ng, k))));
    for (u, l) in pairs {
        if act_i.contains(&u) && act_i.contains(&l) && s_i[u].max(s_i[l]) > ACTIVE_TOL {
            let drop = if s_i[u] > s_i[l] { u } else { l };
            act_i.retain(|&j| j != drop);
        }
    }
    let mut act_c: Vec<usize> = (0..ps.cones.len())
        .filter(|&k| {
            let c = &ps.cones[k];
            let scale = c.rhs(x).abs().max(1.0);
            let slack = c.slack(x);
            (sol.nu[k] > slack || slack < ACTIVE_TOL * scale) && c.ax(x).norm() > IDLE_TOL * scale
        })
        .collect();
    for _ in 0..6 {
        let cand = newton_refine(cp, sol, &act_i, &act_c)?;
        let s_i = &cp.b_i - &ps.a_i * &cand.x;
        let mut changed = false;
        for j in 0..ps.n_ineq() {
            let on = act_i.contains(&j);
            if on && cand.mu[j] < 0.0 {
                act_i.retain(|&v| v != j);
                changed = true;
            } else if !on && s_i[j] < -1e-13 {
                act_i.push(j);
                changed = true;
            }
        }
        for k in 0..ps.cones.len() {
            let on = act_c.contains(&k);
            if on && cand.nu[k] < 0.0 {
                act_c.retain(|&v| v != k);
                changed = true;
            } else if !on && ps.cones[k].slack(&cand.x) < -1e-13 {
                act_c.push(k);
                changed = true;
            }
        }
        if !changed {
            return Some(cand);
        }
        act_i.sort_unstable();
        act_c.sort_unstable();
    }
    None
}

/// Newton's method on stationarity, equalities, and the given active
/// inequalities and cones held with equality. Inactive duals are zeroed.
fn newton_refine(
    cp: &ConeProgram<'_>,
    sol: &PrimalDualSolution,
    act_i: &[usize],
    act_c: &[usize],
) -> Option<PrimalDualSolution> {
    let ps = cp.ps;
    let nx = ps.nx();
    let n_e = ps.n_eq();
    let mut x = sol.x.clone();
    let (na, nc) = (act_i.len(), act_c.len());
    let dim = nx + n_e + na + nc;
    let mut lam = sol.lambda.clone();
    let mut mu_a = DVector::from_iterator(na, act_i.iter().map(|&j| sol.mu[j]));
    let mut nu_a = DVector::from_iterator(nc, act_c.iter().map(|&k| sol.nu[k]));
    let residual = |x: &DVector<f64>, lam: &DVector<f64>, mu_a: &DVector<f64>, nu_a: &DVector<f64>| {
        let mut f = DVector::zeros(dim);
        let mut g = &ps.c + ps.a_e.tr_mul(lam);
        for (k, &j) in act_i.iter().enumerate() {
            g += ps.a_i.row(j).transpose() * mu_a[k];
        }
        for (k, &m) in act_c.iter().enumerate() {
            g += cone_gradient(&ps.cones[m], x, nx) * nu_a[k];
        }
        f.rows_mut(0, nx).copy_from(&g);
        f.rows_mut(nx, n_e).copy_from(&(&ps.a_e * x - &cp.b_e));
        for (k, &j) in act_i.iter().enumerate() {
            f[nx + n_e + k] = ps.a_i.row(j).dot(&x.transpose()) - cp.b_i[j];
        }
        for (k, &m) in act_c.iter().enumerate() {
            f[nx + n_e + na + k] = -ps.cones[m].slack(x);
        }
        f
    };
    let mut f = residual(&x, &lam, &mu_a, &nu_a);
    for _ in 0..6 {
        if f.amax() < 1e-14 {
            break;
        }
        let mut jac = DMatrix::zeros(dim, dim);
        for (k, &m) in act_c.iter().enumerate() {
            let (sup, h) = cone_hessian(&ps.cones[m], &x);
            for (a, &ja) in sup.iter().enumerate() {
                for (b, &jb) in sup.iter().enumerate() {
                    jac[(ja, jb)] += nu_a[k] * h[(a, b)];
                }
            }
            let g = cone_gradient(&ps.cones[m], &x, nx);
            let col = nx + n_e + na + k;
            jac.view_mut((0, col), (nx, 1)).copy_from(&g);
            jac.view_mut((col, 0), (1, nx)).copy_from(&g.transpose());
        }
        jac.view_mut((0, nx), (nx, n_e)).copy_from(&ps.a_e.transpose());
        jac.view_mut((nx, 0), (n_e, nx)).copy_from(&ps.a_e);
        for (k, &j) in act_i.iter().enumerate() {
            let col = nx + n_e + k;
            jac.view_mut((0, col), (nx, 1)).copy_from(&ps.a_i.row(j).transpose());
            jac.view_mut((col, 0), (1, nx)).copy_from(&ps.a_i.row(j));
        }
        let rhs = DMatrix::from_column_slice(dim, 1, (-&f).as_slice());
        let step = match crate::linalg::lu_solve(&jac, &rhs, 1e-13) {
            Some(s) => s.column(0).into_owned(),
            None => crate::linalg::lstsq(&jac, &rhs.column(0).into_owned()).ok()?,
        };
        let x1 = &x + step.rows(0, nx);
        let lam1 = &lam + step.rows(nx, n_e);
        let mu1 = &mu_a + step.rows(nx + n_e, na);
        let nu1 = &nu_a + step.rows(nx + n_e + na, nc);
        let f1 = residual(&x1, &lam1, &mu1, &nu1);
        if !(f1.amax() < f.amax()) {
            break;
        }
        (x, lam, mu_a, nu_a, f) = (x1, lam1, mu1, nu1, f1);
    }
    let mut mu = DVector::zeros(ps.n_ineq());
    let mut nu = DVector::zeros(ps.cones.len());
    for (k, &j) in act_i.iter().enumerate() {
        mu[j] = mu_a[k];
    }
    for (k, &m) in act_c.iter().enumerate() {
        nu[m] = nu_a[k];
    }
    Some(PrimalDualSolution {
        objective: ps.c.dot(&x) + ps.objective_offset(&cp.theta),
        x,
        lambda: lam,
        mu,
        nu,
        ..sol.clone()
    })
}

/// Hessian of `‖A_m x‖` restricted to the columns `A_m` touches:
/// `(AᵀA − AᵀAx xᵀAᵀA / ‖Ax‖²) / ‖Ax‖`.
pub fn cone_hessian(cone: &Cone, x: &DVector<f64>) -> (Vec<usize>, DMatrix<f64>) {
    let sup = cone.support();
    let mut a = DMatrix::<f64>::zeros(cone.a.len(), sup.len());
    for (i, row) in cone.a.iter().enumerate() {
        for &(j, v) in row {
            let c = sup.binary_search(&j).unwrap();
            a[(i, c)] += v;
        }
    }
    let ax = cone.ax(x);
    let norm = ax.norm();
    let u = &ax / norm;
    let proj = DMatrix::<f64>::identity(ax.len(), ax.len()) - &u * u.transpose();
    (sup, a.transpose() * proj * a / norm)
}

/// `A_mᵀA_m x / ‖A_m x‖ − b_m`, the gradient of the cone constraint.
pub fn cone_gradient(cone: &Cone, x: &DVector<f64>, nx: usize) -> DVector<f64> {
    let ax = cone.ax(x);
    let norm = ax.norm();
    let mut g = DVector::zeros(nx);
    for (i, row) in cone.a.iter().enumerate() {
        for &(j, v) in row {
            g[j] += v * ax[i] / norm;
        }
    }
    for &(j, v) in &cone.b {
        g[j] -= v;
    }
    g
}

/// Slack below which a constraint counts as binding when refining.
const ACTIVE_TOL: f64 = 1e-7;

/// Cones whose `‖A x‖` is this small relative to `f + ‖b‖` are treated as
/// non-differentiable points.
pub const IDLE_TOL: f64 = 1e-9;

/// KKT residuals of the direct (non-conic) Lagrangian. `z1` supplies the conic
/// dual tails, used only where `‖A_m x‖` vanishes.
pub fn kkt_residuals(
    cp: &ConeProgram<'_>,
    sol: &PrimalDualSolution,
    z1: Option<&[DVector<f64>]>,
) -> KktResiduals {
    let ps = cp.ps;
    let x = &sol.x;
    let mut grad = ps.c.clone();
    grad += ps.a_e.tr_mul(&sol.lambda);
    grad += ps.a_i.tr_mul(&sol.mu);
    let mut cone_viol = 0.0f64;
    let mut comp = 0.0f64;
    for (k, cone) in ps.cones.iter().enumerate() {
        let ax = cone.ax(x);
        let norm = ax.norm();
        let nu = sol.nu[k];
        for &(j, v) in &cone.b {
            grad[j] -= nu * v;
        }
        let scale = cone.rhs(x).abs().max(1.0);
        let dir: Option<DVector<f64>> = if norm > IDLE_TOL * scale {
            Some(ax * (nu / norm))
        } else {
            z1.map(|z| -&z[k])
        };
        if let Some(d) = dir {
            for (i, row) in cone.a.iter().enumerate() {
                for &(j, v) in row {
                    grad[j] += v * d[i];
                }
            }
        }
        let slack = cone.rhs(x) - norm;
        cone_viol = cone_viol.max(-slack);
        comp = comp.max((nu * slack).abs());
    }
    let eq = (&ps.a_e * x - &cp.b_e).amax();
    let s_i = &cp.b_i - &ps.a_i * x;
    let ineq = s_i.iter().fold(0.0f64, |a, &s| a.max(-s));
    for (j, &s) in s_i.iter().enumerate() {
        comp = comp.max((sol.mu[j] * s).abs());
    }
    let dual = sol
        .mu
        .iter()
        .chain(sol.nu.iter())
        .fold(0.0f64, |a, &d| a.max(-d));
    KktResiduals {
        stationarity: grad.amax(),
        equality: eq,
        inequality: ineq,
        cone: cone_viol,
        dual,
        complementarity: comp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactnessReport {
    /// `(l + v_parent) − ‖[2P; 2Q; v_parent − l]‖` per bus.
    pub gaps: Vec<f64>,
    /// Gaps divided by `l + v_parent`.
    pub rel_gaps: Vec<f64>,
    pub max_rel_gap: f64,
    pub exact: bool,
}

pub const EXACT_TOL: f64 = 1e-6;

pub fn check_exactness(f: &FeederModel, x: &DVector<f64>, exact_tol: f64) -> ExactnessReport {
    let lay = Layout { n: f.n(), ng: f.ng() };
    let mut gaps = Vec::with_capacity(f.n());
    let mut rel = Vec::with_capacity(f.n());
    for b in 1..=f.n() {
        let vp = x[lay.v(f.parent[b - 1])];
        let l = x[lay.l(b)];
        let (p, q) = (x[lay.pf(b)], x[lay.qf(b)]);
        let norm = (4.0 * p * p + 4.0 * q * q + (vp - l).powi(2)).sqrt();
        let gap = (l + vp) - norm;
        gaps.push(gap);
        rel.push(gap / (l + vp).abs().max(f64::MIN_POSITIVE));
    }
    let max_rel_gap = rel.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
    ExactnessReport {
        gaps,
        rel_gaps: rel,
        max_rel_gap,
        exact: max_rel_gap <= exact_tol,
    }
}
