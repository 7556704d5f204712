//! Minimizer Jacobian ∂x/∂θ of the parametric SOCP via the linearized KKT
//! system `S dδ = U dθ`, with `dδ = (dx, dλ, dμ, dν)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::opf::{cone_gradient, cone_hessian, ConeKind, ConeProgram, PrimalDualSolution, IDLE_TOL};

/// How inverter cones sitting at the origin (`p_g = q_g = 0`) enter `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IdleCone {
    /// Leave them out; their dual stays zero under small perturbations.
    #[default]
    Drop,
    /// Keep them in the smooth form `p² + q² ≤ s̄²` with zero dual.
    Quadratic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityOptions {
    /// Binding constraints need duals at least this large.
    pub strict_tol: f64,
    /// Slack at or below which a constraint counts as binding.
    pub slack_tol: f64,
    /// Relative singular-value cutoff; `None` uses `max(dim)·eps`.
    pub rank_tol: Option<f64>,
    /// Largest dx entry allowed in a null-space basis vector.
    pub null_tol_x: f64,
    /// Keep degenerate samples (strict complementarity fails) without
    /// gradients instead of attempting them.
    pub skip_degenerate: bool,
    pub idle_cone: IdleCone,
    /// Try a pivoted LU before falling back to the SVD.
    pub lu_fast_path: bool,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            strict_tol: 1e-7,
            slack_tol: 1e-7,
            rank_tol: None,
            null_tol_x: 1e-6,
            skip_degenerate: true,
            idle_cone: IdleCone::Drop,
            lu_fast_path: true,
        }
    }
}

/// One constraint of the program, as referenced by diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    Inequality(usize),
    Cone(usize),
}

/// Assembled linearized KKT system.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub s: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub nx: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    /// Cones with a row/column in `S`, in order.
    pub cones: Vec<usize>,
    /// Idle inverter cones left out.
    pub dropped: Vec<usize>,
    /// Idle inverter cones kept in quadratic form.
    pub quadratic: Vec<usize>,
    /// Binding constraints with duals below `strict_tol`, and nonbinding ones
    /// with duals above it.
    pub degenerate: Vec<Constraint>,
}

impl KktSystem {
    pub fn dim(&self) -> usize {
        self.s.nrows()
    }
    pub fn dx(&self) -> std::ops::Range<usize> {
        0..self.nx
    }
    pub fn dlambda(&self) -> std::ops::Range<usize> {
        self.nx..self.nx + self.n_eq
    }
    pub fn dmu(&self) -> std::ops::Range<usize> {
        let o = self.nx + self.n_eq;
        o..o + self.n_ineq
    }
    pub fn dnu(&self) -> std::ops::Range<usize> {
        let o = self.nx + self.n_eq + self.n_ineq;
        o..o + self.cones.len()
    }
    /// Rows of the linearized stationarity condition.
    pub fn stationarity_rows(&self) -> std::ops::Range<usize> {
        self.n_eq..self.n_eq + self.nx
    }
    /// Rows of the linearized cone slackness conditions.
    pub fn cone_rows(&self) -> std::ops::Range<usize> {
        let o = self.n_eq + self.nx + self.n_ineq;
        o..o + self.cones.len()
    }
}

fn idle(cp: &ConeProgram<'_>, k: usize, x: &DVector<f64>) -> bool {
    let c = &cp.ps.cones[k];
    c.ax(x).norm() <= IDLE_TOL * c.rhs(x).abs().max(1.0)
}

/// Constraints violating strict complementarity, in the sense that binding
/// and having a dual of at least `strict_tol` disagree.
pub fn degenerate_constraints(
    cp: &ConeProgram<'_>,
    sol: &PrimalDualSolution,
    strict_tol: f64,
    slack_tol: f64,
) -> Vec<Constraint> {
    let ps = cp.ps;
    let s_i = &cp.b_i - &ps.a_i * &sol.x;
    let mut out = Vec::new();
    for j in 0..ps.n_ineq() {
        if (s_i[j] <= slack_tol) != (sol.mu[j] >= strict_tol) {
            out.push(Constraint::Inequality(j));
        }
    }
    for (k, c) in ps.cones.iter().enumerate() {
        if (c.slack(&sol.x) <= slack_tol) != (sol.nu[k] >= strict_tol) {
            out.push(Constraint::Cone(k));
        }
    }
    out
}

pub fn strict_complementarity(
    cp: &ConeProgram<'_>,
    sol: &PrimalDualSolution,
    strict_tol: f64,
    slack_tol: f64,
) -> bool {
    degenerate_constraints(cp, sol, strict_tol, slack_tol).is_empty()
}

/// Assembles `S` and `U` at a solved instance.
pub fn build_su(
    cp: &ConeProgram<'_>,
    sol: &PrimalDualSolution,
    opts: &SensitivityOptions,
) -> Result<KktSystem> {
    let ps = cp.ps;
    let x = &sol.x;
    let (nx, n_e, n_i) = (ps.nx(), ps.n_eq(), ps.n_ineq());
    let mut cones = Vec::new();
    let mut dropped = Vec::new();
    let mut quadratic = Vec::new();
    for (k, c) in ps.cones.iter().enumerate() {
        if !idle(cp, k, x) {
            cones.push(k);
            continue;
        }
        match c.kind {
            ConeKind::Relaxation(b) => {
                return Err(Error::Inexact(format!(
                    "relaxation cone of bus {b} is at the origin"
                )))
            }
            ConeKind::Inverter(_) => match opts.idle_cone {
                IdleCone::Drop => dropped.push(k),
                IdleCone::Quadratic => {
                    cones.push(k);
                    quadratic.push(k);
                }
            },
        }
    }
    let nc = cones.len();
    let dim = nx + n_e + n_i + nc;
    // rows: [equalities; stationarity; inequality slackness; cone slackness]
    // columns: [dx; dλ; dμ; dν]
    let (r_x, r_m, r_n) = (n_e, n_e + nx, n_e + nx + n_i);
    let (c_l, c_m, c_n) = (nx, nx + n_e, nx + n_e + n_i);
    let mut s = DMatrix::zeros(dim, dim);
    let mut u = DMatrix::zeros(dim, ps.m);

    // linearized equalities
    s.view_mut((0, 0), (n_e, nx)).copy_from(&ps.a_e);
    u.view_mut((0, 0), (n_e, ps.m)).copy_from(&ps.b_e);
    // stationarity
    s.view_mut((r_x, c_l), (nx, n_e)).copy_from(&ps.a_e.transpose());
    s.view_mut((r_x, c_m), (nx, n_i)).copy_from(&ps.a_i.transpose());
    // complementarity of the inequalities
    let slack_i = &cp.b_i - &ps.a_i * x;
    for j in 0..n_i {
        let mu = sol.mu[j];
        if mu != 0.0 {
            for c in 0..nx {
                s[(r_m + j, c)] = mu * ps.a_i[(j, c)];
            }
            for c in 0..ps.m {
                u[(r_m + j, c)] = mu * ps.b_i[(j, c)];
            }
        }
        s[(r_m + j, c_m + j)] = -slack_i[j];
    }
    for (col, &k) in cones.iter().enumerate() {
        let cone = &ps.cones[k];
        let nu = sol.nu[k];
        let (grad, value) = if quadratic.contains(&k) {
            // p² + q² − s̄²: gradient 2A'Ax, no curvature term since ν = 0
            let ax = cone.ax(x);
            let mut g = DVector::zeros(nx);
            for (i, row) in cone.a.iter().enumerate() {
                for &(j, v) in row {
                    g[j] += 2.0 * v * ax[i];
                }
            }
            (g, ax.norm_squared() - cone.f * cone.f)
        } else {
            if nu != 0.0 {
                let (sup, h) = cone_hessian(cone, x);
                for (a, &ja) in sup.iter().enumerate() {
                    for (b, &jb) in sup.iter().enumerate() {
                        s[(r_x + ja, jb)] += nu * h[(a, b)];
                    }
                }
            }
            (cone_gradient(cone, x, nx), -cone.slack(x))
        };
        for j in 0..nx {
            s[(r_x + j, c_n + col)] = grad[j];
            s[(r_n + col, j)] = nu * grad[j];
        }
        s[(r_n + col, c_n + col)] = value;
    }
    let degenerate = degenerate_constraints(cp, sol, opts.strict_tol, opts.slack_tol);
    Ok(KktSystem {
        s,
        u,
        nx,
        n_eq: n_e,
        n_ineq: n_i,
        cones,
        dropped,
        quadratic,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Existence {
    pub exists: bool,
    /// Largest `‖dx‖_∞` over the null-space basis.
    pub residual: f64,
    pub null_dim: usize,
    pub rank: usize,
}

fn cutoff(k: &KktSystem, rank_tol: Option<f64>, smax: f64) -> f64 {
    rank_tol.unwrap_or(k.dim() as f64 * f64::EPSILON) * smax
}

fn existence_from_svd(k: &KktSystem, svd: &linalg::SvdParts, rank_tol: Option<f64>, tol_x: f64) -> Existence {
    let smax = svd.s.get(0).copied().unwrap_or(0.0);
    let cut = cutoff(k, rank_tol, smax);
    let rank = svd.s.iter().filter(|&&s| s > cut).count();
    let mut residual = 0.0f64;
    for c in rank..k.dim() {
        let dx = svd.v.view((0, c), (k.nx, 1));
        residual = residual.max(dx.amax());
    }
    Existence {
        exists: residual <= tol_x,
        residual,
        null_dim: k.dim() - rank,
        rank,
    }
}

/// Null-space test: the Jacobian exists when no null vector of `S` moves `x`.
pub fn check_existence(k: &KktSystem, rank_tol: Option<f64>, tol_x: f64) -> Result<Existence> {
    let svd = linalg::svd(&k.s)?;
    Ok(existence_from_svd(k, &svd, rank_tol, tol_x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lu,
    Svd,
}

#[derive(Debug, Clone)]
pub struct SensitivityRecord {
    /// `nx × M`, columns in θ order.
    pub jac: DMatrix<f64>,
    pub existence: Existence,
    pub method: Method,
}

/// dx rows of `S⁺U`. Tries an LU solve first when allowed; a well-conditioned
/// LU means `S` is invertible, so the null space is empty and `S⁺ = S⁻¹`.
pub fn solve_sensitivities(k: &KktSystem, opts: &SensitivityOptions) -> Result<SensitivityRecord> {
    let dim = k.dim();
    if opts.lu_fast_path {
        if let Some(sol) = linalg::lu_solve(&k.s, &k.u, 1e-10) {
            let resid = (linalg::matmul(&k.s, &sol) - &k.u).amax();
            if resid <= 1e-9 * (1.0 + k.u.amax()) {
                return Ok(SensitivityRecord {
                    jac: sol.rows(0, k.nx).into_owned(),
                    existence: Existence {
                        exists: true,
                        residual: 0.0,
                        null_dim: 0,
                        rank: dim,
                    },
                    method: Method::Lu,
                });
            }
        }
    }
    let svd = linalg::svd(&k.s)?;
    let ex = existence_from_svd(k, &svd, opts.rank_tol, opts.null_tol_x);
    if !ex.exists {
        return Err(Error::NoSensitivity(ex.residual));
    }
    // S⁺U = V diag(1/s) Uᵀ U_rhs over the numerical range; only the dx rows of V
    // are needed.
    let utu = svd.u.columns(0, ex.rank).tr_mul(&k.u);
    let mut scaled = utu;
    for i in 0..ex.rank {
        let inv = 1.0 / svd.s[i];
        scaled.row_mut(i).scale_mut(inv);
    }
    let jac = svd.v.view((0, 0), (k.nx, ex.rank)) * scaled;
    Ok(SensitivityRecord {
        jac,
        existence: ex,
        method: Method::Svd,
    })
}

/// Full pipeline for one solved instance. `Ok(None)` means the sample has no
/// usable gradient: it is degenerate (with `skip_degenerate`), or the
/// null-space test failed.
pub fn sensitivities(
    cp: &ConeProgram<'_>,
    sol: &PrimalDualSolution,
    opts: &SensitivityOptions,
) -> Result<Option<SensitivityRecord>> {
    let k = build_su(cp, sol, opts)?;
    if opts.skip_degenerate && !k.degenerate.is_empty() {
        log::debug!("degenerate sample: {:?}", k.degenerate);
        return Ok(None);
    }
    match solve_sensitivities(&k, opts) {
        Ok(r) => Ok(Some(r)),
        Err(Error::NoSensitivity(r)) => {
            log::debug!("no sensitivity, null-space dx residual {r:.2e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{fixtures, gen_scenarios, ScenarioConfig};
    use crate::opf::{build_socp, solve, SolveOptions};

    fn tight() -> SolveOptions {
        SolveOptions {
            kkt_tol: 1e-10,
            ..Default::default()
        }
    }

    #[test]
    fn single_bus_closed_form() {
        let (r, x) = (0.02, 0.04);
        let f = fixtures::chain(1, r, x, &[(1, 0.8)]);
        let ps = build_socp(&f);
        let theta = DVector::from_vec(vec![0.5, 0.2, 0.3]);
        let cp = ps.instantiate(&theta).unwrap();
        let sol = solve(&cp, &tight()).unwrap();
        let rec = sensitivities(&cp, &sol, &Default::default()).unwrap().unwrap();
        let qg = ps.layout.qg(0);
        let pg = ps.layout.pg(0);
        // q_g = q_load + x l with l independent of q_load
        assert!((rec.jac[(qg, 1)] - 1.0).abs() < 1e-8);
        // p_g = cap, l = l(cap − p_load): ∂q_g/∂p_load = x ∂l/∂p_load
        let lfun = |pl: f64| {
            let p = 0.3 - pl;
            let b = 1.0 + 2.0 * r * p;
            (b - (b * b - 4.0 * r * r * p * p).sqrt()) / (2.0 * r * r)
        };
        let h = 1e-6;
        let dl = (lfun(0.5 + h) - lfun(0.5 - h)) / (2.0 * h);
        assert!((rec.jac[(qg, 0)] - x * dl).abs() < 1e-7);
        assert!((rec.jac[(pg, 2)] - 1.0).abs() < 1e-8);
        assert!(rec.jac[(pg, 0)].abs() < 1e-8);
    }

    #[test]
    fn s21_matches_dense_formula() {
        let f = fixtures::chain(1, 0.02, 0.04, &[(1, 0.3)]);
        let ps = build_socp(&f);
        // tight inverter so both cones are active
        let theta = DVector::from_vec(vec![0.5, 0.3, 0.3]);
        let cp = ps.instantiate(&theta).unwrap();
        let sol = solve(&cp, &tight()).unwrap();
        assert!(sol.nu.iter().all(|&v| v > 1e-6), "{:?}", sol.nu);
        let k = build_su(&cp, &sol, &Default::default()).unwrap();
        let nx = ps.nx();
        let mut want = DMatrix::zeros(nx, nx);
        for (m, cone) in ps.cones.iter().enumerate() {
            let a = cone.dense_a(nx);
            let ata = a.transpose() * &a;
            let n = (&a * &sol.x).norm();
            let w = &ata * &sol.x;
            want += (&ata / n - &w * w.transpose() / n.powi(3)) * sol.nu[m];
        }
        let got = k.s.view((k.stationarity_rows().start, 0), (nx, nx));
        assert!((got - &want).amax() < 1e-12);
        // S41 = diag(ν) S24ᵀ
        let s24 = k.s.view((k.stationarity_rows().start, k.dnu().start), (nx, k.cones.len())).into_owned();
        let s41 = k.s.view((k.cone_rows().start, 0), (k.cones.len(), nx)).into_owned();
        let nu = DVector::from_iterator(k.cones.len(), k.cones.iter().map(|&m| sol.nu[m]));
        assert!((s41 - DMatrix::from_diagonal(&nu) * s24.transpose()).amax() < 1e-15);
    }

    #[test]
    fn slack_rows_force_zero_dual_change() {
        let f = fixtures::feeder13();
        let ps = build_socp(&f);
        let set = gen_scenarios(&f, &ScenarioConfig::default(), 3).unwrap();
        let cp = ps.instantiate(&set.scenarios[300].conditions.theta()).unwrap();
        let sol = solve(&cp, &tight()).unwrap();
        let k = build_su(&cp, &sol, &Default::default()).unwrap();
        let sol_d = linalg::lstsq(&k.s, &k.u.column(0).into_owned()).unwrap();
        let slack = &cp.b_i - &ps.a_i * &sol.x;
        for j in 0..ps.n_ineq() {
            if sol.mu[j] == 0.0 && slack[j] > 1e-6 {
                assert!(sol_d[k.dmu().start + j].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn existence_on_synthetic_matrices() {
        let mk = |s: DMatrix<f64>| KktSystem {
            u: DMatrix::zeros(s.nrows(), 1),
            s,
            nx: 2,
            n_eq: 1,
            n_ineq: 0,
            cones: vec![],
            dropped: vec![],
            quadratic: vec![],
            degenerate: vec![],
        };
        let e = check_existence(&mk(DMatrix::identity(3, 3)), None, 1e-9).unwrap();
        assert!(e.exists && e.null_dim == 0);
        // null vector on the non-x coordinate only
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.0]));
        let e = check_existence(&mk(s), None, 1e-9).unwrap();
        assert!(e.exists && e.null_dim == 1);
        // null vector moving x
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 2.0, 1.0]));
        let e = check_existence(&mk(s.clone()), None, 1e-9).unwrap();
        assert!(!e.exists && (e.residual - 1.0).abs() < 1e-12);
        let opts = SensitivityOptions::default();
        assert!(matches!(solve_sensitivities(&mk(s), &opts), Err(Error::NoSensitivity(_))));
    }

    /// Central differences against re-solved instances.
    fn fd_check(f: &crate::feeder::FeederModel, seed: u64, idx: &[usize]) -> usize {
        use rand::{Rng, SeedableRng};
        let ps = build_socp(f);
        let set = gen_scenarios(f, &ScenarioConfig::default(), seed).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        let mut checked = 0;
        for &i in idx {
            let theta = set.scenarios[i].conditions.theta();
            let cp = ps.instantiate(&theta).unwrap();
            let sol = solve(&cp, &tight()).unwrap();
            let Some(rec) = sensitivities(&cp, &sol, &Default::default()).unwrap() else {
                continue;
            };
            for _ in 0..10 {
                let d = DVector::from_fn(ps.m, |_, _| rng.random_range(-1.0..1.0));
                let xp = crate::opf::solve_theta(&ps, &(&theta + &d * h), &tight()).unwrap().x;
                let xm = crate::opf::solve_theta(&ps, &(&theta - &d * h), &tight()).unwrap().x;
                let fd = (xp - xm) / (2.0 * h);
                let lin = &rec.jac * &d;
                let err = (&fd - &lin).amax() / (1.0 + lin.amax());
                assert!(err <= 1e-4, "scenario {i}: fd error {err:.3e}");
            }
            checked += 1;
        }
        checked
    }

    #[test]
    fn finite_differences_13() {
        let f = fixtures::feeder13();
        let n = fd_check(&f, 5, &[60, 200, 330, 480, 640]);
        assert!(n >= 3, "only {n} non-degenerate instances");
    }

    #[test]
    fn idle_cone_drop_equals_quadratic_twin() {
        // no solar: inverters can still supply reactive power, so force idle by
        // making reactive injection useless (zero reactance, zero q load)
        let f = fixtures::chain(2, 0.02, 0.0, &[(2, 0.5)]);
        let ps = build_socp(&f);
        let theta = DVector::from_vec(vec![0.2, 0.3, 0.0, 0.0, 0.0]);
        let cp = ps.instantiate(&theta).unwrap();
        let sol = solve(&cp, &tight()).unwrap();
        let k = build_su(&cp, &sol, &Default::default()).unwrap();
        assert_eq!(k.dropped.len(), 1, "x = {}", sol.x);
        let drop = solve_sensitivities(&k, &Default::default()).unwrap();
        let q = SensitivityOptions {
            idle_cone: IdleCone::Quadratic,
            ..Default::default()
        };
        let kq = build_su(&cp, &sol, &q).unwrap();
        assert_eq!(kq.quadratic.len(), 1);
        let twin = solve_sensitivities(&kq, &q).unwrap();
        assert!((drop.jac - twin.jac).amax() < 1e-10);
    }

    #[test]
    fn lu_and_svd_agree() {
        let f = fixtures::feeder13();
        let ps = build_socp(&f);
        let set = gen_scenarios(&f, &ScenarioConfig::default(), 2).unwrap();
        let cp = ps.instantiate(&set.scenarios[400].conditions.theta()).unwrap();
        let sol = solve(&cp, &tight()).unwrap();
        let k = build_su(&cp, &sol, &Default::default()).unwrap();
        let lu = solve_sensitivities(&k, &Default::default()).unwrap();
        let svd = solve_sensitivities(
            &k,
            &SensitivityOptions {
                lu_fast_path: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(lu.method, Method::Lu);
        assert!((lu.jac - svd.jac).amax() < 1e-8);
        // deterministic
        let again = solve_sensitivities(&k, &Default::default()).unwrap();
        assert_eq!(again.jac, solve_sensitivities(&k, &Default::default()).unwrap().jac);
    }

    #[test]
    fn homogeneity_of_dual_blocks() {
        let f = fixtures::feeder13();
        let ps = build_socp(&f);
        let set = gen_scenarios(&f, &ScenarioConfig::default(), 4).unwrap();
        let cp = ps.instantiate(&set.scenarios[500].conditions.theta()).unwrap();
        let sol = solve(&cp, &tight()).unwrap();
        let t = 2.5;
        let mut scaled = sol.clone();
        scaled.lambda *= t;
        scaled.mu *= t;
        scaled.nu *= t;
        let k1 = build_su(&cp, &sol, &Default::default()).unwrap();
        let k2 = build_su(&cp, &scaled, &Default::default()).unwrap();
        let nx = ps.nx();
        let o = ps.n_eq();
        let s21 = |k: &KktSystem| k.s.view((o, 0), (nx, nx)).into_owned();
        let s41 = |k: &KktSystem| k.s.view((k.cone_rows().start, 0), (k.cones.len(), nx)).into_owned();
        assert!((s21(&k2) - s21(&k1) * t).amax() < 1e-10);
        assert!((s41(&k2) - s41(&k1) * t).amax() < 1e-10);
    }

    #[test]
    fn strict_complementarity_flags() {
        let f = fixtures::chain(1, 0.02, 0.04, &[(1, 0.8)]);
        let ps = build_socp(&f);
        let cp = ps.instantiate(&DVector::from_vec(vec![0.5, 0.2, 0.3])).unwrap();
        let mut sol = solve(&cp, &tight()).unwrap();
        assert!(strict_complementarity(&cp, &sol, 1e-7, 1e-7));
        // the p_g cap binds; shrink its dual below the threshold
        let j = crate::opf::rows::pg_upper(1, 0);
        assert!(sol.mu[j] > 0.1);
        sol.mu[j] = 1e-12;
        assert_eq!(
            degenerate_constraints(&cp, &sol, 1e-7, 1e-7),
            vec![Constraint::Inequality(j)]
        );
        assert!(!strict_complementarity(&cp, &sol, 1e-7, 1e-7));
    }
}
