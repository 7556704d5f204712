//! Branch-flow power flow on radial feeders by backward/forward sweep.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::feeder::{unpack_theta, FeederModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions { tol: 1e-10, max_iter: 100 }
    }
}

/// Converged power-flow state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfState {
    /// Squared voltages, substation first (length N + 1).
    pub v: DVector<f64>,
    /// Line flows into bus `n` at index `n - 1`.
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    /// Squared line currents.
    pub l: DVector<f64>,
    /// Max absolute violation over the balance, voltage-drop and current equations.
    pub residual: f64,
    pub iterations: usize,
}

/// Net injections `p_g − p_load`, `q_g − q_load` per bus.
pub fn net_injections(
    f: &FeederModel,
    theta: &DVector<f64>,
    pg: &DVector<f64>,
    qg: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let gc = unpack_theta(f, theta)?;
    check_len("pg", f.ng(), pg.len())?;
    check_len("qg", f.ng(), qg.len())?;
    let mut p = -gc.p_load;
    let mut q = -gc.q_load;
    for (k, inv) in f.inverters.iter().enumerate() {
        p[inv.bus - 1] += pg[k];
        q[inv.bus - 1] += qg[k];
    }
    Ok((p, q))
}

fn residual(f: &FeederModel, p_inj: &DVector<f64>, q_inj: &DVector<f64>, s: &PfState) -> f64 {
    let mut worst: f64 = 0.0;
    for b in 1..=f.n() {
        let i = b - 1;
        let (r, x) = (f.r[i], f.x[i]);
        let mut sp = -p_inj[i] + r * s.l[i];
        let mut sq = -q_inj[i] + x * s.l[i];
        for &c in f.children(b) {
            sp += s.p[c - 1];
            sq += s.q[c - 1];
        }
        let vp = s.v[f.parent[i]];
        let dv = vp - 2.0 * (r * s.p[i] + x * s.q[i]) + (r * r + x * x) * s.l[i];
        let dl = (s.p[i] * s.p[i] + s.q[i] * s.q[i]) / vp;
        worst = worst
            .max((s.p[i] - sp).abs())
            .max((s.q[i] - sq).abs())
            .max((s.v[b] - dv).abs())
            .max((s.l[i] - dl).abs());
    }
    worst
}

/// Solves the power-flow equations for net injections `p_inj`, `q_inj`
/// (length N) with substation squared voltage `v0`.
pub fn solve_pf(
    f: &FeederModel,
    p_inj: &DVector<f64>,
    q_inj: &DVector<f64>,
    v0: f64,
    opts: &PfOptions,
) -> Result<PfState> {
    let n = f.n();
    check_len("p_inj", n, p_inj.len())?;
    check_len("q_inj", n, q_inj.len())?;
    if !(v0 > 0.0) {
        return Err(Error::InvalidInput(format!("substation voltage must be positive, got {v0}")));
    }
    let mut s = PfState {
        v: DVector::from_element(n + 1, v0),
        p: DVector::zeros(n),
        q: DVector::zeros(n),
        l: DVector::zeros(n),
        residual: f64::INFINITY,
        iterations: 0,
    };
    for it in 1..=opts.max_iter {
        // parents precede children, so a reverse scan visits leaves first
        for b in (1..=n).rev() {
            let i = b - 1;
            let mut sp = -p_inj[i] + f.r[i] * s.l[i];
            let mut sq = -q_inj[i] + f.x[i] * s.l[i];
            for &c in f.children(b) {
                sp += s.p[c - 1];
                sq += s.q[c - 1];
            }
            s.p[i] = sp;
            s.q[i] = sq;
        }
        for b in 1..=n {
            let i = b - 1;
            let (r, x) = (f.r[i], f.x[i]);
            let vp = s.v[f.parent[i]];
            s.v[b] = vp - 2.0 * (r * s.p[i] + x * s.q[i]) + (r * r + x * x) * s.l[i];
            if !(s.v[b] > 0.0) {
                return Err(Error::PowerFlow(format!("voltage collapse at bus {} (iteration {it})", f.bus_ids[i])));
            }
        }
        for b in 1..=n {
            let i = b - 1;
            s.l[i] = (s.p[i] * s.p[i] + s.q[i] * s.q[i]) / s.v[f.parent[i]];
        }
        s.iterations = it;
        s.residual = residual(f, p_inj, q_inj, &s);
        if !s.residual.is_finite() {
            return Err(Error::PowerFlow(format!("sweep diverged at iteration {it}")));
        }
        if s.residual <= opts.tol {
            return Ok(s);
        }
    }
    Err(Error::PowerFlow(format!(
        "no convergence in {} iterations (residual {:.3e})",
        opts.max_iter, s.residual
    )))
}

/// Voltage band and current-limit check of a power-flow state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    /// `|√v − 1|` per bus 1..=N.
    pub deviation: Vec<f64>,
    /// Internal bus numbers outside the band.
    pub voltage_violations: Vec<usize>,
    pub worst_deviation: f64,
    /// Lines (by bus) with `l > l̄`.
    pub current_violations: Vec<usize>,
    /// Max of `l / l̄`.
    pub worst_loading: f64,
}

impl LimitReport {
    pub fn ok(&self) -> bool {
        self.voltage_violations.is_empty() && self.current_violations.is_empty()
    }
}

pub fn check_limits(s: &PfState, f: &FeederModel, band: f64) -> LimitReport {
    let mut rep = LimitReport {
        deviation: Vec::with_capacity(f.n()),
        voltage_violations: Vec::new(),
        worst_deviation: 0.0,
        current_violations: Vec::new(),
        worst_loading: 0.0,
    };
    for b in 1..=f.n() {
        let d = (s.v[b].sqrt() - 1.0).abs();
        rep.deviation.push(d);
        rep.worst_deviation = rep.worst_deviation.max(d);
        if d > band {
            rep.voltage_violations.push(b);
        }
        let load = s.l[b - 1] / f.lbar[b - 1];
        rep.worst_loading = rep.worst_loading.max(load);
        if load > 1.0 {
            rep.current_violations.push(b);
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{fixtures, gen_scenarios, ScenarioConfig};
    use crate::opf::{build_socp, solve_theta, SolveOptions};
    use proptest::prelude::*;

    #[test]
    fn flat_solution() {
        let f = fixtures::feeder13();
        let z = DVector::zeros(f.n());
        let s = solve_pf(&f, &z, &z, 1.02, &PfOptions::default()).unwrap();
        assert_eq!(s.iterations, 1);
        assert!(s.v.iter().all(|&v| v == 1.02));
        assert_eq!(s.p.amax() + s.q.amax() + s.l.amax(), 0.0);
        let rep = check_limits(&solve_pf(&f, &z, &z, 1.0, &PfOptions::default()).unwrap(), &f, 0.03);
        assert!(rep.ok() && rep.worst_deviation == 0.0);
    }

    #[test]
    fn single_line_matches_quadratic() {
        let f = fixtures::chain(1, 0.05, 0.08, &[]);
        let (p, q, v0) = (-0.6, -0.25, 1.01);
        let s = solve_pf(&f, &DVector::from_element(1, p), &DVector::from_element(1, q), v0, &PfOptions::default()).unwrap();
        // (r l − p)² + (x l − q)² = v0 l, smaller root
        let (r, x) = (0.05, 0.08);
        let a = r * r + x * x;
        let b = -(2.0 * r * p + 2.0 * x * q + v0);
        let c = p * p + q * q;
        let l = (-b - (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
        let (pf, qf) = (r * l - p, x * l - q);
        let v1 = v0 - 2.0 * (r * pf + x * qf) + a * l;
        assert!((s.l[0] - l).abs() < 1e-9);
        assert!((s.v[1] - v1).abs() < 1e-9, "{} vs {v1}", s.v[1]);
        assert!(s.residual <= 1e-10);
    }

    #[test]
    fn collapse_and_bad_input() {
        let f = fixtures::chain(1, 0.3, 0.3, &[]);
        let big = DVector::from_element(1, -5.0);
        assert!(matches!(
            solve_pf(&f, &big, &big, 1.0, &PfOptions::default()),
            Err(Error::PowerFlow(_))
        ));
        let z = DVector::zeros(1);
        assert!(solve_pf(&f, &z, &z, 0.0, &PfOptions::default()).is_err());
        assert!(solve_pf(&f, &DVector::zeros(2), &z, 1.0, &PfOptions::default()).is_err());
    }

    #[test]
    fn band_zero_flags_every_off_nominal_bus() {
        let f = fixtures::feeder13();
        let p = DVector::from_element(f.n(), -0.01);
        let s = solve_pf(&f, &p, &p, 1.0, &PfOptions::default()).unwrap();
        let rep = check_limits(&s, &f, 0.0);
        let off = (1..=f.n()).filter(|&b| s.v[b] != 1.0).count();
        assert_eq!(rep.voltage_violations.len(), off);
        assert_eq!(off, f.n());
    }

    #[test]
    fn agrees_with_exact_relaxation() {
        let f = fixtures::feeder13();
        let ps = build_socp(&f);
        let set = gen_scenarios(&f, &ScenarioConfig::default(), 3).unwrap();
        let lay = ps.layout;
        for s in set.scenarios.iter().step_by(97) {
            let th = s.conditions.theta();
            let sol = solve_theta(&ps, &th, &SolveOptions::default()).unwrap();
            let pg = DVector::from_fn(f.ng(), |k, _| sol.x[lay.pg(k)]);
            let qg = DVector::from_fn(f.ng(), |k, _| sol.x[lay.qg(k)]);
            let (pi, qi) = net_injections(&f, &th, &pg, &qg).unwrap();
            let pf = solve_pf(&f, &pi, &qi, sol.x[lay.v0()], &PfOptions::default()).unwrap();
            for b in 1..=f.n() {
                assert!((pf.v[b] - sol.x[lay.v(b)]).abs() <= 1e-6, "t={} bus {b}", s.t);
            }
        }
    }

    #[test]
    fn heavy_load_violates_until_inverters_act() {
        let f = fixtures::feeder13();
        let ps = build_socp(&f);
        let set = gen_scenarios(&f, &ScenarioConfig::default(), 3).unwrap();
        // the most heavily loaded instance of the day
        let s = set
            .scenarios
            .iter()
            .max_by(|a, b| {
                (a.conditions.p_load.sum() - a.conditions.pg_cap.sum())
                    .total_cmp(&(b.conditions.p_load.sum() - b.conditions.pg_cap.sum()))
            })
            .unwrap();
        let zero = DVector::zeros(f.ng());
        // lightest scaling that pushes the uncontrolled feeder out of the band
        let (th, idle, sol) = (0..20)
            .find_map(|k| {
                let mut gc = s.conditions.clone();
                gc.p_load *= 1.0 + 0.05 * k as f64;
                gc.q_load *= 1.0 + 0.05 * k as f64;
                let th = gc.theta();
                let (pi, qi) = net_injections(&f, &th, &zero, &zero).unwrap();
                let idle = solve_pf(&f, &pi, &qi, 1.0, &PfOptions::default()).unwrap();
                if check_limits(&idle, &f, 0.03).voltage_violations.is_empty() {
                    return None;
                }
                let sol = solve_theta(&ps, &th, &SolveOptions::default()).ok()?;
                Some((th, idle, sol))
            })
            .expect("some loading violates the band while the OPF stays feasible");
        let lay = ps.layout;
        let pg = DVector::from_fn(f.ng(), |k, _| sol.x[lay.pg(k)]);
        let qg = DVector::from_fn(f.ng(), |k, _| sol.x[lay.qg(k)]);
        let (pi, qi) = net_injections(&f, &th, &pg, &qg).unwrap();
        let ctl = solve_pf(&f, &pi, &qi, 1.0, &PfOptions::default()).unwrap();
        let before = check_limits(&idle, &f, 0.03).worst_deviation;
        let after = check_limits(&ctl, &f, 0.03).worst_deviation;
        assert!(after < before, "{after} vs {before}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn more_load_lowers_voltage(n in 2usize..8, seed in 0u64..500, bus in 0usize..8, dl in 0.001f64..0.02) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = fixtures::chain(n, rng.random_range(0.005..0.03), rng.random_range(0.005..0.03), &[]);
            let p = DVector::from_fn(n, |_, _| -rng.random_range(0.0..0.02));
            let q = DVector::from_fn(n, |_, _| -rng.random_range(0.0..0.01));
            let b = bus % n;
            let a = solve_pf(&f, &p, &q, 1.0, &PfOptions::default()).unwrap();
            let mut p2 = p.clone();
            p2[b] -= dl;
            let c = solve_pf(&f, &p2, &q, 1.0, &PfOptions::default()).unwrap();
            prop_assert!(c.v[b + 1] <= a.v[b + 1] + 1e-12);
        }
    }
}
