//! Labeled OPF samples, target addressing and dataset files.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{FeederModel, Scenario};
use crate::gp::TrainingSet;
use crate::opf::{check_exactness, Layout, ParametricSocp, SolveOptions, EXACT_TOL};
use crate::sensitivity::{sensitivities, SensitivityOptions};

/// Scalar OPF output addressed by external bus id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Target {
    Pg(u32),
    Qg(u32),
    V(u32),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Pg(b) => write!(f, "pg:{b}"),
            Target::Qg(b) => write!(f, "qg:{b}"),
            Target::V(b) => write!(f, "v:{b}"),
        }
    }
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad target {s:?}; expected pg:<bus>, qg:<bus> or v:<bus>"));
        let (kind, bus) = s.split_once(':').ok_or_else(bad)?;
        let bus: u32 = bus.trim().parse().map_err(|_| bad())?;
        match kind.trim() {
            "pg" => Ok(Target::Pg(bus)),
            "qg" => Ok(Target::Qg(bus)),
            "v" => Ok(Target::V(bus)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Target {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Target> for String {
    fn from(t: Target) -> String {
        t.to_string()
    }
}

impl Target {
    /// Index of this output in the decision vector.
    pub fn index(&self, f: &FeederModel) -> Result<usize> {
        let lay = Layout { n: f.n(), ng: f.ng() };
        let unknown = |b: u32| Error::InvalidInput(format!("target {self}: unknown bus {b}"));
        match *self {
            Target::Pg(b) | Target::Qg(b) => {
                let bus = f.bus_number(b).ok_or_else(|| unknown(b))?;
                let k = f
                    .inverter_at(bus)
                    .ok_or_else(|| Error::InvalidInput(format!("target {self}: no inverter at bus {b}")))?;
                Ok(if matches!(self, Target::Pg(_)) { lay.pg(k) } else { lay.qg(k) })
            }
            Target::V(b) => Ok(lay.v(f.bus_number(b).ok_or_else(|| unknown(b))?)),
        }
    }

    pub fn is_setpoint(&self) -> bool {
        !matches!(self, Target::V(_))
    }

    /// `pg` and `qg` of every inverter, in inverter order.
    pub fn all_setpoints(f: &FeederModel) -> Vec<Target> {
        let ids: Vec<u32> = f.inverters.iter().map(|i| f.bus_ids[i.bus - 1]).collect();
        ids.iter().map(|&b| Target::Pg(b)).chain(ids.iter().map(|&b| Target::Qg(b))).collect()
    }
}

/// One solved OPF instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfRecord {
    /// Position in the scenario list.
    pub index: usize,
    /// Minutes after midnight.
    pub t: f64,
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub max_rel_gap: f64,
    pub exact: bool,
    pub solve_time: f64,
    /// Whether sensitivities were requested for this instance.
    pub jac_requested: bool,
    pub jac_exists: bool,
    /// Strict complementarity fails somewhere.
    pub degenerate: bool,
    /// Decision-vector rows stored in `jac`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub jac_rows: Vec<usize>,
    /// `jac[i]` is the gradient of `x[jac_rows[i]]` with respect to θ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jac: Option<Vec<Vec<f64>>>,
}

impl OpfRecord {
    pub fn grad(&self, row: usize) -> Option<DVector<f64>> {
        let pos = self.jac_rows.iter().position(|&r| r == row)?;
        self.jac.as_ref().map(|j| DVector::from_column_slice(&j[pos]))
    }

    pub fn theta_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetOptions {
    pub solve: SolveOptions,
    pub sensitivity: SensitivityOptions,
    /// Decision-vector rows whose gradients are stored; empty keeps all.
    pub jac_rows: Vec<usize>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            solve: SolveOptions::default(),
            sensitivity: SensitivityOptions::default(),
            jac_rows: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub instances: usize,
    pub failed: Vec<(usize, String)>,
    pub inexact: usize,
    pub degenerate: usize,
    pub no_sensitivity: usize,
    pub seconds: f64,
}

/// Solves every scenario (in parallel, order preserved); sensitivities only
/// where `with_jac[i]` is set. Failed solves are reported, not returned.
pub fn build_dataset(
    f: &FeederModel,
    ps: &ParametricSocp,
    scenarios: &[Scenario],
    with_jac: &[bool],
    opts: &DatasetOptions,
) -> (Vec<OpfRecord>, DatasetSummary) {
    let started = Instant::now();
    let nx = ps.nx();
    let rows: Vec<usize> = if opts.jac_rows.is_empty() {
        (0..nx).collect()
    } else {
        opts.jac_rows.clone()
    };
    let results: Vec<Result<OpfRecord>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, s)| solve_one(f, ps, i, s, with_jac.get(i).copied().unwrap_or(false), &rows, opts))
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut sum = DatasetSummary::default();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => {
                sum.inexact += usize::from(!rec.exact);
                sum.degenerate += usize::from(rec.degenerate);
                sum.no_sensitivity += usize::from(rec.jac_requested && !rec.jac_exists && !rec.degenerate);
                out.push(rec);
            }
            Err(e) => {
                log::warn!("instance {i} (t = {}) failed: {e}", scenarios[i].t);
                sum.failed.push((i, e.to_string()));
            }
        }
    }
    sum.instances = out.len();
    sum.seconds = started.elapsed().as_secs_f64();
    (out, sum)
}

fn solve_one(
    f: &FeederModel,
    ps: &ParametricSocp,
    index: usize,
    s: &Scenario,
    want_jac: bool,
    rows: &[usize],
    opts: &DatasetOptions,
) -> Result<OpfRecord> {
    let theta = s.conditions.theta();
    let cp = ps.instantiate(&theta)?;
    let sol = crate::opf::solve(&cp, &opts.solve)?;
    let ex = check_exactness(f, &sol.x, EXACT_TOL);
    let mut rec = OpfRecord {
        index,
        t: s.t,
        theta: theta.as_slice().to_vec(),
        x: sol.x.as_slice().to_vec(),
        lambda: sol.lambda.as_slice().to_vec(),
        mu: sol.mu.as_slice().to_vec(),
        nu: sol.nu.as_slice().to_vec(),
        objective: sol.objective,
        kkt_residual: sol.residuals.max(),
        max_rel_gap: ex.max_rel_gap,
        exact: ex.exact,
        solve_time: sol.solve_time,
        jac_requested: want_jac,
        jac_exists: false,
        degenerate: false,
        jac_rows: Vec::new(),
        jac: None,
    };
    if want_jac && ex.exact {
        let sopts = SensitivityOptions { skip_degenerate: true, ..opts.sensitivity.clone() };
        rec.degenerate = !crate::sensitivity::degenerate_constraints(&cp, &sol, sopts.strict_tol, sopts.slack_tol)
            .is_empty();
        if !rec.degenerate {
            match sensitivities(&cp, &sol, &sopts) {
                Ok(Some(sr)) => {
                    rec.jac_exists = true;
                    rec.jac_rows = rows.to_vec();
                    rec.jac = Some(
                        rows.iter()
                            .map(|&r| sr.jac.row(r).iter().copied().collect())
                            .collect(),
                    );
                }
                Ok(None) => {}
                Err(Error::Inexact(m)) => log::debug!("instance {index}: {m}"),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(rec)
}

pub fn write_jsonl(records: &[OpfRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<OpfRecord>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Training set for `target` over `records[idx]`. With `grads`, samples lacking
/// a stored gradient are left out and counted in the second return value.
pub fn training_set(
    records: &[OpfRecord],
    idx: &[usize],
    target: Target,
    row: usize,
    grads: bool,
) -> Result<(TrainingSet, usize)> {
    let mut thetas = Vec::new();
    let mut y = Vec::new();
    let mut g = Vec::new();
    let mut dropped = 0;
    for &i in idx {
        let r = &records[i];
        if grads {
            match r.grad(row) {
                Some(d) => g.push(d),
                None => {
                    dropped += 1;
                    continue;
                }
            }
        }
        thetas.push(r.theta_vec());
        y.push(r.x[row]);
    }
    let ts = TrainingSet::new(target.to_string(), thetas, y, grads.then_some(g))?;
    Ok((ts, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{fixtures, gen_scenarios, ScenarioConfig};
    use crate::opf::build_socp;

    #[test]
    fn target_parsing() {
        assert_eq!("pg:5".parse::<Target>().unwrap(), Target::Pg(5));
        assert_eq!("v:12".parse::<Target>().unwrap().to_string(), "v:12");
        assert!("pq:1".parse::<Target>().is_err());
        assert!("qg".parse::<Target>().is_err());
        let f = fixtures::feeder13();
        assert!(Target::Pg(4).index(&f).is_ok());
        assert!(Target::Pg(5).index(&f).is_err());
        assert!(Target::V(999).index(&f).is_err());
        assert_eq!(Target::all_setpoints(&f).len(), 2 * f.ng());
        let json = serde_json::to_string(&Target::Qg(9)).unwrap();
        assert_eq!(json, "\"qg:9\"");
    }

    #[test]
    fn dataset_round_trip() {
        let f = fixtures::feeder13();
        let ps = build_socp(&f);
        let cfg = ScenarioConfig { end_min: 440.0, ..ScenarioConfig::default() };
        let set = gen_scenarios(&f, &cfg, 1).unwrap();
        let with: Vec<bool> = (0..set.scenarios.len()).map(|i| i % 5 == 0).collect();
        let tq = Target::Qg(9);
        let row = tq.index(&f).unwrap();
        let opts = DatasetOptions { jac_rows: vec![row], ..DatasetOptions::default() };
        let (recs, sum) = build_dataset(&f, &ps, &set.scenarios, &with, &opts);
        assert_eq!(sum.instances, set.scenarios.len());
        assert!(recs.iter().all(|r| r.exact));
        assert!(recs.iter().filter(|r| r.jac_exists).count() >= 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&recs, &p).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        let idx: Vec<usize> = (0..recs.len()).collect();
        let (ts, dropped) = training_set(&recs, &idx, tq, row, true).unwrap();
        assert_eq!(ts.len() + dropped, recs.len());
        assert_eq!(ts.len(), recs.iter().filter(|r| r.jac_exists).count());
        let (plain, _) = training_set(&recs, &idx, tq, row, false).unwrap();
        assert_eq!(plain.len(), recs.len());
    }
}
