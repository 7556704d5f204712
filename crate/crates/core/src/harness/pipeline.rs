//! Config-driven experiment pipeline: one shared OPF dataset, per-target
//! surrogates, held-out evaluation and plot-ready CSVs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{build_dataset, read_jsonl, training_set, write_jsonl, DatasetOptions, DatasetSummary, OpfRecord, Target};
use super::metrics::{ecdf, kmeans, quantile, rpe_with, summarize, Summary};
use crate::acpf::{check_limits, net_injections, solve_pf, PfOptions};
use crate::error::{Error, Result, StageExt};
use crate::feeder::{fixtures, gen_scenarios, load_feeder, FeederModel, ScenarioConfig};
use crate::gp::{fit_epsilon, fit_hyperparams, FitOptions, GpModel, Hyperparams, Mode, ModelFile, Prediction, Standardizer};
use crate::lopf::{build_rx, solve_lopf, LopfOptions, LopfSolution};
use crate::opf::{build_socp, Layout};
use crate::rf::{draw_basis, train_rf, RfModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Gp,
    SiGp,
    RfGp,
    RfSiGp,
    Lopf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gp => "gp",
            Method::SiGp => "si-gp",
            Method::RfGp => "rf-gp",
            Method::RfSiGp => "rf-si-gp",
            Method::Lopf => "lopf",
        }
    }

    /// Label mode of a learned surrogate; `None` for the LOPF baseline.
    pub fn mode(self) -> Option<Mode> {
        match self {
            Method::Gp | Method::RfGp => Some(Mode::Plain),
            Method::SiGp | Method::RfSiGp => Some(Mode::Sensitivity),
            Method::Lopf => None,
        }
    }

    pub fn is_rf(self) -> bool {
        matches!(self, Method::RfGp | Method::RfSiGp)
    }

    pub fn needs_grads(self) -> bool {
        self.mode() == Some(Mode::Sensitivity)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(Method::Gp),
            "si-gp" => Ok(Method::SiGp),
            "rf-gp" => Ok(Method::RfGp),
            "rf-si-gp" => Ok(Method::RfSiGp),
            "lopf" => Ok(Method::Lopf),
            _ => Err(Error::InvalidInput(format!(
                "unknown method {s:?}; expected gp, si-gp, rf-gp, rf-si-gp or lopf"
            ))),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub seed: u64,
    #[serde(flatten)]
    pub config: ScenarioConfig,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec { seed: 0, config: ScenarioConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Training instances fall on this grid of simulated minutes; the rest is test.
    pub train_stride_min: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_stride_min: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfConfig {
    #[serde(rename = "D")]
    pub d: usize,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig { d: 1600, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Multistart seed of the hyperparameter search.
    pub fit: u64,
    pub kmeans: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    /// Number of clusters withheld in the first phase.
    pub holdout: usize,
    pub methods: Vec<Method>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { k: 20, holdout: 5, methods: vec![Method::Gp, Method::SiGp] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// Training-set sizes, drawn uniformly over the day.
    #[serde(rename = "T")]
    pub t: Vec<usize>,
    pub methods: Vec<Method>,
    /// Cap on timed test predictions per model.
    pub max_instances: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { t: Vec::new(), methods: Vec::new(), max_instances: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiments {
    /// AC power flow under predicted setpoints (needs every setpoint target).
    pub pf_check: bool,
    /// Voltage band for the power-flow check, as a fraction of 1 pu.
    pub band: f64,
    /// Training sizes for the RPE-versus-T sweep (gp and si-gp only).
    #[serde(rename = "rpe_vs_T")]
    pub rpe_vs_t: Vec<usize>,
    /// Feature counts for the random-feature sweep.
    #[serde(rename = "dsweep_D")]
    pub dsweep: Vec<usize>,
    pub cluster: Option<ClusterConfig>,
    pub timing: Option<TimingConfig>,
}

impl Default for Experiments {
    fn default() -> Self {
        Experiments {
            pf_check: true,
            band: 0.03,
            rpe_vs_t: Vec::new(),
            dsweep: Vec::new(),
            cluster: None,
            timing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// `feeder13`, `feeder123`, or a path to a feeder JSON file.
    pub feeder: String,
    #[serde(default)]
    pub scenarios: ScenarioSpec,
    #[serde(default)]
    pub split: SplitConfig,
    pub methods: Vec<Method>,
    /// Empty means every inverter's `pg` and `qg`.
    #[serde(default)]
    pub targets: Vec<Target>,
    #[serde(default)]
    pub rf: RfConfig,
    #[serde(default)]
    pub seeds: Seeds,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub experiments: Experiments,
    /// Remove degenerate instances instead of keeping them without gradients.
    #[serde(default)]
    pub drop_degenerate: bool,
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if !(self.split.train_stride_min > 0.0) {
            return bad("split.train_stride_min must be positive".into());
        }
        if self.rf.d == 0 || self.experiments.dsweep.contains(&0) {
            return bad("random-feature counts must be positive".into());
        }
        if !(self.experiments.band > 0.0) {
            return bad("experiments.band must be positive".into());
        }
        if self.experiments.rpe_vs_t.iter().any(|&t| t < 2) {
            return bad("rpe_vs_T sizes must be at least 2".into());
        }
        if let Some(c) = &self.experiments.cluster {
            if c.holdout == 0 || c.holdout >= c.k {
                return bad(format!("cluster holdout {} must lie in 1..k = {}", c.holdout, c.k));
            }
            if c.methods.iter().any(|m| m.mode().is_none() || m.is_rf()) {
                return bad("cluster methods must be gp or si-gp".into());
            }
        }
        if let Some(t) = &self.experiments.timing {
            if t.t.iter().any(|&v| v < 2) || t.methods.iter().any(|m| m.mode().is_none()) {
                return bad("timing needs sizes >= 2 and learned methods".into());
            }
        }
        Ok(())
    }

    pub fn resolve_feeder(&self) -> Result<FeederModel> {
        match self.feeder.as_str() {
            "feeder13" => Ok(fixtures::feeder13()),
            "feeder123" => Ok(fixtures::feeder123()),
            p => load_feeder(p).map_err(|e| Error::Config(format!("feeder {p}: {e}"))),
        }
    }

    fn any_grads(&self) -> bool {
        let t = self.experiments.timing.iter().flat_map(|t| t.methods.iter());
        self.methods.iter().chain(t).any(|m| m.needs_grads())
    }
}

/// A trained exact or random-feature surrogate.
#[derive(Debug, Clone)]
pub enum Surrogate {
    Exact(GpModel),
    Rf(RfModel),
}

impl Surrogate {
    pub fn predict(&self, x: &DVector<f64>) -> Prediction {
        match self {
            Surrogate::Exact(m) => m.predict(x),
            Surrogate::Rf(m) => m.predict(x),
        }
    }

    pub fn to_file(&self) -> ModelFile {
        match self {
            Surrogate::Exact(m) => m.to_file(),
            Surrogate::Rf(m) => m.to_file(),
        }
    }

    pub fn from_file(f: &ModelFile) -> Result<Self> {
        if f.rf.is_some() {
            Ok(Surrogate::Rf(RfModel::from_file(f)?))
        } else {
            Ok(Surrogate::Exact(GpModel::from_file(f)?))
        }
    }
}

/// Hyperparameters shared by every method of one target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetFit {
    pub target: Target,
    pub scaler: Standardizer,
    /// `(α, β, γ)` from the plain likelihood.
    pub plain: Hyperparams,
    /// `plain` with ε fitted on gradient labels.
    pub sensitivity: Option<Hyperparams>,
    pub log_likelihood: f64,
    pub fit_seconds: f64,
    pub epsilon_seconds: f64,
}

impl TargetFit {
    pub fn hyperparams(&self, mode: Mode) -> Result<Hyperparams> {
        match mode {
            Mode::Plain => Ok(self.plain),
            Mode::Sensitivity => self
                .sensitivity
                .ok_or_else(|| Error::InvalidInput(format!("{}: no gradient-label fit", self.target))),
        }
    }
}

/// Fits `(α, β, γ)` on the plain labels of `idx`, then ε on their gradients when
/// `with_grads` is set.
pub fn fit_target(
    records: &[OpfRecord],
    idx: &[usize],
    target: Target,
    row: usize,
    with_grads: bool,
    opts: &FitOptions,
) -> Result<TargetFit> {
    let (plain, _) = training_set(records, idx, target, row, false)?;
    let scaler = Standardizer::fit(&plain.y);
    let started = Instant::now();
    let rep = fit_hyperparams(&scaler.apply(&plain), &FitOptions { fit_epsilon: false, ..opts.clone() })?;
    let fit_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let sensitivity = if with_grads {
        let (si, dropped) = training_set(records, idx, target, row, true)?;
        if dropped > 0 {
            log::info!("{target}: {dropped} training samples without gradients left out of the ε fit");
        }
        let eps = fit_epsilon(&scaler.apply(&si), &rep.hyperparams, opts).map_or(opts.default_epsilon, |e| e.0);
        Some(Hyperparams { epsilon: eps, ..rep.hyperparams })
    } else {
        None
    };
    Ok(TargetFit {
        target,
        scaler,
        plain: rep.hyperparams,
        sensitivity,
        log_likelihood: rep.log_likelihood,
        fit_seconds,
        epsilon_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains one surrogate with the shared hyperparameters of `fit`. Returns the
/// model and the number of samples left out for lack of gradients.
pub fn train_surrogate(
    method: Method,
    records: &[OpfRecord],
    idx: &[usize],
    row: usize,
    fit: &TargetFit,
    rf: &RfConfig,
) -> Result<(Surrogate, usize)> {
    let mode = method
        .mode()
        .ok_or_else(|| Error::InvalidInput(format!("{method} is not a learned surrogate")))?;
    let (ts, dropped) = training_set(records, idx, fit.target, row, mode == Mode::Sensitivity)?;
    let h = fit.hyperparams(mode)?;
    let model = if method.is_rf() {
        let basis = draw_basis(ts.dim(), rf.d, h.beta, rf.seed)?;
        Surrogate::Rf(train_rf(&ts, &h, basis, mode, fit.scaler)?)
    } else {
        Surrogate::Exact(GpModel::train(&ts, &h, mode, fit.scaler)?)
    };
    Ok((model, dropped))
}

/// Posterior means and standard deviations over `records[idx]`, plus the
/// clamp count and per-instance seconds (sequential, monotonic clock).
fn predict_all(model: &Surrogate, records: &[OpfRecord], idx: &[usize]) -> (Vec<f64>, Vec<f64>, usize, f64) {
    let thetas: Vec<DVector<f64>> = idx.iter().map(|&i| records[i].theta_vec()).collect();
    let started = Instant::now();
    let preds: Vec<Prediction> = thetas.iter().map(|t| model.predict(t)).collect();
    let per = started.elapsed().as_secs_f64() / idx.len().max(1) as f64;
    let clamped = preds.iter().filter(|p| p.clamped).count();
    (preds.iter().map(|p| p.mean).collect(), preds.iter().map(|p| p.std()).collect(), clamped, per)
}

fn lopf_value(f: &FeederModel, sol: &LopfSolution, target: Target) -> Result<f64> {
    let bus = |b: u32| f.bus_number(b).ok_or_else(|| Error::InvalidInput(format!("unknown bus {b}")));
    let inv = |b: u32| {
        bus(b).and_then(|n| f.inverter_at(n).ok_or_else(|| Error::InvalidInput(format!("no inverter at bus {b}"))))
    };
    Ok(match target {
        Target::Pg(b) => sol.pg[inv(b)?],
        Target::Qg(b) => sol.qg[inv(b)?],
        Target::V(b) => sol.v[bus(b)? - 1],
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// `t` indices spread evenly over `0..n`, endpoints included.
pub fn uniform_indices(n: usize, t: usize) -> Vec<usize> {
    if t >= n {
        return (0..n).collect();
    }
    if t <= 1 {
        return vec![0; t.min(n)];
    }
    (0..t).map(|i| i * (n - 1) / (t - 1)).collect()
}

/// Indices of instances on the `stride` grid measured from the first instance.
pub fn stride_indices(times: &[f64], stride: f64) -> Vec<usize> {
    let Some(&t0) = times.first() else { return Vec::new() };
    times
        .iter()
        .enumerate()
        .filter(|(_, &t)| {
            let k = (t - t0) / stride;
            (k - k.round()).abs() < 1e-9
        })
        .map(|(i, _)| i)
        .collect()
}

fn complement(n: usize, idx: &[usize]) -> Vec<usize> {
    let mut mark = vec![false; n];
    for &i in idx {
        mark[i] = true;
    }
    (0..n).filter(|&i| !mark[i]).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub target: Target,
    pub method: Method,
    /// Record positions of the test instances.
    pub instances: Vec<usize>,
    pub truth: Vec<f64>,
    pub estimate: Vec<f64>,
    pub rpe: Vec<f64>,
    /// Predictive standard deviations; absent for LOPF.
    pub std: Option<Vec<f64>>,
    pub summary: Summary,
    pub mean_rpe: f64,
    pub mean_std: Option<f64>,
    pub clamped: usize,
    pub train_size: usize,
    pub dropped: usize,
    pub train_seconds: f64,
    pub predict_seconds: f64,
}

impl MethodResult {
    pub fn abs_error(&self) -> Vec<f64> {
        self.estimate.iter().zip(&self.truth).map(|(e, t)| (e - t).abs()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpeRow {
    pub target: String,
    pub method: String,
    pub instance: usize,
    pub rpe: f64,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub target: String,
    pub method: String,
    pub instance: usize,
    pub t: f64,
    pub truth: f64,
    pub mean: f64,
    pub std: Option<f64>,
    pub lo2: Option<f64>,
    pub hi2: Option<f64>,
    pub lo3: Option<f64>,
    pub hi3: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcdfRow {
    pub target: String,
    pub method: String,
    pub abs_error: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    pub method: String,
    pub target: String,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "D")]
    pub d: Option<usize>,
    pub count: usize,
    pub seconds_per_instance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PfRow {
    pub instance: usize,
    pub t: f64,
    pub method: String,
    pub converged: bool,
    pub worst_deviation: f64,
    pub voltage_violations: usize,
    pub current_violations: usize,
    pub worst_loading: f64,
    pub pf_residual: f64,
    pub opf_in_band: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PfSummary {
    pub method: String,
    pub instances: usize,
    pub nonconverged: usize,
    /// Instances whose OPF solution keeps every voltage in the band.
    pub opf_in_band: usize,
    /// Of those, instances where this method's setpoints also do.
    pub in_band_when_opf_in_band: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpeVsTRow {
    #[serde(rename = "T")]
    pub t: usize,
    pub method: String,
    /// A target, or `all` for the mean over targets.
    pub target: String,
    pub train_size: usize,
    pub test_size: usize,
    pub mean_rpe: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DsweepRow {
    #[serde(rename = "D")]
    pub d: usize,
    pub method: String,
    pub target: String,
    pub mean_rpe: f64,
    pub mean_std: f64,
    pub train_seconds: f64,
    pub predict_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterRow {
    pub target: String,
    pub method: String,
    /// `holdout` trains without the withheld clusters, `all` with them.
    pub phase: String,
    pub train_size: usize,
    pub test_size: usize,
    pub mean_std: f64,
    pub mean_rpe: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub feeder: String,
    /// SHA-256 of the dataset file every target was trained from.
    pub dataset_hash: String,
    pub dataset: DatasetSummary,
    pub train_size: usize,
    pub test_size: usize,
    pub fits: Vec<TargetFit>,
    pub results: Vec<MethodResult>,
    pub pf: Vec<PfSummary>,
    pub pf_rows: Vec<PfRow>,
    pub rpe_vs_t: Vec<RpeVsTRow>,
    pub dsweep: Vec<DsweepRow>,
    pub cluster: Vec<ClusterRow>,
    pub timing: Vec<TimingRow>,
}

impl EvaluationReport {
    pub fn result(&self, target: Target, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.target == target && r.method == method)
    }

    /// Mean over targets of the per-target mean RPE.
    pub fn mean_rpe(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self.results.iter().filter(|r| r.method == method).map(|r| r.mean_rpe).collect();
        (!v.is_empty()).then(|| mean(&v))
    }

    /// Absolute errors of `method` pooled over every reactive setpoint target.
    pub fn pooled_reactive_errors(&self, method: Method) -> Vec<f64> {
        self.results
            .iter()
            .filter(|r| r.method == method && matches!(r.target, Target::Qg(_)))
            .flat_map(|r| r.abs_error())
            .collect()
    }

    /// Mean RPE over targets at training size `t` from the sweep.
    pub fn rpe_at(&self, t: usize, method: Method) -> Option<f64> {
        self.rpe_vs_t
            .iter()
            .find(|r| r.t == t && r.method == method.name() && r.target == "all")
            .map(|r| r.mean_rpe)
    }

    /// Per target, mean σ on the withheld clusters divided by the mean σ after
    /// retraining with them.
    pub fn cluster_ratios(&self, method: Method) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for r in self.cluster.iter().filter(|r| r.method == method.name() && r.phase == "holdout") {
            if let Some(a) = self
                .cluster
                .iter()
                .find(|a| a.method == r.method && a.target == r.target && a.phase == "all")
            {
                out.push((r.target.clone(), r.mean_std / a.mean_std));
            }
        }
        out
    }

    pub fn timing_of(&self, stage: &str, method: &str, t: Option<usize>) -> Option<f64> {
        self.timing
            .iter()
            .find(|r| r.stage == stage && r.method == method && (t.is_none() || r.t == t))
            .map(|r| r.seconds_per_instance)
    }

    /// Property checks over whatever the run produced.
    pub fn self_check(&self) -> Vec<Check> {
        let mut out = Vec::new();
        if let (Some(g), Some(s)) = (self.mean_rpe(Method::Gp), self.mean_rpe(Method::SiGp)) {
            out.push(Check {
                name: "si-gp mean RPE <= gp".into(),
                pass: s <= g,
                detail: format!("si-gp {s:.4} gp {g:.4}"),
            });
        }
        let ts: Vec<usize> = {
            let mut v: Vec<usize> = self.rpe_vs_t.iter().map(|r| r.t).collect();
            v.dedup();
            v
        };
        for t in ts {
            if let (Some(g), Some(s)) = (self.rpe_at(t, Method::Gp), self.rpe_at(t, Method::SiGp)) {
                out.push(Check {
                    name: format!("si-gp RPE <= gp at T = {t}"),
                    pass: s <= g,
                    detail: format!("si-gp {s:.4} gp {g:.4}"),
                });
            }
        }
        for m in [Method::Gp, Method::SiGp] {
            let r = self.cluster_ratios(m);
            if !r.is_empty() {
                let worst = r.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                out.push(Check {
                    name: format!("{m} cluster holdout σ ratio >= 1.5"),
                    pass: worst >= 1.5,
                    detail: format!("min ratio {worst:.3} over {} targets", r.len()),
                });
            }
        }
        for s in self.pf.iter().filter(|s| s.method == "gp" || s.method == "si-gp") {
            out.push(Check {
                name: format!("{} setpoints keep voltages in band", s.method),
                pass: s.in_band_when_opf_in_band == s.opf_in_band && s.nonconverged == 0 && s.max_residual <= 1e-10,
                detail: format!(
                    "{}/{} in band, residual {:.2e}",
                    s.in_band_when_opf_in_band, s.opf_in_band, s.max_residual
                ),
            });
        }
        let si = self.pooled_reactive_errors(Method::SiGp);
        let lo = self.pooled_reactive_errors(Method::Lopf);
        if !si.is_empty() && !lo.is_empty() {
            for q in [0.5, 0.9] {
                let (a, b) = (quantile(&si, q), quantile(&lo, q));
                out.push(Check {
                    name: format!("si-gp reactive abs error quantile {q} <= lopf"),
                    pass: a <= b,
                    detail: format!("si-gp {a:.3e} lopf {b:.3e}"),
                });
            }
        }
        out
    }
}

const RPE_HEADER: [&str; 5] = ["target", "method", "instance", "rpe", "std"];
const PRED_HEADER: [&str; 11] = ["target", "method", "instance", "t", "truth", "mean", "std", "lo2", "hi2", "lo3", "hi3"];
const ECDF_HEADER: [&str; 4] = ["target", "method", "abs_error", "fraction"];
const TIMING_HEADER: [&str; 7] = ["stage", "method", "target", "T", "D", "count", "seconds_per_instance"];
const PF_HEADER: [&str; 10] = [
    "instance",
    "t",
    "method",
    "converged",
    "worst_deviation",
    "voltage_violations",
    "current_violations",
    "worst_loading",
    "pf_residual",
    "opf_in_band",
];
const RPE_T_HEADER: [&str; 6] = ["T", "method", "target", "train_size", "test_size", "mean_rpe"];
const DSWEEP_HEADER: [&str; 7] = ["D", "method", "target", "mean_rpe", "mean_std", "train_seconds", "predict_seconds"];
const CLUSTER_HEADER: [&str; 7] = ["target", "method", "phase", "train_size", "test_size", "mean_std", "mean_rpe"];

/// Writes the header even when there are no rows.
fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Runs every configured stage, writing artifacts to `cfg.out_dir`. Files are
/// assembled in a staging directory and moved into place only on success.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let staging = cfg.out_dir.join(".staging");
    if staging.exists() {
        fs::remove_dir_all(&staging).stage("output")?;
    }
    fs::create_dir_all(&staging).stage("output")?;
    match run_in(cfg, &staging) {
        Ok(rep) => {
            for entry in fs::read_dir(&staging).stage("output")? {
                let entry = entry.stage("output")?;
                fs::rename(entry.path(), cfg.out_dir.join(entry.file_name())).stage("output")?;
            }
            fs::remove_dir_all(&staging).stage("output")?;
            Ok(rep)
        }
        Err(e) => {
            if let Err(rm) = fs::remove_dir_all(&staging) {
                log::warn!("could not remove {}: {rm}", staging.display());
            }
            Err(e)
        }
    }
}

fn run_in(cfg: &PipelineConfig, dir: &Path) -> Result<EvaluationReport> {
    let f = cfg.resolve_feeder().stage("config")?;
    let lay = Layout { n: f.n(), ng: f.ng() };
    let targets = if cfg.targets.is_empty() { Target::all_setpoints(&f) } else { cfg.targets.clone() };
    let rows: Vec<usize> = targets
        .iter()
        .map(|t| t.index(&f).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<_>>()
        .stage("config")?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?).stage("output")?;

    let set = gen_scenarios(&f, &cfg.scenarios.config, cfg.scenarios.seed).stage("scenarios")?;
    let times: Vec<f64> = set.scenarios.iter().map(|s| s.t).collect();
    let n_sc = times.len();
    let train_sc = stride_indices(&times, cfg.split.train_stride_min);
    let mut want_jac = vec![false; n_sc];
    if cfg.any_grads() {
        let timing_t = cfg.experiments.timing.iter().flat_map(|t| t.t.iter());
        let extra = cfg.experiments.rpe_vs_t.iter().chain(timing_t).flat_map(|&t| uniform_indices(n_sc, t));
        for i in train_sc.iter().copied().chain(extra) {
            want_jac[i] = true;
        }
    }

    let ps = build_socp(&f);
    let dopts = DatasetOptions { jac_rows: rows.clone(), ..Default::default() };
    let (mut built, summary) = build_dataset(&f, &ps, &set.scenarios, &want_jac, &dopts);
    if built.is_empty() {
        return Err(Error::Numerical("no OPF instance solved".into())).stage("dataset");
    }
    if cfg.drop_degenerate {
        built.retain(|r| !r.degenerate);
    }
    let data_path = dir.join("dataset.jsonl");
    write_jsonl(&built, &data_path).stage("dataset")?;
    drop(built);
    let dataset_hash = sha256_file(&data_path).stage("dataset")?;
    let records = read_jsonl(&data_path).stage("dataset")?;
    log::info!(
        "dataset: {} instances, {} failed, {} degenerate in {:.1}s",
        records.len(),
        summary.failed.len(),
        summary.degenerate,
        summary.seconds
    );

    // scenario index -> record position
    let mut pos = vec![None; n_sc];
    for (k, r) in records.iter().enumerate() {
        pos[r.index] = Some(k);
    }
    let to_rec = |idx: &[usize]| -> Vec<usize> { idx.iter().filter_map(|&i| pos[i]).collect() };
    let train = to_rec(&train_sc);
    let test = complement(records.len(), &train);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!("split leaves {} train and {} test instances", train.len(), test.len())))
            .stage("split");
    }

    let learned: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.mode().is_some()).collect();
    let need_si = learned.iter().any(|m| m.needs_grads());
    let fit_opts = FitOptions { seed: cfg.seeds.fit, ..Default::default() };

    // stage 2: shared hyperparameters, then one model per (target, method)
    let fits: Vec<TargetFit> = if learned.is_empty() {
        Vec::new()
    } else {
        targets
            .par_iter()
            .zip(&rows)
            .map(|(&t, &row)| fit_target(&records, &train, t, row, need_si, &fit_opts))
            .collect::<Result<_>>()
            .stage("fit")?
    };
    let jobs: Vec<(usize, Method)> = (0..fits.len()).flat_map(|k| learned.iter().map(move |&m| (k, m))).collect();
    let models: Vec<(Surrogate, usize, f64)> = jobs
        .par_iter()
        .map(|&(k, m)| {
            let started = Instant::now();
            let (s, dropped) = train_surrogate(m, &records, &train, rows[k], &fits[k], &cfg.rf)?;
            Ok((s, dropped, started.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()
        .stage("train")?;

    // stage 3: held-out predictions
    let mut results = Vec::new();
    let mut timing = Vec::new();
    let truths: Vec<Vec<f64>> = rows.iter().map(|&row| test.iter().map(|&i| records[i].x[row]).collect()).collect();
    for ((k, m), (model, dropped, secs)) in jobs.iter().zip(&models) {
        let (est, std, clamped, per) = predict_all(model, &records, &test);
        let truth = &truths[*k];
        let rpe = rpe_with(&est, truth, mean(truth)).stage("evaluate")?;
        let train_size = train.len() - dropped;
        timing.push(TimingRow {
            stage: "train".into(),
            method: m.name().into(),
            target: targets[*k].to_string(),
            t: Some(train_size),
            d: m.is_rf().then_some(cfg.rf.d),
            count: 1,
            seconds_per_instance: *secs,
        });
        timing.push(TimingRow {
            stage: "predict".into(),
            method: m.name().into(),
            target: targets[*k].to_string(),
            t: Some(train_size),
            d: m.is_rf().then_some(cfg.rf.d),
            count: test.len(),
            seconds_per_instance: per,
        });
        results.push(MethodResult {
            target: targets[*k],
            method: *m,
            instances: test.clone(),
            truth: truth.clone(),
            mean_rpe: mean(&rpe),
            summary: summarize(&rpe),
            mean_std: Some(mean(&std)),
            std: Some(std),
            estimate: est,
            rpe,
            clamped,
            train_size,
            dropped: *dropped,
            train_seconds: *secs,
            predict_seconds: per,
        });
    }

    let mut lopf_sols: Option<Vec<LopfSolution>> = None;
    if cfg.methods.contains(&Method::Lopf) {
        let v0 = f.fixed_v0().unwrap_or(1.0);
        let model = build_rx(&f, v0);
        let lo = LopfOptions { v0, ..Default::default() };
        let started = Instant::now();
        let sols: Vec<LopfSolution> = test
            .iter()
            .map(|&i| solve_lopf(&f, &model, &records[i].theta_vec(), &lo))
            .collect::<Result<_>>()
            .stage("lopf")?;
        let per = started.elapsed().as_secs_f64() / test.len() as f64;
        timing.push(TimingRow {
            stage: "predict".into(),
            method: "lopf".into(),
            target: "all".into(),
            t: None,
            d: None,
            count: test.len(),
            seconds_per_instance: per,
        });
        for (k, &t) in targets.iter().enumerate() {
            let est: Vec<f64> = sols.iter().map(|s| lopf_value(&f, s, t)).collect::<Result<_>>().stage("lopf")?;
            let truth = &truths[k];
            let rpe = rpe_with(&est, truth, mean(truth)).stage("evaluate")?;
            results.push(MethodResult {
                target: t,
                method: Method::Lopf,
                instances: test.clone(),
                truth: truth.clone(),
                mean_rpe: mean(&rpe),
                summary: summarize(&rpe),
                mean_std: None,
                std: None,
                estimate: est,
                rpe,
                clamped: 0,
                train_size: 0,
                dropped: 0,
                train_seconds: 0.0,
                predict_seconds: per,
            });
        }
        lopf_sols = Some(sols);
    }
    let solve_times: Vec<f64> = records.iter().map(|r| r.solve_time).collect();
    timing.insert(
        0,
        TimingRow {
            stage: "solve".into(),
            method: "socp".into(),
            target: "all".into(),
            t: None,
            d: None,
            count: records.len(),
            seconds_per_instance: mean(&solve_times),
        },
    );
    results.sort_by_key(|r| (targets.iter().position(|&t| t == r.target), r.method));

    let (pf, pf_rows) = if cfg.experiments.pf_check {
        pf_check(&f, &lay, &records, &test, &targets, &results, lopf_sols.as_deref(), cfg.experiments.band)
            .stage("pf")?
    } else {
        (Vec::new(), Vec::new())
    };

    let rpe_vs_t = rpe_sweep(cfg, &records, &pos, &targets, &rows, &fit_opts).stage("rpe_vs_T")?;
    let dsweep = d_sweep(cfg, &records, &train, &test, &rows, &fits, &truths).stage("dsweep")?;
    let cluster = match &cfg.experiments.cluster {
        Some(c) => cluster_holdout(c, cfg, &records, &train, &rows, &fits).stage("cluster")?,
        None => Vec::new(),
    };
    if let Some(tc) = &cfg.experiments.timing {
        timing.extend(timing_sweep(tc, cfg, &records, &pos, &rows, &fits).stage("timing")?);
    }

    let report = EvaluationReport {
        feeder: f.name.clone(),
        dataset_hash,
        dataset: summary,
        train_size: train.len(),
        test_size: test.len(),
        fits,
        results,
        pf,
        pf_rows,
        rpe_vs_t,
        dsweep,
        cluster,
        timing,
    };
    write_artifacts(&report, &records, dir).stage("output")?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn pf_check(
    f: &FeederModel,
    lay: &Layout,
    records: &[OpfRecord],
    test: &[usize],
    targets: &[Target],
    results: &[MethodResult],
    lopf: Option<&[LopfSolution]>,
    band: f64,
) -> Result<(Vec<PfSummary>, Vec<PfRow>)> {
    let ids: Vec<u32> = f.inverters.iter().map(|i| f.bus_ids[i.bus - 1]).collect();
    let have_all = ids.iter().all(|&b| targets.contains(&Target::Pg(b)) && targets.contains(&Target::Qg(b)));
    let mut methods: Vec<Method> = results.iter().map(|r| r.method).filter(|m| *m != Method::Lopf).collect();
    methods.sort();
    methods.dedup();
    if !have_all {
        log::warn!("power-flow check needs pg and qg of every inverter; checking OPF and LOPF setpoints only");
        methods.clear();
    }
    let find = |t: Target, m: Method| results.iter().find(|r| r.target == t && r.method == m);
    let opts = PfOptions::default();
    let mut rows = Vec::new();
    let mut sums: BTreeMap<String, PfSummary> = BTreeMap::new();
    for (j, &i) in test.iter().enumerate() {
        let r = &records[i];
        let theta = r.theta_vec();
        let v0 = f.fixed_v0().unwrap_or(r.x[lay.v0()]);
        let mut sources: Vec<(String, DVector<f64>, DVector<f64>)> = vec![(
            "opf".into(),
            DVector::from_fn(f.ng(), |k, _| r.x[lay.pg(k)]),
            DVector::from_fn(f.ng(), |k, _| r.x[lay.qg(k)]),
        )];
        for &m in &methods {
            let pg = DVector::from_fn(f.ng(), |k, _| find(Target::Pg(ids[k]), m).map_or(f64::NAN, |x| x.estimate[j]));
            let qg = DVector::from_fn(f.ng(), |k, _| find(Target::Qg(ids[k]), m).map_or(f64::NAN, |x| x.estimate[j]));
            sources.push((m.name().into(), pg, qg));
        }
        if let Some(ls) = lopf {
            sources.push(("lopf".into(), ls[j].pg.clone(), ls[j].qg.clone()));
        }
        let mut opf_ok = false;
        for (name, pg, qg) in sources {
            let (p, q) = net_injections(f, &theta, &pg, &qg)?;
            let row = match solve_pf(f, &p, &q, v0, &opts) {
                Ok(s) => {
                    let lim = check_limits(&s, f, band);
                    PfRow {
                        instance: r.index,
                        t: r.t,
                        method: name,
                        converged: true,
                        worst_deviation: lim.worst_deviation,
                        voltage_violations: lim.voltage_violations.len(),
                        current_violations: lim.current_violations.len(),
                        worst_loading: lim.worst_loading,
                        pf_residual: s.residual,
                        opf_in_band: false,
                    }
                }
                Err(Error::PowerFlow(msg)) => {
                    log::warn!("instance {}: {name} setpoints: {msg}", r.index);
                    PfRow {
                        instance: r.index,
                        t: r.t,
                        method: name,
                        converged: false,
                        worst_deviation: f64::NAN,
                        voltage_violations: 0,
                        current_violations: 0,
                        worst_loading: f64::NAN,
                        pf_residual: f64::NAN,
                        opf_in_band: false,
                    }
                }
                Err(e) => return Err(e),
            };
            let in_band = row.converged && row.voltage_violations == 0;
            if row.method == "opf" {
                opf_ok = in_band;
            }
            let s = sums.entry(row.method.clone()).or_insert_with(|| PfSummary {
                method: row.method.clone(),
                instances: 0,
                nonconverged: 0,
                opf_in_band: 0,
                in_band_when_opf_in_band: 0,
                max_residual: 0.0,
            });
            s.instances += 1;
            s.nonconverged += usize::from(!row.converged);
            if row.converged {
                s.max_residual = s.max_residual.max(row.pf_residual);
            }
            if opf_ok {
                s.opf_in_band += 1;
                s.in_band_when_opf_in_band += usize::from(in_band);
            }
            rows.push(PfRow { opf_in_band: opf_ok, ..row });
        }
    }
    Ok((sums.into_values().collect(), rows))
}

fn rpe_sweep(
    cfg: &PipelineConfig,
    records: &[OpfRecord],
    pos: &[Option<usize>],
    targets: &[Target],
    rows: &[usize],
    fit_opts: &FitOptions,
) -> Result<Vec<RpeVsTRow>> {
    let methods: Vec<Method> = [Method::Gp, Method::SiGp].into_iter().filter(|m| cfg.methods.contains(m)).collect();
    let mut out = Vec::new();
    if methods.is_empty() {
        return Ok(out);
    }
    let need_si = methods.contains(&Method::SiGp);
    for &t in &cfg.experiments.rpe_vs_t {
        let train: Vec<usize> = uniform_indices(pos.len(), t).into_iter().filter_map(|i| pos[i]).collect();
        let test = complement(records.len(), &train);
        let per: Vec<Vec<(f64, usize)>> = targets
            .par_iter()
            .zip(rows)
            .map(|(&tg, &row)| {
                let fit = fit_target(records, &train, tg, row, need_si, fit_opts)?;
                let truth: Vec<f64> = test.iter().map(|&i| records[i].x[row]).collect();
                methods
                    .iter()
                    .map(|&m| {
                        let (model, dropped) = train_surrogate(m, records, &train, row, &fit, &cfg.rf)?;
                        let (est, _, _, _) = predict_all(&model, records, &test);
                        Ok((mean(&rpe_with(&est, &truth, mean(&truth))?), train.len() - dropped))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for (j, &m) in methods.iter().enumerate() {
            for (k, tg) in targets.iter().enumerate() {
                out.push(RpeVsTRow {
                    t,
                    method: m.name().into(),
                    target: tg.to_string(),
                    train_size: per[k][j].1,
                    test_size: test.len(),
                    mean_rpe: per[k][j].0,
                });
            }
            let all: Vec<f64> = per.iter().map(|v| v[j].0).collect();
            out.push(RpeVsTRow {
                t,
                method: m.name().into(),
                target: "all".into(),
                train_size: train.len(),
                test_size: test.len(),
                mean_rpe: mean(&all),
            });
        }
    }
    Ok(out)
}

fn d_sweep(
    cfg: &PipelineConfig,
    records: &[OpfRecord],
    train: &[usize],
    test: &[usize],
    rows: &[usize],
    fits: &[TargetFit],
    truths: &[Vec<f64>],
) -> Result<Vec<DsweepRow>> {
    let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.is_rf()).collect();
    let mut out = Vec::new();
    for &d in &cfg.experiments.dsweep {
        let rf = RfConfig { d, seed: cfg.rf.seed };
        for &m in &methods {
            for (k, fit) in fits.iter().enumerate() {
                let started = Instant::now();
                let (model, _) = train_surrogate(m, records, train, rows[k], fit, &rf)?;
                let secs = started.elapsed().as_secs_f64();
                let (est, std, _, per) = predict_all(&model, records, test);
                out.push(DsweepRow {
                    d,
                    method: m.name().into(),
                    target: fit.target.to_string(),
                    mean_rpe: mean(&rpe_with(&est, &truths[k], mean(&truths[k]))?),
                    mean_std: mean(&std),
                    train_seconds: secs,
                    predict_seconds: per,
                });
            }
        }
    }
    Ok(out)
}

/// Clusters all instances, withholds the last `holdout` clusters from training,
/// and compares predictive σ on their test instances before and after adding
/// their training instances back. Hyperparameters stay fixed across phases.
fn cluster_holdout(
    c: &ClusterConfig,
    cfg: &PipelineConfig,
    records: &[OpfRecord],
    train: &[usize],
    rows: &[usize],
    fits: &[TargetFit],
) -> Result<Vec<ClusterRow>> {
    let thetas: Vec<DVector<f64>> = records.iter().map(|r| r.theta_vec()).collect();
    let km = kmeans(&thetas, c.k, cfg.seeds.kmeans)?;
    let held = |i: usize| km.assignments[i] >= c.k - c.holdout;
    let is_train = {
        let mut v = vec![false; records.len()];
        for &i in train {
            v[i] = true;
        }
        v
    };
    let eval: Vec<usize> = (0..records.len()).filter(|&i| held(i) && !is_train[i]).collect();
    let seen: Vec<usize> = train.iter().copied().filter(|&i| !held(i)).collect();
    if eval.is_empty() || seen.is_empty() {
        return Err(Error::Config(format!(
            "cluster split leaves {} seen training and {} held-out test instances",
            seen.len(),
            eval.len()
        )));
    }
    let mut out = Vec::new();
    for (k, fit) in fits.iter().enumerate() {
        let truth: Vec<f64> = eval.iter().map(|&i| records[i].x[rows[k]]).collect();
        for &m in &c.methods {
            if m.needs_grads() && fit.sensitivity.is_none() {
                continue;
            }
            for (phase, idx) in [("holdout", &seen[..]), ("all", train)] {
                let (model, dropped) = train_surrogate(m, records, idx, rows[k], fit, &cfg.rf)?;
                let (est, std, _, _) = predict_all(&model, records, &eval);
                out.push(ClusterRow {
                    target: fit.target.to_string(),
                    method: m.name().into(),
                    phase: phase.into(),
                    train_size: idx.len() - dropped,
                    test_size: eval.len(),
                    mean_std: mean(&std),
                    mean_rpe: mean(&rpe_with(&est, &truth, mean(&truth))?),
                });
            }
        }
    }
    Ok(out)
}

/// Per-instance prediction time of the first target's models at several
/// training sizes, reusing the main fit's hyperparameters.
fn timing_sweep(
    tc: &TimingConfig,
    cfg: &PipelineConfig,
    records: &[OpfRecord],
    pos: &[Option<usize>],
    rows: &[usize],
    fits: &[TargetFit],
) -> Result<Vec<TimingRow>> {
    let Some(fit) = fits.first() else { return Ok(Vec::new()) };
    let mut out = Vec::new();
    for &t in &tc.t {
        let train: Vec<usize> = uniform_indices(pos.len(), t).into_iter().filter_map(|i| pos[i]).collect();
        let rest = complement(records.len(), &train);
        let test: Vec<usize> = uniform_indices(rest.len(), tc.max_instances).into_iter().map(|i| rest[i]).collect();
        for &m in &tc.methods {
            let (model, dropped) = train_surrogate(m, records, &train, rows[0], fit, &cfg.rf)?;
            // best of several passes: the sweep compares timings across T
            let per = (0..5).map(|_| predict_all(&model, records, &test).3).fold(f64::INFINITY, f64::min);
            out.push(TimingRow {
                stage: "predict_sweep".into(),
                method: m.name().into(),
                target: fit.target.to_string(),
                t: Some(train.len() - dropped),
                d: m.is_rf().then_some(cfg.rf.d),
                count: test.len(),
                seconds_per_instance: per,
            });
        }
    }
    Ok(out)
}

fn write_artifacts(rep: &EvaluationReport, records: &[OpfRecord], dir: &Path) -> Result<()> {
    let mut rpe_rows = Vec::new();
    let mut pred_rows = Vec::new();
    let mut ecdf_rows = Vec::new();
    for r in &rep.results {
        for (j, &i) in r.instances.iter().enumerate() {
            let s = r.std.as_ref().map(|v| v[j]);
            let m = r.estimate[j];
            rpe_rows.push(RpeRow {
                target: r.target.to_string(),
                method: r.method.name().into(),
                instance: records[i].index,
                rpe: r.rpe[j],
                std: s,
            });
            pred_rows.push(PredictionRow {
                target: r.target.to_string(),
                method: r.method.name().into(),
                instance: records[i].index,
                t: records[i].t,
                truth: r.truth[j],
                mean: m,
                std: s,
                lo2: s.map(|s| m - 2.0 * s),
                hi2: s.map(|s| m + 2.0 * s),
                lo3: s.map(|s| m - 3.0 * s),
                hi3: s.map(|s| m + 3.0 * s),
            });
        }
        for (abs_error, fraction) in ecdf(&r.abs_error()) {
            ecdf_rows.push(EcdfRow {
                target: r.target.to_string(),
                method: r.method.name().into(),
                abs_error,
                fraction,
            });
        }
    }
    write_csv(&dir.join("rpe.csv"), &RPE_HEADER, &rpe_rows)?;
    write_csv(&dir.join("predictions.csv"), &PRED_HEADER, &pred_rows)?;
    write_csv(&dir.join("ecdf.csv"), &ECDF_HEADER, &ecdf_rows)?;
    write_csv(&dir.join("timing.csv"), &TIMING_HEADER, &rep.timing)?;
    write_csv(&dir.join("pf_report.csv"), &PF_HEADER, &rep.pf_rows)?;
    write_csv(&dir.join("rpe_vs_t.csv"), &RPE_T_HEADER, &rep.rpe_vs_t)?;
    write_csv(&dir.join("dsweep.csv"), &DSWEEP_HEADER, &rep.dsweep)?;
    write_csv(&dir.join("cluster.csv"), &CLUSTER_HEADER, &rep.cluster)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&ReportFile::from(rep))?)?;
    Ok(())
}

/// Compact report: statistics without the per-instance arrays.
#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    feeder: &'a str,
    dataset_hash: &'a str,
    dataset: &'a DatasetSummary,
    train_size: usize,
    test_size: usize,
    fits: &'a [TargetFit],
    results: Vec<ResultSummary>,
    pf: &'a [PfSummary],
    checks: Vec<Check>,
}

#[derive(Debug, Serialize)]
struct ResultSummary {
    target: String,
    method: String,
    mean_rpe: f64,
    rpe: Summary,
    mean_std: Option<f64>,
    clamped: usize,
    train_size: usize,
    dropped: usize,
}

impl<'a> From<&'a EvaluationReport> for ReportFile<'a> {
    fn from(r: &'a EvaluationReport) -> Self {
        ReportFile {
            feeder: &r.feeder,
            dataset_hash: &r.dataset_hash,
            dataset: &r.dataset,
            train_size: r.train_size,
            test_size: r.test_size,
            fits: &r.fits,
            results: r
                .results
                .iter()
                .map(|m| ResultSummary {
                    target: m.target.to_string(),
                    method: m.method.name().into(),
                    mean_rpe: m.mean_rpe,
                    rpe: m.summary,
                    mean_std: m.mean_std,
                    clamped: m.clamped,
                    train_size: m.train_size,
                    dropped: m.dropped,
                })
                .collect(),
            pf: &r.pf,
            checks: r.self_check(),
        }
    }
}
