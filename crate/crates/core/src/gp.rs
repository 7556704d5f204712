//! Exact Gaussian-process regression of one scalar OPF output, optionally
//! conditioned on gradient labels as well.
//!
//! With gradients the label vector is `[y_1..y_T; ẏ_1; ..; ẏ_T]`, each `ẏ_t`
//! of length `M`, and the covariance blocks are the kernel, its gradient and
//! its mixed Hessian.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::linalg::Cholesky;
use crate::optim::{bfgs_box, golden_section, BfgsOptions};

/// Gaussian kernel `α exp(−β/2 ‖Δ‖²)` plus label noise `γ` and gradient-label
/// noise `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma, self.epsilon]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("hyperparameters must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Plain,
    /// Conditioned on gradient labels too.
    Sensitivity,
}

/// Labeled samples of one target. `grads` is all-or-nothing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSet {
    pub target: String,
    pub thetas: Vec<DVector<f64>>,
    pub y: Vec<f64>,
    pub grads: Option<Vec<DVector<f64>>>,
}

impl TrainingSet {
    pub fn new(
        target: impl Into<String>,
        thetas: Vec<DVector<f64>>,
        y: Vec<f64>,
        grads: Option<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let m = thetas[0].len();
        check_len("labels", thetas.len(), y.len())?;
        for t in &thetas {
            check_len("theta", m, t.len())?;
        }
        if let Some(g) = &grads {
            check_len("gradient labels", thetas.len(), g.len())?;
            for v in g {
                check_len("gradient", m, v.len())?;
            }
        }
        Ok(TrainingSet {
            target: target.into(),
            thetas,
            y,
            grads,
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.thetas.first().map_or(0, |t| t.len())
    }

    pub fn subset(&self, idx: &[usize]) -> TrainingSet {
        TrainingSet {
            target: self.target.clone(),
            thetas: idx.iter().map(|&i| self.thetas[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            grads: self
                .grads
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i].clone()).collect()),
        }
    }

    /// Content hash over thetas, labels and gradients.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.target.as_bytes());
        for (i, t) in self.thetas.iter().enumerate() {
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
            h.update(self.y[i].to_le_bytes());
            if let Some(g) = &self.grads {
                for v in g[i].iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }

    fn labels(&self, mode: Mode) -> Result<DVector<f64>> {
        match mode {
            Mode::Plain => Ok(DVector::from_column_slice(&self.y)),
            Mode::Sensitivity => {
                let g = self.grads.as_ref().ok_or_else(|| {
                    Error::InvalidInput("sensitivity mode needs gradient labels".into())
                })?;
                let m = self.dim();
                let mut out = DVector::zeros(self.len() * (m + 1));
                out.rows_mut(0, self.len()).copy_from_slice(&self.y);
                for (t, gt) in g.iter().enumerate() {
                    out.rows_mut(self.len() + t * m, m).copy_from(gt);
                }
                Ok(out)
            }
        }
    }
}

pub fn kernel(a: &DVector<f64>, b: &DVector<f64>, h: &Hyperparams) -> f64 {
    h.alpha * (-0.5 * h.beta * (a - b).norm_squared()).exp()
}

/// Gradient of `k(θi, θj)` with respect to `θj`: `β k (θi − θj)`.
pub fn kernel_grad(ti: &DVector<f64>, tj: &DVector<f64>, h: &Hyperparams) -> DVector<f64> {
    (ti - tj) * (h.beta * kernel(ti, tj, h))
}

/// Mixed Hessian `β k [I − β Δ Δᵀ]`, `Δ = θi − θj`.
pub fn kernel_hess(ti: &DVector<f64>, tj: &DVector<f64>, h: &Hyperparams) -> DMatrix<f64> {
    let d = ti - tj;
    let k = kernel(ti, tj, h);
    let m = d.len();
    let mut out = -(&d * d.transpose()) * (h.beta * h.beta * k);
    for i in 0..m {
        out[(i, i)] += h.beta * k;
    }
    out
}

/// Training covariance: `T×T` in plain mode, `T(M+1)` square with gradients.
pub fn build_cov(thetas: &[DVector<f64>], h: &Hyperparams, mode: Mode) -> DMatrix<f64> {
    let t = thetas.len();
    let m = thetas.first().map_or(0, |v| v.len());
    let n = match mode {
        Mode::Plain => t,
        Mode::Sensitivity => t * (m + 1),
    };
    let mut c = DMatrix::zeros(n, n);
    for i in 0..t {
        for j in 0..=i {
            let k = kernel(&thetas[i], &thetas[j], h);
            c[(i, j)] = k;
            c[(j, i)] = k;
        }
        c[(i, i)] += h.gamma;
    }
    if mode == Mode::Plain {
        return c;
    }
    for i in 0..t {
        for j in 0..t {
            let d = &thetas[i] - &thetas[j];
            let k = c[(i, j)] - if i == j { h.gamma } else { 0.0 };
            let bk = h.beta * k;
            // y_i against ẏ_j
            let oj = t + j * m;
            for a in 0..m {
                let v = bk * d[a];
                c[(i, oj + a)] = v;
                c[(oj + a, i)] = v;
            }
            if j > i {
                continue;
            }
            // ẏ_i against ẏ_j
            let oi = t + i * m;
            for a in 0..m {
                for b in 0..m {
                    let mut v = -h.beta * bk * d[a] * d[b];
                    if a == b {
                        v += bk;
                    }
                    c[(oi + a, oj + b)] = v;
                    c[(oj + b, oi + a)] = v;
                }
            }
            if i == j {
                for a in 0..m {
                    c[(oi + a, oi + a)] += h.epsilon;
                }
            }
        }
    }
    c
}

/// Cross-covariance between the latent value at `x` and the training labels.
fn cross_cov(x: &DVector<f64>, thetas: &[DVector<f64>], h: &Hyperparams, mode: Mode) -> DVector<f64> {
    let t = thetas.len();
    let m = x.len();
    let n = match mode {
        Mode::Plain => t,
        Mode::Sensitivity => t * (m + 1),
    };
    let mut s = DVector::zeros(n);
    for (j, tj) in thetas.iter().enumerate() {
        let k = kernel(x, tj, h);
        s[j] = k;
        if mode == Mode::Sensitivity {
            let bk = h.beta * k;
            let o = t + j * m;
            for a in 0..m {
                s[o + a] = bk * (x[a] - tj[a]);
            }
        }
    }
    s
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log marginal likelihood of the labels under `h`.
pub fn log_likelihood(ts: &TrainingSet, h: &Hyperparams, mode: Mode) -> Result<f64> {
    let y = ts.labels(mode)?;
    let c = Cholesky::with_jitter(&build_cov(&ts.thetas, h, mode))?;
    let a = c.forward(&y);
    Ok(-0.5 * a.norm_squared() - 0.5 * c.log_det() - 0.5 * y.len() as f64 * LN_2PI)
}

/// Plain-mode log marginal likelihood and its gradient in
/// `(ln α, ln β, ln γ)`.
pub fn log_likelihood_grad(ts: &TrainingSet, h: &Hyperparams) -> Result<(f64, [f64; 3])> {
    let t = ts.len();
    let y = DVector::from_column_slice(&ts.y);
    let mut d2 = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in 0..i {
            let v = (&ts.thetas[i] - &ts.thetas[j]).norm_squared();
            d2[(i, j)] = v;
            d2[(j, i)] = v;
        }
    }
    let kern = d2.map(|v: f64| h.alpha * (-0.5 * h.beta * v).exp());
    let mut cov = kern.clone();
    for i in 0..t {
        cov[(i, i)] += h.gamma;
    }
    let c = Cholesky::with_jitter(&cov)?;
    let a = c.solve(&y);
    let lml = -0.5 * y.dot(&a) - 0.5 * c.log_det() - 0.5 * t as f64 * LN_2PI;
    let inv = c.inverse();
    // ½ (aᵀ dK a − tr(K⁻¹ dK))
    let term = |dk: &DMatrix<f64>| 0.5 * (a.dot(&(dk * &a)) - inv.component_mul(dk).sum());
    let dk_beta = kern.component_mul(&d2.map(|v| -0.5 * h.beta * v));
    let g_gamma = 0.5 * h.gamma * (a.norm_squared() - inv.trace());
    Ok((lml, [term(&kern), term(&dk_beta), g_gamma]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Fit ε after (α, β, γ) when gradient labels are present.
    pub fit_epsilon: bool,
    /// Cap on the augmented covariance size used for the ε search; larger sets
    /// are subsampled evenly.
    pub eps_max_rows: usize,
    /// ε used when it is not fitted.
    pub default_epsilon: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: 8,
            seed: 0,
            max_iter: 200,
            fit_epsilon: true,
            eps_max_rows: 2500,
            default_epsilon: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub hyperparams: Hyperparams,
    pub log_likelihood: f64,
    /// Starts that ended at a stationary point.
    pub converged: usize,
    pub epsilon_fitted: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median pairwise squared distance, ignoring coincident pairs.
pub fn median_sq_dist(thetas: &[DVector<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..thetas.len() {
        for j in 0..i {
            let v = (&thetas[i] - &thetas[j]).norm_squared();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    let m = median(d);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Maximum-likelihood hyperparameters on the labels as given: multi-start
/// quasi-Newton over `(ln α, ln β, ln γ)` on the plain likelihood, then a 1-D
/// search for ε on the gradient-augmented likelihood with the others frozen.
pub fn fit_hyperparams(ts: &TrainingSet, opts: &FitOptions) -> Result<FitReport> {
    if ts.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let n = ts.len() as f64;
    let mean = ts.y.iter().sum::<f64>() / n;
    let var = ts.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let var = if var > 1e-300 { var } else { 1.0 };
    let med = median_sq_dist(&ts.thetas);
    let lo = DVector::from_vec(vec![(1e-4 * var).ln(), (1e-5 / med).ln(), (1e-8 * var).ln()]);
    let hi = DVector::from_vec(vec![(1e4 * var).ln(), (1e5 / med).ln(), (10.0 * var).ln()]);
    let init_lo = [(1e-2 * var).ln(), (1e-3 / med).ln(), (1e-8 * var).ln()];
    let init_hi = [(1e2 * var).ln(), (1e3 / med).ln(), var.ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let to_h = |p: &DVector<f64>| Hyperparams {
        alpha: p[0].exp(),
        beta: p[1].exp(),
        gamma: p[2].exp(),
        epsilon: opts.default_epsilon,
    };
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut converged = 0;
    for _ in 0..opts.starts.max(1) {
        let x0 = DVector::from_fn(3, |i, _| rng.random_range(init_lo[i]..=init_hi[i]));
        let fg = |p: &DVector<f64>| match log_likelihood_grad(ts, &to_h(p)) {
            Ok((l, g)) if l.is_finite() => (-l, -DVector::from_column_slice(&g)),
            _ => (f64::INFINITY, DVector::zeros(3)),
        };
        let m = bfgs_box(
            fg,
            &x0,
            &lo,
            &hi,
            &BfgsOptions {
                max_iter: opts.max_iter,
                grad_tol: 1e-6,
                f_tol: 1e-12,
            },
        );
        if !m.f.is_finite() {
            continue;
        }
        if m.converged {
            converged += 1;
        }
        if best.as_ref().is_none_or(|b| m.f < b.0) {
            best = Some((m.f, m.x));
        }
    }
    let (f, p) = best.ok_or_else(|| Error::Numerical("likelihood is not finite at any start".into()))?;
    if converged == 0 {
        log::warn!("hyperparameter search did not converge for {}; using best found", ts.target);
    }
    let mut h = to_h(&p);
    let mut lml = -f;
    let mut epsilon_fitted = false;
    if opts.fit_epsilon && ts.grads.is_some() {
        if let Some((eps, l)) = fit_epsilon(ts, &h, opts) {
            h.epsilon = eps;
            lml = l;
            epsilon_fitted = true;
        }
    }
    Ok(FitReport {
        hyperparams: h,
        log_likelihood: lml,
        converged,
        epsilon_fitted,
    })
}

/// Golden-section search for ε on the gradient-augmented likelihood with
/// `(α, β, γ)` from `h` held fixed. Returns `(ε, log-likelihood)`, or `None`
/// without gradient labels or when the likelihood is never finite.
pub fn fit_epsilon(ts: &TrainingSet, h: &Hyperparams, opts: &FitOptions) -> Option<(f64, f64)> {
    let g = ts.grads.as_ref()?;
    if ts.is_empty() {
        return None;
    }
    let m = ts.dim();
    let keep = (opts.eps_max_rows / (m + 1)).clamp(1, ts.len());
    let sub: Vec<usize> = (0..keep).map(|i| i * ts.len() / keep).collect();
    let sub_ts = ts.subset(&sub);
    let g2 = g.iter().map(|v| v.norm_squared()).sum::<f64>() / (g.len() * m.max(1)) as f64;
    let g2 = if g2 > 1e-300 { g2 } else { 1.0 };
    let (le, fe) = golden_section(
        |le| {
            let hh = Hyperparams { epsilon: le.exp(), ..*h };
            log_likelihood(&sub_ts, &hh, Mode::Sensitivity).map_or(f64::INFINITY, |l| -l)
        },
        (1e-8 * g2).ln(),
        (10.0 * g2).ln(),
        1e-3,
        60,
    );
    fe.is_finite().then(|| (le.exp(), -fe))
}

/// Affine label map `y = mean + scale·ŷ`; gradients scale by `scale` only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub scale: f64,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer { mean: 0.0, scale: 1.0 };

    pub fn fit(y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 1e-12 * mean.abs().max(1e-12) { sd } else { 1.0 };
        Standardizer { mean, scale }
    }

    pub fn apply(&self, ts: &TrainingSet) -> TrainingSet {
        TrainingSet {
            target: ts.target.clone(),
            thetas: ts.thetas.clone(),
            y: ts.y.iter().map(|v| (v - self.mean) / self.scale).collect(),
            grads: ts
                .grads
                .as_ref()
                .map(|g| g.iter().map(|v| v / self.scale).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// Variance came out negative and was clamped to zero.
    pub clamped: bool,
}

impl Prediction {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Trained exact GP for one target.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub target: String,
    pub mode: Mode,
    pub hyperparams: Hyperparams,
    pub scaler: Standardizer,
    pub thetas: Vec<DVector<f64>>,
    /// `Σ_11⁻¹ ȳ` on the standardized scale.
    pub weights: DVector<f64>,
    pub training_hash: String,
    chol: Cholesky,
}

impl GpModel {
    /// Trains on `ts` after mapping labels through `scaler`.
    pub fn train(ts: &TrainingSet, h: &Hyperparams, mode: Mode, scaler: Standardizer) -> Result<Self> {
        h.validate()?;
        if ts.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let std_ts = scaler.apply(ts);
        let y = std_ts.labels(mode)?;
        let chol = Cholesky::with_jitter(&build_cov(&ts.thetas, h, mode))?;
        let weights = chol.solve(&y);
        Ok(GpModel {
            target: ts.target.clone(),
            mode,
            hyperparams: *h,
            scaler,
            thetas: ts.thetas.clone(),
            weights,
            training_hash: ts.fingerprint(),
            chol,
        })
    }

    /// Standardizes labels, fits hyperparameters and trains.
    pub fn fit(ts: &TrainingSet, mode: Mode, opts: &FitOptions) -> Result<(Self, FitReport)> {
        let scaler = Standardizer::fit(&ts.y);
        let std_ts = scaler.apply(ts);
        let fit_opts = FitOptions {
            fit_epsilon: opts.fit_epsilon && mode == Mode::Sensitivity,
            ..opts.clone()
        };
        let rep = fit_hyperparams(&std_ts, &fit_opts)?;
        let model = GpModel::train(ts, &rep.hyperparams, mode, scaler)?;
        Ok((model, rep))
    }

    pub fn dim(&self) -> usize {
        self.thetas.first().map_or(0, |t| t.len())
    }

    pub fn predict(&self, x: &DVector<f64>) -> Prediction {
        let s = cross_cov(x, &self.thetas, &self.hyperparams, self.mode);
        let mean = s.dot(&self.weights);
        let v = self.chol.forward(&s);
        let mut var = self.hyperparams.alpha - v.norm_squared();
        let mut clamped = false;
        if var < 0.0 {
            if var < -1e-8 * self.hyperparams.alpha {
                log::warn!("negative predictive variance {var:.3e} clamped");
            }
            var = 0.0;
            clamped = true;
        }
        Prediction {
            mean: self.scaler.mean + self.scaler.scale * mean,
            variance: self.scaler.scale * self.scaler.scale * var,
            clamped,
        }
    }

    pub fn predict_mean(&self, x: &DVector<f64>) -> f64 {
        let s = cross_cov(x, &self.thetas, &self.hyperparams, self.mode);
        self.scaler.mean + self.scaler.scale * s.dot(&self.weights)
    }

    /// Gradient of the posterior mean with respect to the query point.
    pub fn predict_mean_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let h = &self.hyperparams;
        let t = self.thetas.len();
        let m = x.len();
        let mut g = DVector::zeros(m);
        for (j, tj) in self.thetas.iter().enumerate() {
            // ∂k(x, θj)/∂x = −β k (x − θj)
            g -= kernel_grad(x, tj, h) * self.weights[j];
            if self.mode == Mode::Sensitivity {
                let w = self.weights.rows(t + j * m, m);
                g += kernel_hess(x, tj, h) * w;
            }
        }
        g * self.scaler.scale
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            target: self.target.clone(),
            mode: self.mode,
            hyperparams: self.hyperparams,
            scaler: self.scaler,
            thetas: self.thetas.iter().map(|t| t.as_slice().to_vec()).collect(),
            weights: self.weights.as_slice().to_vec(),
            training_hash: self.training_hash.clone(),
            rf: None,
        }
    }

    /// Rebuilds the factorization from the stored training inputs.
    pub fn from_file(f: &ModelFile) -> Result<Self> {
        f.hyperparams.validate()?;
        let thetas: Vec<DVector<f64>> = f.thetas.iter().map(|t| DVector::from_column_slice(t)).collect();
        let m = thetas.first().map_or(0, |t| t.len());
        let n = match f.mode {
            Mode::Plain => thetas.len(),
            Mode::Sensitivity => thetas.len() * (m + 1),
        };
        check_len("weights", n, f.weights.len())?;
        let chol = Cholesky::with_jitter(&build_cov(&thetas, &f.hyperparams, f.mode))?;
        Ok(GpModel {
            target: f.target.clone(),
            mode: f.mode,
            hyperparams: f.hyperparams,
            scaler: f.scaler,
            thetas,
            weights: DVector::from_column_slice(&f.weights),
            training_hash: f.training_hash.clone(),
            chol,
        })
    }
}

/// Random-feature settings stored alongside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfSpec {
    pub seed: u64,
    #[serde(rename = "D")]
    pub d: usize,
}

/// On-disk model. Factorizations are recomputed on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub target: String,
    pub mode: Mode,
    pub hyperparams: Hyperparams,
    pub scaler: Standardizer,
    pub thetas: Vec<Vec<f64>>,
    /// Empty for random-feature models.
    #[serde(default)]
    pub weights: Vec<f64>,
    pub training_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rf: Option<RfSpec>,
}
