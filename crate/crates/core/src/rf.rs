//! Random-feature approximation of the exact GP surrogates.
//!
//! The kernel is replaced by `α z(θ)ᵀz(θ')` with `D` random Fourier features,
//! so training and prediction work with `D×D` objects only. Hyperparameters are
//! taken from the exact-GP fit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, Error, Result};
use crate::gp::{Hyperparams, ModelFile, Mode, Prediction, RfSpec, Standardizer, TrainingSet};
use crate::linalg::{gram, Cholesky};

/// Frequencies (`M×D`, entries `N(0, β)`) and phases (`U[0, 2π)`).
#[derive(Debug, Clone, PartialEq)]
pub struct RfBasis {
    pub v: DMatrix<f64>,
    pub phi: DVector<f64>,
    pub seed: u64,
}

pub fn draw_basis(m: usize, d: usize, beta: f64, seed: u64) -> Result<RfBasis> {
    if d == 0 {
        return Err(Error::InvalidInput("feature count must be positive".into()));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("bad frequency variance {beta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, beta.sqrt()).expect("finite std");
    let v = DMatrix::from_fn(m, d, |_, _| normal.sample(&mut rng));
    let phi = DVector::from_fn(d, |_, _| rng.random_range(0.0..std::f64::consts::TAU));
    Ok(RfBasis { v, phi, seed })
}

impl RfBasis {
    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn features(&self) -> usize {
        self.v.ncols()
    }

    fn phases(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.v.tr_mul(theta) + &self.phi
    }

    /// `z_d = √(2/D) cos(v_dᵀθ + φ_d)`.
    pub fn z(&self, theta: &DVector<f64>) -> DVector<f64> {
        let c = (2.0 / self.features() as f64).sqrt();
        self.phases(theta).map(|a| c * a.cos())
    }

    /// `s_d = −√(2/D) sin(v_dᵀθ + φ_d)`; `∂z_d/∂θ = s_d v_d`.
    pub fn s(&self, theta: &DVector<f64>) -> DVector<f64> {
        let c = (2.0 / self.features() as f64).sqrt();
        self.phases(theta).map(|a| -c * a.sin())
    }

    /// `(s, J)` with `J = diag(s) Vᵀ` (`D×M`), the Jacobian of `z`.
    pub fn jac(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let s = self.s(theta);
        let mut j = self.v.transpose();
        for (d, mut row) in j.row_iter_mut().enumerate() {
            row *= s[d];
        }
        (s, j)
    }
}

/// Trained random-feature surrogate.
#[derive(Debug, Clone)]
pub struct RfModel {
    pub target: String,
    pub mode: Mode,
    pub hyperparams: Hyperparams,
    pub scaler: Standardizer,
    pub basis: RfBasis,
    pub thetas: Vec<DVector<f64>>,
    pub training_hash: String,
    /// `(αG + I)⁻¹ Z̄ᵀ𝐃⁻¹ȳ`.
    pub weights: DVector<f64>,
    /// `(αG + I)⁻¹ G`.
    pub shrink: DMatrix<f64>,
}

/// `Z_1` and `S_1` (`T×D`), one row per training input.
fn feature_rows(basis: &RfBasis, thetas: &[DVector<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (t, d) = (thetas.len(), basis.features());
    let mut z = DMatrix::zeros(t, d);
    let mut s = DMatrix::zeros(t, d);
    for (i, th) in thetas.iter().enumerate() {
        z.set_row(i, &basis.z(th).transpose());
        s.set_row(i, &basis.s(th).transpose());
    }
    (z, s)
}

/// `Z̄ᵀ𝐃⁻¹Z̄` with `𝐃 = blkdiag(γI, εI)`. The gradient block uses
/// `Σ_t diag(s_t)VᵀV diag(s_t) = (S_1ᵀS_1) ∘ (VᵀV)`.
pub fn rf_gram(basis: &RfBasis, thetas: &[DVector<f64>], h: &Hyperparams, mode: Mode) -> DMatrix<f64> {
    let (z, s) = feature_rows(basis, thetas);
    let mut g = gram(&z) / h.gamma;
    if mode == Mode::Sensitivity {
        let vv = gram(&basis.v);
        g += gram(&s).component_mul(&vv) / h.epsilon;
    }
    g
}

/// Trains on labels mapped through `scaler`, reusing exact-GP hyperparameters
/// fitted on the same scale.
pub fn train_rf(
    ts: &TrainingSet,
    h: &Hyperparams,
    basis: RfBasis,
    mode: Mode,
    scaler: Standardizer,
) -> Result<RfModel> {
    h.validate()?;
    if ts.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    check_len("theta", basis.dim(), ts.dim())?;
    let sts = scaler.apply(ts);
    let (z, s) = feature_rows(&basis, &ts.thetas);
    let mut g = gram(&z) / h.gamma;
    let mut rhs = z.tr_mul(&DVector::from_column_slice(&sts.y)) / h.gamma;
    if mode == Mode::Sensitivity {
        let grads = sts
            .grads
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("sensitivity mode needs gradient labels".into()))?;
        g += gram(&s).component_mul(&gram(&basis.v)) / h.epsilon;
        for (t, gt) in grads.iter().enumerate() {
            let vg = basis.v.tr_mul(gt);
            for d in 0..basis.features() {
                rhs[d] += s[(t, d)] * vg[d] / h.epsilon;
            }
        }
    }
    let mut a = &g * h.alpha;
    for i in 0..a.nrows() {
        a[(i, i)] += 1.0;
    }
    let chol = Cholesky::with_jitter(&a)?;
    let weights = chol.solve(&rhs);
    let shrink = chol.solve_mat(&g);
    Ok(RfModel {
        target: ts.target.clone(),
        mode,
        hyperparams: *h,
        scaler,
        basis,
        thetas: ts.thetas.clone(),
        training_hash: ts.fingerprint(),
        weights,
        shrink,
    })
}

impl RfModel {
    pub fn predict(&self, x: &DVector<f64>) -> Prediction {
        let z = self.basis.z(x);
        let a = self.hyperparams.alpha;
        let mean = a * z.dot(&self.weights);
        let mut var = a * z.norm_squared() - a * a * z.dot(&(&self.shrink * &z));
        let mut clamped = false;
        if var < 0.0 {
            if var < -1e-8 * a {
                log::warn!("negative random-feature variance {var:.3e} clamped");
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
        let z = self.basis.z(x);
        self.scaler.mean + self.scaler.scale * self.hyperparams.alpha * z.dot(&self.weights)
    }

    pub fn predict_mean_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let (_, j) = self.basis.jac(x);
        j.tr_mul(&self.weights) * (self.hyperparams.alpha * self.scaler.scale)
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
            rf: Some(RfSpec {
                seed: self.basis.seed,
                d: self.basis.features(),
            }),
        }
    }

    /// Redraws the basis and rebuilds the Gram solve from the stored inputs.
    pub fn from_file(f: &ModelFile) -> Result<Self> {
        let spec = f
            .rf
            .ok_or_else(|| Error::InvalidInput("model file has no random-feature section".into()))?;
        f.hyperparams.validate()?;
        check_len("weights", spec.d, f.weights.len())?;
        let thetas: Vec<DVector<f64>> = f.thetas.iter().map(|t| DVector::from_column_slice(t)).collect();
        let m = thetas.first().map_or(0, |t| t.len());
        let basis = draw_basis(m, spec.d, f.hyperparams.beta, spec.seed)?;
        let g = rf_gram(&basis, &thetas, &f.hyperparams, f.mode);
        let mut a = &g * f.hyperparams.alpha;
        for i in 0..a.nrows() {
            a[(i, i)] += 1.0;
        }
        let shrink = Cholesky::with_jitter(&a)?.solve_mat(&g);
        Ok(RfModel {
            target: f.target.clone(),
            mode: f.mode,
            hyperparams: f.hyperparams,
            scaler: f.scaler,
            basis,
            thetas,
            training_hash: f.training_hash.clone(),
            weights: DVector::from_column_slice(&f.weights),
            shrink,
        })
    }
}

/// Dense `Z̄_1` (`T(M+1)×D`), used to cross-check the structured Gram.
pub fn stacked_features(basis: &RfBasis, thetas: &[DVector<f64>], mode: Mode) -> DMatrix<f64> {
    let (t, m, d) = (thetas.len(), basis.dim(), basis.features());
    let rows = match mode {
        Mode::Plain => t,
        Mode::Sensitivity => t * (m + 1),
    };
    let mut out = DMatrix::zeros(rows, d);
    for (i, th) in thetas.iter().enumerate() {
        out.set_row(i, &basis.z(th).transpose());
        if mode == Mode::Sensitivity {
            let (_, j) = basis.jac(th);
            out.view_mut((t + i * m, 0), (m, d)).copy_from(&j.transpose());
        }
    }
    out
}
