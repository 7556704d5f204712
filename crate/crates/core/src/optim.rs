//! Small box-constrained minimizers used by hyperparameter fitting.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective decrease falls below this.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 200,
            grad_tol: 1e-6,
            f_tol: 1e-12,
        }
    }
}

fn project(x: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Components at a bound whose gradient pushes further out of the box.
fn pinned(x: &DVector<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> Vec<bool> {
    (0..x.len())
        .map(|i| (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0))
        .collect()
}

fn projected_grad_norm(x: &DVector<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let p = pinned(x, g, lo, hi);
    (0..x.len()).filter(|&i| !p[i]).map(|i| g[i].abs()).fold(0.0, f64::max)
}

/// Projected quasi-Newton minimization over a box. `fg` returns the value and
/// gradient; non-finite values are treated as +∞ by the line search.
pub fn bfgs_box<F>(
    mut fg: F,
    x0: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    opts: &BfgsOptions,
) -> Minimum
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0.clone();
    project(&mut x, lo, hi);
    let (mut f, mut g) = fg(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut it = 0;
    let mut converged = false;
    while it < opts.max_iter {
        it += 1;
        if !f.is_finite() {
            break;
        }
        if projected_grad_norm(&x, &g, lo, hi) <= opts.grad_tol {
            converged = true;
            break;
        }
        let pin = pinned(&x, &g, lo, hi);
        let mut d = -(&h * &g);
        for i in 0..n {
            if pin[i] {
                d[i] = 0.0;
            }
        }
        // fall back to steepest descent when the quasi-Newton step is uphill
        if d.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -g.clone();
            for i in 0..n {
                if pin[i] {
                    d[i] = 0.0;
                }
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn = &x + &d * step;
            project(&mut xn, lo, hi);
            let (fnew, gnew) = fg(&xn);
            let decrease = g.dot(&(&xn - &x));
            if fnew.is_finite() && fnew <= f + 1e-4 * decrease {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            converged = true;
            break;
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        let rel = (f - fnew).abs() / f.abs().max(1.0);
        x = xn;
        let f_old = f;
        f = fnew;
        g = gnew;
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            h = &a * &h * a.transpose() + &s * s.transpose() * rho;
        }
        if rel < opts.f_tol && f <= f_old {
            converged = true;
            break;
        }
    }
    Minimum {
        x,
        f,
        iterations: it,
        converged,
    }
}

/// Golden-section minimization of a unimodal function on `[a, b]`. Returns
/// the best point seen.
pub fn golden_section<F>(mut f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let val = |v: f64| if v.is_finite() { v } else { f64::INFINITY };
    let mut fc = val(f(c));
    let mut fd = val(f(d));
    for _ in 0..max_iter {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = val(f(c));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = val(f(d));
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_unconstrained() {
        let fg = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            (f, g)
        };
        let lo = DVector::from_element(2, -5.0);
        let hi = DVector::from_element(2, 5.0);
        let m = bfgs_box(
            fg,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &lo,
            &hi,
            &BfgsOptions {
                max_iter: 500,
                grad_tol: 1e-8,
                f_tol: 0.0,
            },
        );
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn active_bound() {
        // minimum of (x+1)² + (y−2)² over [0,1]² is at (0,1)
        let fg = |x: &DVector<f64>| {
            let f = (x[0] + 1.0).powi(2) + (x[1] - 2.0).powi(2);
            (f, DVector::from_vec(vec![2.0 * (x[0] + 1.0), 2.0 * (x[1] - 2.0)]))
        };
        let m = bfgs_box(
            fg,
            &DVector::from_vec(vec![0.5, 0.5]),
            &DVector::zeros(2),
            &DVector::from_element(2, 1.0),
            &BfgsOptions::default(),
        );
        assert!(m.converged);
        assert_eq!(m.x.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn golden() {
        let (x, fx) = golden_section(|x| (x - 0.3).powi(2) + 1.0, -2.0, 4.0, 1e-10, 200);
        assert!((x - 0.3).abs() < 1e-7);
        assert!((fx - 1.0).abs() < 1e-15);
        // minimum at an end of the interval
        let (x, _) = golden_section(|x| x, 1.0, 2.0, 1e-9, 200);
        assert!((x - 1.0).abs() < 1e-8);
    }
}
