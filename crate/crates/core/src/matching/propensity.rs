//! Logistic propensity model fitted by iteratively reweighted least squares.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, DenseMatrix};
use crate::scalar::Scalar;

/// Matching covariates in model order.
pub const COVARIATE_NAMES: [&str; 3] = ["birth_year", "schooling_years", "ihs_earnings_38_39"];
pub const N_COVARIATES: usize = 3;

pub const MAX_ITERATIONS: usize = 100;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
const MIN_PER_CLASS: usize = 10;
/// Standardised slopes beyond this magnitude indicate (quasi-)separation.
const DIVERGENCE_BOUND: f64 = 25.0;

/// Logistic model `P(treated | x) = σ(b0 + Σ b_j x_j)` on the raw covariate scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitModel<T> {
    /// Intercept followed by one slope per covariate.
    pub coefficients: [T; N_COVARIATES + 1],
    pub iterations: usize,
    pub fitted: bool,
    /// Euclidean norm of the mean log-likelihood gradient (standardised scale) at exit.
    pub gradient_norm: T,
}

impl<T: Scalar> LogitModel<T> {
    pub fn linear_predictor(&self, x: &[T; N_COVARIATES]) -> T {
        let mut eta = self.coefficients[0];
        for j in 0..N_COVARIATES {
            eta += self.coefficients[j + 1] * x[j];
        }
        eta
    }

    pub fn probability(&self, x: &[T; N_COVARIATES]) -> T {
        sigmoid(self.linear_predictor(x))
    }
}

fn sigmoid<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

/// Fits the treated-vs-pool logistic model by IRLS.
///
/// Covariates are standardised internally for conditioning; the returned
/// coefficients are on the raw scale.
pub fn fit_propensity<T: Scalar>(
    treated: &[[T; N_COVARIATES]],
    pool: &[[T; N_COVARIATES]],
) -> Result<LogitModel<T>> {
    if treated.len() < MIN_PER_CLASS || pool.len() < MIN_PER_CLASS {
        return Err(Error::Validation(format!(
            "propensity model needs at least {MIN_PER_CLASS} observations per class (treated {}, pool {})",
            treated.len(),
            pool.len()
        )));
    }
    if treated.iter().chain(pool).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite propensity covariate".into()));
    }
    check_complete_separation(treated, pool)?;

    let n = treated.len() + pool.len();
    let nf = T::of_usize(n);
    let rows: Vec<(&[T; N_COVARIATES], T)> = treated
        .iter()
        .map(|x| (x, T::one()))
        .chain(pool.iter().map(|x| (x, T::zero())))
        .collect();

    let mut centre = [T::zero(); N_COVARIATES];
    let mut spread = [T::one(); N_COVARIATES];
    let mut active = [true; N_COVARIATES];
    for j in 0..N_COVARIATES {
        let m = rows.iter().map(|(x, _)| x[j]).sum::<T>() / nf;
        let v = rows.iter().map(|(x, _)| (x[j] - m) * (x[j] - m)).sum::<T>() / nf;
        centre[j] = m;
        if v > T::zero() {
            spread[j] = v.sqrt();
        } else {
            active[j] = false;
        }
    }
    let cols: Vec<usize> = (0..N_COVARIATES).filter(|&j| active[j]).collect();
    let p = cols.len() + 1;
    let design: Vec<Vec<T>> = rows
        .iter()
        .map(|(x, _)| {
            let mut r = Vec::with_capacity(p);
            r.push(T::one());
            r.extend(cols.iter().map(|&j| (x[j] - centre[j]) / spread[j]));
            r
        })
        .collect();
    let labels: Vec<T> = rows.iter().map(|(_, y)| *y).collect();

    let share = T::of_usize(treated.len()) / nf;
    let mut beta = vec![T::zero(); p];
    beta[0] = (share / (T::one() - share)).ln();
    // f32 cannot resolve a 1e-8 gradient; fall back to its own precision floor
    let tol = T::of(GRADIENT_TOLERANCE).max(T::epsilon() * T::of(1e3));
    let mut iterations = 0;
    let mut grad_norm = T::infinity();
    while iterations < MAX_ITERATIONS {
        let mut grad = vec![T::zero(); p];
        let mut info = DenseMatrix::zeros(p, p);
        for (x, &y) in design.iter().zip(&labels) {
            let eta: T = x.iter().zip(&beta).map(|(&a, &b)| a * b).sum();
            let pr = sigmoid(eta);
            let w = pr * (T::one() - pr);
            for a in 0..p {
                grad[a] += x[a] * (y - pr);
            }
            info.add_outer(x, w);
        }
        grad_norm = grad.iter().map(|&g| (g / nf) * (g / nf)).sum::<T>().sqrt();
        if grad_norm < tol {
            break;
        }
        iterations += 1;
        let chol = cholesky(&info).map_err(|idx| {
            let j = idx[0].saturating_sub(1);
            Error::Separation(COVARIATE_NAMES[cols.get(j).copied().unwrap_or(0)].to_string())
        })?;
        let step = chol.solve(&grad);
        for a in 0..p {
            beta[a] += step[a];
        }
        if let Some(j) = (1..p).find(|&a| beta[a].abs() > T::of(DIVERGENCE_BOUND)) {
            return Err(Error::Separation(COVARIATE_NAMES[cols[j - 1]].to_string()));
        }
    }
    if grad_norm >= tol {
        return Err(Error::Numerical(format!(
            "IRLS did not converge in {MAX_ITERATIONS} iterations (gradient norm {grad_norm})"
        )));
    }

    let mut coefficients = [T::zero(); N_COVARIATES + 1];
    coefficients[0] = beta[0];
    for (pos, &j) in cols.iter().enumerate() {
        let b = beta[pos + 1] / spread[j];
        coefficients[j + 1] = b;
        coefficients[0] -= b * centre[j];
    }
    Ok(LogitModel {
        coefficients,
        iterations,
        fitted: true,
        gradient_norm: grad_norm,
    })
}

fn check_complete_separation<T: Scalar>(
    treated: &[[T; N_COVARIATES]],
    pool: &[[T; N_COVARIATES]],
) -> Result<()> {
    for (j, name) in COVARIATE_NAMES.iter().enumerate() {
        let range = |xs: &[[T; N_COVARIATES]]| {
            xs.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), x| {
                (lo.min(x[j]), hi.max(x[j]))
            })
        };
        let (tlo, thi) = range(treated);
        let (plo, phi) = range(pool);
        if thi < plo || phi < tlo {
            return Err(Error::Separation(name.to_string()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, shift: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|i| {
                let a = (i as f64 * 0.618_033_988_75).fract();
                let b = (i as f64 * 0.414_213_562_37).fract();
                let c = (i as f64 * 0.732_050_807_57).fract();
                [1950.0 + 20.0 * a + shift, 9.0 + 6.0 * b, 12.0 + c]
            })
            .collect()
    }

    #[test]
    fn fitted_probabilities_average_to_treated_share() {
        let t = grid(300, 1.5);
        let p = grid(700, 0.0);
        let m = fit_propensity(&t, &p).unwrap();
        assert!(m.gradient_norm < GRADIENT_TOLERANCE);
        let mean: f64 = t.iter().chain(&p).map(|x| m.probability(x)).sum::<f64>() / 1000.0;
        assert!((mean - 0.3).abs() < 1e-8);
        assert!(m.coefficients[1] > 0.0);
    }

    #[test]
    fn too_few_observations() {
        assert!(matches!(
            fit_propensity(&grid(5, 0.0), &grid(50, 0.0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn perfect_separation_is_reported() {
        let t = grid(40, 100.0);
        let p = grid(40, 0.0);
        match fit_propensity(&t, &p) {
            Err(Error::Separation(name)) => assert_eq!(name, "birth_year"),
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn works_in_f32() {
        let t: Vec<[f32; 3]> = grid(200, 2.0)
            .into_iter()
            .map(|r| [r[0] as f32 - 1950.0, r[1] as f32, r[2] as f32])
            .collect();
        let p: Vec<[f32; 3]> = grid(400, 0.0)
            .into_iter()
            .map(|r| [r[0] as f32 - 1950.0, r[1] as f32, r[2] as f32])
            .collect();
        let m = fit_propensity(&t, &p).unwrap();
        assert!(m.coefficients[1] > 0.0);
    }
}
