//! Descriptive statistics and reference distributions.

use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().copied().sum::<T>() / T::of_usize(xs.len()))
}

/// Sample variance with the n−1 denominator.
pub fn sample_variance<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    Some(ss / T::of_usize(xs.len() - 1))
}

/// Population standard deviation of `values` weighted by `weights`.
pub fn weighted_population_sd<T: Scalar>(values: &[T], weights: &[T]) -> Result<T> {
    if values.len() != weights.len() {
        return Err(Error::Validation(format!(
            "values ({}) and weights ({}) differ in length",
            values.len(),
            weights.len()
        )));
    }
    let total: T = weights.iter().copied().sum();
    if values.is_empty() || total <= T::zero() {
        return Err(Error::Validation("empty weighted sample".into()));
    }
    // shifted by the first value so a constant series gives exactly zero
    let x0 = values[0];
    let m: T = x0 + values.iter().zip(weights).map(|(&v, &w)| (v - x0) * w).sum::<T>() / total;
    let var: T = values
        .iter()
        .zip(weights)
        .map(|(&v, &w)| w * (v - m) * (v - m))
        .sum::<T>()
        / total;
    Ok(var.max(T::zero()).sqrt())
}

/// Standardized mean difference `(mean_t − mean_c) / sqrt((var_t + var_c) / 2)`.
///
/// With zero pooled variance the result is 0 when the means coincide and
/// `+∞` (signed by the mean gap) otherwise.
pub fn standardized_difference<T: Scalar>(treated: &[T], control: &[T]) -> Result<T> {
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Validation(
            "standardized difference needs two non-empty samples".into(),
        ));
    }
    let mt = mean(treated).unwrap_or_else(T::zero);
    let mc = mean(control).unwrap_or_else(T::zero);
    let vt = sample_variance(treated).unwrap_or_else(T::zero);
    let vc = sample_variance(control).unwrap_or_else(T::zero);
    let pooled = ((vt + vc) / T::of(2.0)).sqrt();
    if pooled <= T::zero() {
        if mt == mc {
            return Ok(T::zero());
        }
        log::warn!("standardized difference with zero pooled variance and unequal means");
        return Ok(if mt > mc {
            T::infinity()
        } else {
            T::neg_infinity()
        });
    }
    Ok((mt - mc) / pooled)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0),
        Err(_) => 2.0 * (1.0 - normal_cdf(t.abs())),
    }
}

/// Upper quantile `q` of Student's t (e.g. 0.975 for a 95% interval).
pub fn t_quantile(q: f64, df: f64) -> f64 {
    match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => dist.inverse_cdf(q),
        Err(_) => normal_quantile(q),
    }
}

pub fn chi_squared_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    match ChiSquared::new(df) {
        Ok(dist) => (1.0 - dist.cdf(x)).clamp(0.0, 1.0),
        Err(_) => f64::NAN,
    }
}

pub fn f_sf(x: f64, df1: f64, df2: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    match FisherSnedecor::new(df1, df2) {
        Ok(dist) => (1.0 - dist.cdf(x)).clamp(0.0, 1.0),
        Err(_) => chi_squared_sf(x * df1, df1),
    }
}
