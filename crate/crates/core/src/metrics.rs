//! Scalar statistics: CCC, Pearson correlation, Gaussian KL divergence.
//!
//! All second moments use the population (1/N) convention.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn mean<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().sum::<T>() / T::of_usize(x.len())
}

/// Population standard deviation.
pub fn population_std<T: Scalar>(x: &[T]) -> T {
    let m = mean(x);
    (x.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::of_usize(x.len())).sqrt()
}

fn is_constant<T: Scalar>(x: &[T]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn check_pair<T>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "sequences differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 paired values, got {}",
            x.len()
        )));
    }
    Ok(())
}

/// Lin's concordance correlation coefficient.
///
/// `2·cov(x,y) / (var x + var y + (mean x − mean y)²)`. Undefined (an error)
/// when both sequences are constant.
pub fn ccc<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    if is_constant(x) && is_constant(y) {
        return Err(Error::Degenerate("CCC undefined for two constant sequences".into()));
    }
    let n = T::of_usize(x.len());
    let mx = mean(x);
    let my = mean(y);
    let mut vx = T::zero();
    let mut vy = T::zero();
    let mut cov = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    Ok(T::of(2.0) * cov / (vx + vy + (mx - my) * (mx - my)))
}

pub fn ccc_loss<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    Ok(T::one() - ccc(pred, truth)?)
}

/// Pearson product-moment correlation.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::Degenerate("Pearson correlation of a constant sequence".into()));
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = T::zero();
    let mut syy = T::zero();
    let mut sxy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// `KL(N(mu0, sigma0²) ‖ N(mu1, sigma1²))`.
pub fn kl_gaussian<T: Scalar>(mu0: T, sigma0: T, mu1: T, sigma1: T) -> Result<T> {
    if !(sigma0 > T::zero() && sigma1 > T::zero()) {
        return Err(Error::Degenerate(format!(
            "standard deviations must be positive, got {sigma0} and {sigma1}"
        )));
    }
    let d = mu0 - mu1;
    let kl = (sigma1 / sigma0).ln() + (sigma0 * sigma0 + d * d) / (T::of(2.0) * sigma1 * sigma1)
        - T::of(0.5);
    // Rounding can leave -1e-17 for identical parameters.
    Ok(kl.max(T::zero()))
}
