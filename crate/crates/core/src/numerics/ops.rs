//! Reference implementations of the scalar/vector primitives.
//!
//! These are the checked, allocation-happy versions used by tests, by the
//! tensor-level model API and as oracles for the tape. The tape has its own
//! fused kernels for the hot path.

use super::{NumericsError, Scalar, Tensor};

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_finite<T: Scalar>(v: &[T]) -> Result<(), NumericsError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(NumericsError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Scalar>(v: &[T]) -> Result<Vec<T>, NumericsError> {
    if v.is_empty() {
        return Err(NumericsError::Empty);
    }
    check_finite(v)?;
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

#[inline]
pub(crate) fn gelu_unchecked<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx of `x * Phi(x)`: `Phi(x) + x * phi(x)`.
#[inline]
pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF from `erf`.
pub fn gelu<T: Scalar>(x: T) -> Result<T, NumericsError> {
    if !x.is_finite() {
        return Err(NumericsError::NonFinite { index: 0 });
    }
    Ok(gelu_unchecked(x))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Denominator used by [`add_norm_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormDenominator {
    /// `sqrt(var + eps)`, standard layer normalization.
    Sqrt,
    /// `var + eps` without the root. Only kept so the two forms can be
    /// compared side by side; the model never uses it.
    Literal,
}

/// Residual Add&Norm: `v + gamma * (o - mean(o)) / sqrt(var(o) + eps) + beta`
/// with scalar `gamma` and `beta` and population variance.
pub fn layer_norm<T: Scalar>(o: &[T], residual: &[T], gamma: T, beta: T, eps: T) -> Result<Vec<T>, NumericsError> {
    add_norm_with(o, residual, gamma, beta, eps, NormDenominator::Sqrt)
}

pub fn add_norm_with<T: Scalar>(
    o: &[T],
    residual: &[T],
    gamma: T,
    beta: T,
    eps: T,
    denom: NormDenominator,
) -> Result<Vec<T>, NumericsError> {
    if o.is_empty() {
        return Err(NumericsError::Empty);
    }
    if o.len() != residual.len() {
        return Err(NumericsError::LengthMismatch {
            expected: o.len(),
            actual: residual.len(),
        });
    }
    if !(eps > T::zero()) {
        return Err(NumericsError::NonPositiveEpsilon);
    }
    check_finite(o)?;
    check_finite(residual)?;
    let n = T::of(o.len() as f64);
    let mean = o.iter().copied().sum::<T>() / n;
    let var = o.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let scale = match denom {
        NormDenominator::Sqrt => (var + eps).sqrt(),
        NormDenominator::Literal => var + eps,
    };
    Ok(o.iter()
        .zip(residual)
        .map(|(&x, &r)| r + gamma * (x - mean) / scale + beta)
        .collect())
}

/// Mean cross-entropy `-(1/M) sum_i sum_j c_ij ln p_ij` over the rows of
/// `p`, with `p` clamped at [`LOG_FLOOR`].
pub fn cross_entropy<T: Scalar>(p: &Tensor<T>, c: &Tensor<T>) -> Result<T, NumericsError> {
    if p.shape() != c.shape() {
        return Err(NumericsError::ShapeMismatch {
            left: p.shape().to_vec(),
            right: c.shape().to_vec(),
        });
    }
    let tol = T::of(1e-6);
    let floor = T::of(LOG_FLOOR);
    let mut total = T::zero();
    for i in 0..p.rows() {
        let prow = p.row(i);
        let crow = c.row(i);
        let sum: T = prow.iter().copied().sum();
        if (sum - T::one()).abs() > tol || prow.iter().any(|&x| x < T::zero()) {
            return Err(NumericsError::NotADistribution { row: i });
        }
        let ones = crow.iter().filter(|&&x| x == T::one()).count();
        let zeros = crow.iter().filter(|&&x| x == T::zero()).count();
        if ones != 1 || ones + zeros != crow.len() {
            return Err(NumericsError::NotOneHot { row: i });
        }
        for (&pj, &cj) in prow.iter().zip(crow) {
            if cj == T::one() {
                total -= pj.max(floor).ln();
            }
        }
    }
    Ok(total / T::of(p.rows() as f64))
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>, NumericsError>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    if !(h > T::zero()) {
        return Err(NumericsError::NonPositiveStep);
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    let two_h = h + h;
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite { index: k });
        }
        grad.data_mut()[k] = (plus - minus) / two_h;
    }
    Ok(grad)
}
