//! Probability primitives: temperature softmax, entropy and the
//! entropy-normalized smoothing weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{safe_ln, Scalar};

/// Raw model scores over the label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T>(Vec<T>);

impl<T: Scalar> Logits<T> {
    /// Fails on fewer than two classes or any non-finite entry.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "logits need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite logit at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// A normalized probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist<T>(Vec<T>);

impl<T: Scalar> ProbDist<T> {
    /// Validates entries in `[0, 1]` summing to one within
    /// [`Scalar::simplex_tolerance`].
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if let Some(i) = probs
            .iter()
            .position(|p| !p.is_finite() || *p < T::zero() || *p > T::one())
        {
            return Err(Error::invalid(format!(
                "probability at index {i} outside [0, 1]: {}",
                probs[i]
            )));
        }
        let sum: T = probs.iter().copied().sum();
        if (sum - T::one()).abs() > T::simplex_tolerance(probs.len()) {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("uniform distribution over zero classes"));
        }
        Ok(Self(vec![T::one() / T::of_usize(n); n]))
    }

    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::invalid(format!("index {index} out of range for {n} classes")));
        }
        let mut v = vec![T::zero(); n];
        v[index] = T::one();
        Ok(Self(v))
    }

    /// Trusted constructor for values produced by [`softmax_with_temperature`]
    /// and other normalizing routines inside the crate.
    pub(crate) fn from_normalized(probs: Vec<T>) -> Self {
        debug_assert!(!probs.is_empty());
        Self(probs)
    }

    pub fn probs(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> T {
        self.0[i]
    }

    /// Index and value of the most probable class (first on ties).
    pub fn argmax(&self) -> (usize, T) {
        let mut best = (0, self.0[0]);
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }

    /// A copy that no gradient computation refers back to.
    ///
    /// All gradients in this crate are closed-form expressions of the
    /// probabilities, so anything computed from the detached copy is a plain
    /// constant as far as those expressions are concerned.
    pub fn detached(&self) -> Detached<T> {
        Detached(self.0.clone())
    }

    pub fn cast<U: Scalar>(&self) -> ProbDist<U> {
        ProbDist(self.0.iter().map(|p| U::of(p.to_f64_lossy())).collect())
    }
}

/// Probabilities cut off from the gradient path; the only input accepted by
/// [`adaptive_alpha`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detached<T>(Vec<T>);

impl<T: Scalar> Detached<T> {
    pub fn probs(&self) -> &[T] {
        &self.0
    }
}

/// Smoothing weight in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlphaValue<T>(T);

impl<T: Scalar> AlphaValue<T> {
    pub fn new(value: T) -> Result<Self> {
        if !(value >= T::zero() && value <= T::one()) {
            return Err(Error::invalid(format!("alpha {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn zero() -> Self {
        Self(T::zero())
    }

    pub fn one() -> Self {
        Self(T::one())
    }

    /// Clamps into `[0, 1]`; NaN maps to zero.
    pub fn saturating(value: T) -> Self {
        if value.is_nan() {
            return Self(T::zero());
        }
        Self(value.max(T::zero()).min(T::one()))
    }

    pub fn get(self) -> T {
        self.0
    }
}

/// `exp(z_i / T) / sum_j exp(z_j / T)` with max-subtraction.
pub fn softmax_with_temperature<T: Scalar>(z: &Logits<T>, temperature: T) -> Result<ProbDist<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let max = z.0.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = z.0.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(ProbDist(out))
}

/// Softmax at temperature one.
pub fn softmax<T: Scalar>(z: &Logits<T>) -> ProbDist<T> {
    softmax_with_temperature(z, T::one()).expect("unit temperature is valid")
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &ProbDist<T>) -> T {
    entropy_of(&p.0)
}

fn entropy_of<T: Scalar>(probs: &[T]) -> T {
    let h: T = probs
        .iter()
        .filter(|&&q| q > T::zero())
        .map(|&q| -q * safe_ln(q))
        .sum();
    h.max(T::zero())
}

/// Entropy divided by its maximum `ln |C|`.
pub fn normalized_entropy<T: Scalar>(p: &ProbDist<T>) -> Result<T> {
    let n = p.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "normalized entropy needs at least 2 classes, got {n}"
        )));
    }
    Ok(entropy(p) / T::of_usize(n).ln())
}

/// `1 - H(p) / ln |C|`, clamped into `[0, 1]`.
///
/// Takes a [`Detached`] distribution: the weight is a constant with respect to
/// the logits that produced `p`.
pub fn adaptive_alpha<T: Scalar>(p: &Detached<T>) -> Result<AlphaValue<T>> {
    let n = p.0.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "adaptive alpha needs at least 2 classes, got {n}"
        )));
    }
    let h = entropy_of(&p.0);
    Ok(AlphaValue::saturating(T::one() - h / T::of_usize(n).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> Logits<f64> {
        Logits::new(v.to_vec()).unwrap()
    }

    fn dist(v: &[f64]) -> ProbDist<f64> {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax_with_temperature(&logits(&[0.0; 4]), 1.0).unwrap();
        assert_eq!(p.probs(), &[0.25; 4]);
    }

    #[test]
    fn softmax_matches_direct_exponentiation() {
        // exp/normalize by hand in 64-bit arithmetic
        let p = softmax(&logits(&[2.0, 1.0, 0.0]));
        let expected = [0.6652409557748219, 0.24472847105479764, 0.09003057317038046];
        for (a, b) in p.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn huge_temperature_flattens() {
        let p = softmax_with_temperature(&logits(&[1.0, 2.5, -3.0, 4.0]), 1e6).unwrap();
        for q in p.probs() {
            assert!((q - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature_and_logits() {
        assert!(softmax_with_temperature(&logits(&[0.0, 1.0]), 0.0).is_err());
        assert!(softmax_with_temperature(&logits(&[0.0, 1.0]), -2.0).is_err());
        assert!(Logits::new(vec![0.0, f64::NAN]).is_err());
        assert!(Logits::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(Logits::new(vec![1.0]).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&logits(&[1000.0, 999.0, -1000.0]));
        assert!(p.probs().iter().all(|q| q.is_finite()));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_reference_values() {
        assert!((entropy(&dist(&[0.25; 4])) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&dist(&[0.0, 1.0, 0.0])), 0.0);
        // -(0.7 ln 0.7 + 3 * 0.1 ln 0.1), summed term by term
        assert!((entropy(&dist(&[0.7, 0.1, 0.1, 0.1])) - 0.9404479886553263).abs() < 1e-12);
    }

    #[test]
    fn alpha_reference_values() {
        for n in 2..12 {
            let a = adaptive_alpha(&ProbDist::<f64>::uniform(n).unwrap().detached()).unwrap();
            assert!(a.get().abs() < 1e-12);
        }
        let a = adaptive_alpha(&ProbDist::<f64>::one_hot(5, 2).unwrap().detached()).unwrap();
        assert_eq!(a.get(), 1.0);
        // 1 - 0.9404479886553263 / ln 4
        let a = adaptive_alpha(&dist(&[0.7, 0.1, 0.1, 0.1]).detached()).unwrap();
        assert!((a.get() - 0.3216101752764803).abs() < 1e-12);
    }

    #[test]
    fn alpha_needs_two_classes() {
        let single = ProbDist::<f64>::new(vec![1.0]).unwrap();
        assert!(adaptive_alpha(&single.detached()).is_err());
        assert!(normalized_entropy(&single).is_err());
    }

    #[test]
    fn prob_dist_validation() {
        assert!(ProbDist::<f64>::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::<f64>::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbDist::<f64>::new(vec![]).is_err());
        assert!(ProbDist::<f64>::new(vec![0.5, 0.5 + 1e-12]).is_ok());
        assert!(ProbDist::<f32>::new(vec![0.1; 10]).is_ok());
    }

    #[test]
    fn alpha_value_range() {
        assert!(AlphaValue::new(1.2f64).is_err());
        assert!(AlphaValue::new(-0.01f64).is_err());
        assert!(AlphaValue::new(f64::NAN).is_err());
        assert_eq!(AlphaValue::saturating(1.0 + 1e-15f64).get(), 1.0);
        assert_eq!(AlphaValue::saturating(-1e-15f64).get(), 0.0);
    }

    #[test]
    fn works_in_single_precision() {
        let p = softmax(&Logits::new(vec![2.0f32, 1.0, 0.0]).unwrap());
        assert!((p.get(0) - 0.665_240_94).abs() < 1e-6);
        let a = adaptive_alpha(&p.detached()).unwrap();
        assert!(a.get() > 0.0 && a.get() < 1.0);
    }
}
