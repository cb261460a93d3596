//! Central finite differences for checking analytic gradients.

/// Default step on `f64` inputs.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate error relative to the larger gradient's scale:
/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`.
///
/// Two all-zero vectors compare as 0.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = [1.0, -2.0, 0.5];
        let g = central_difference(&x, FD_STEP, |v| v.iter().map(|t| t * t).sum());
        let exact: Vec<f64> = x.iter().map(|t| 2.0 * t).collect();
        assert!(max_relative_error(&exact, &g) < 1e-9);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(max_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((max_relative_error(&[2.0, 1.0], &[2.0, 1.1]) - 0.05).abs() < 1e-12);
    }
}
