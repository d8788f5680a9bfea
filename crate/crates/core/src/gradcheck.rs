//! Central finite differences, the reference every analytic gradient is
//! checked against.

/// Central-difference estimate of `∂f/∂x[i]` for each requested coordinate.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps gradients that are zero
/// (up to rounding) from producing spurious huge ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Largest relative error over paired slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let d = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], &[0, 1], 1e-5);
        assert!((d[0] - 12.0).abs() < 1e-8);
        assert!((d[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn floor_guards_tiny_values() {
        assert!(relative_error(1e-15, -1e-15, 1e-8) < 1e-6);
        assert!((relative_error(1.0, 1.1, 1e-8) - 0.1 / 1.1).abs() < 1e-12);
    }
}
