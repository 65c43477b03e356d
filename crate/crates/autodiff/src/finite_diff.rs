//! Central finite differences, used as an oracle against [`crate::Graph::backward`].

/// Default step for central differences in double precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Estimates `∂f/∂x_k` for every coordinate by `(f(x + h e_k) - f(x - h e_k)) / 2h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is (near) zero from
/// turning round-off noise into a large relative error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Largest [`relative_error`] over paired slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
