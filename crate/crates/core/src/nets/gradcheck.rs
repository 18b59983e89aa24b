//! Central finite differences, used as an independent oracle for the tape.

use super::params::ParamSet;

/// Numerical gradient of `f` at `params` by central differences.
pub fn central_difference(
    params: &ParamSet,
    step: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> Vec<f64> {
    let mut probe = params.clone();
    (0..params.len())
        .map(|i| {
            let orig = probe.values()[i];
            probe.values_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.values_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.values_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both are (near) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

/// Relative error per layer of `params`, named by layer.
pub fn per_layer_errors(params: &ParamSet, analytic: &[f64], numeric: &[f64]) -> Vec<(String, f64)> {
    let mut off = 0;
    params
        .layout()
        .specs()
        .iter()
        .map(|s| {
            let n = s.numel();
            let e = relative_error(&analytic[off..off + n], &numeric[off..off + n]);
            off += n;
            (s.name.clone(), e)
        })
        .collect()
}
