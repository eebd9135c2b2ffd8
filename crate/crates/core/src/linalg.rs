//! Small dense helpers shared by the loss modules.

/// Norm floor used when L2-normalizing feature rows. Rows with a smaller
/// norm are divided by this value instead, so a zero row stays zero.
pub const NORM_EPSILON: f64 = 1e-12;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalized(a: &[f64], epsilon: f64) -> Vec<f64> {
    let n = l2_norm(a).max(epsilon);
    a.iter().map(|x| x / n).collect()
}

/// Incremental mean. Reproduces a constant sequence exactly.
pub(crate) fn running_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (k, v) in values.into_iter().enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    mean
}

/// Gradient of `cos(target, x)` with respect to `x`, where the cosine is
/// taken between `target` and `x / max(|x|, NORM_EPSILON)`.
///
/// `unit_target` is the already-normalized target and `cos` its cosine with
/// `x`.
pub(crate) fn cosine_grad(unit_target: &[f64], x: &[f64], cos: f64) -> Vec<f64> {
    let nx = l2_norm(x);
    if nx > NORM_EPSILON {
        unit_target
            .iter()
            .zip(x)
            .map(|(t, xi)| (t - cos * xi / nx) / nx)
            .collect()
    } else {
        unit_target.iter().map(|t| t / NORM_EPSILON).collect()
    }
}
