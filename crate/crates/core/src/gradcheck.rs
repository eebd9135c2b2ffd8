//! Finite-difference verification of the alignment loss gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pgfa::{pgfa_loss, PatchFeatureBatch, PatchWeightConfig};
use crate::pifa::{pifa_loss, InstanceFeature, PrototypeBank};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Which loss to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradLoss {
    Pgfa,
    Pifa,
}

impl std::str::FromStr for GradLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgfa" => Ok(Self::Pgfa),
            "pifa" => Ok(Self::Pifa),
            other => Err(Error::invalid(format!(
                "unknown loss `{other}` (expected pgfa or pifa)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub max_abs_error: f64,
    /// `max |a - n| / max(max |a|, max |n|)`.
    pub max_rel_error: f64,
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step h={h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Scale-aware comparison of two gradients.
///
/// Errors are measured against the largest gradient entry rather than
/// per coordinate, so entries that are zero up to rounding do not blow up
/// the ratio.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let max_abs_error = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-12, f64::max);
    GradCheckReport {
        num_params: analytic.len(),
        max_abs_error,
        max_rel_error: max_abs_error / scale,
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Checks the student gradient of the patch alignment loss on a random
/// 2 x 6 x 5 batch.
pub fn check_pgfa(seed: u64, h: f64) -> Result<GradCheckReport> {
    let (b, n, c) = (2, 6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vfm = PatchFeatureBatch::new(b, n, c, normals(&mut rng, b * n * c))?;
    let student = normals(&mut rng, b * n * c);
    let cfg = PatchWeightConfig {
        tau: 0.07,
        top_k: 3,
    };
    let eps = crate::fusion::DEFAULT_EPSILON;

    let loss_at = |s: &[f64]| -> Result<f64> {
        let batch = PatchFeatureBatch::new(b, n, c, s.to_vec())?;
        Ok(pgfa_loss(&vfm, &batch, &cfg, eps)?.loss)
    };
    let analytic = pgfa_loss(
        &vfm,
        &PatchFeatureBatch::new(b, n, c, student.clone())?,
        &cfg,
        eps,
    )?
    .grad_student;
    let numeric = central_difference(loss_at, &student, h)?;
    Ok(compare(&analytic, &numeric))
}

/// Checks the instance gradient of the prototype InfoNCE loss with four
/// initialized prototypes and five instances.
pub fn check_pifa(seed: u64, h: f64) -> Result<GradCheckReport> {
    let (k, c, m) = (4, 6, 5);
    let tau = crate::pifa::DEFAULT_TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = PrototypeBank::from_parts(k, c, normals(&mut rng, k * c), vec![true; k], 0.9)?;
    let flat = normals(&mut rng, m * c);
    let labels: Vec<usize> = (0..m).map(|i| i % k).collect();

    let build = |x: &[f64]| -> Vec<InstanceFeature> {
        x.chunks_exact(c)
            .zip(&labels)
            .map(|(f, &label)| InstanceFeature {
                features: f.to_vec(),
                label,
            })
            .collect()
    };
    let loss_at = |x: &[f64]| -> Result<f64> { Ok(pifa_loss(&build(x), &bank, tau)?.loss) };
    let analytic: Vec<f64> = pifa_loss(&build(&flat), &bank, tau)?
        .grad_instances
        .into_iter()
        .flatten()
        .collect();
    let numeric = central_difference(loss_at, &flat, h)?;
    Ok(compare(&analytic, &numeric))
}

pub fn check(loss: GradLoss, seed: u64, h: f64) -> Result<GradCheckReport> {
    match loss {
        GradLoss::Pgfa => check_pgfa(seed, h),
        GradLoss::Pifa => check_pifa(seed, h),
    }
}
