//! Patch-weighted global feature alignment.
//!
//! Each VFM patch is weighted by how coherent it is with the rest of its
//! image: rows of the patch cosine-similarity matrix go through a
//! temperature softmax, the `top_k` largest probabilities of a row are
//! summed, and the sums are normalized over the image. The alignment loss
//! is the weighted mean of `1 - cos` between VFM and student patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_grad, dot, l2_norm, normalized, NORM_EPSILON};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_TOP_K: usize = 50;

/// `batch x patches x channels` features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureBatch {
    batch: usize,
    patches: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PatchFeatureBatch {
    pub fn new(batch: usize, patches: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if patches == 0 || channels == 0 {
            return Err(Error::invalid(
                "patch batch needs at least one patch and one channel",
            ));
        }
        if data.len() != batch * patches * channels {
            return Err(Error::invalid(format!(
                "patch batch {batch}x{patches}x{channels} needs {} values, got {}",
                batch * patches * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("patch features must be finite"));
        }
        Ok(Self {
            batch,
            patches,
            channels,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn patches(&self) -> usize {
        self.patches
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The `patches x channels` block of image `b`.
    pub fn image(&self, b: usize) -> &[f64] {
        let len = self.patches * self.channels;
        &self.data[b * len..(b + 1) * len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchWeightConfig {
    pub tau: f64,
    pub top_k: usize,
}

impl Default for PatchWeightConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl PatchWeightConfig {
    pub fn validate(&self, patches: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau={} must be positive", self.tau)));
        }
        if self.top_k == 0 || self.top_k > patches {
            return Err(Error::invalid(format!(
                "top_k={} must lie in [1, {patches}] (number of patches)",
                self.top_k
            )));
        }
        Ok(())
    }
}

fn check_rows(feats: &[f64], channels: usize) -> Result<usize> {
    if channels == 0 || !feats.len().is_multiple_of(channels) {
        return Err(Error::invalid(format!(
            "{} values do not form rows of {channels} channels",
            feats.len()
        )));
    }
    Ok(feats.len() / channels)
}

/// Divides every row by `max(|row|, epsilon)`.
pub fn l2_normalize_rows(feats: &[f64], channels: usize, epsilon: f64) -> Result<Vec<f64>> {
    check_rows(feats, channels)?;
    Ok(feats
        .chunks_exact(channels)
        .flat_map(|row| normalized(row, epsilon))
        .collect())
}

/// Gram matrix of the rows: `S[i][j] = <row_i, row_j>`, `N x N` row-major.
pub fn similarity_matrix(feats_hat: &[f64], channels: usize) -> Result<Vec<f64>> {
    let n = check_rows(feats_hat, channels)?;
    let rows: Vec<&[f64]> = feats_hat.chunks_exact(channels).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(rows[i], rows[j]);
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    Ok(s)
}

/// In-place row softmax of `logits / tau`, stabilized by subtracting the
/// row maximum.
fn softmax_rows(s: &mut [f64], n: usize, tau: f64) {
    for row in s.chunks_exact_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

/// Normalized per-patch weights for one image of `N x channels` features.
///
/// The top-k set of a row includes the patch itself.
pub fn patch_weights(
    feats: &[f64],
    channels: usize,
    cfg: &PatchWeightConfig,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let n = check_rows(feats, channels)?;
    cfg.validate(n)?;
    let hat = l2_normalize_rows(feats, channels, NORM_EPSILON)?;
    let mut p = similarity_matrix(&hat, channels)?;
    softmax_rows(&mut p, n, cfg.tau);

    let mut raw = Vec::with_capacity(n);
    let mut row_sorted = vec![0.0; n];
    for row in p.chunks_exact(n) {
        row_sorted.copy_from_slice(row);
        row_sorted.sort_unstable_by(|a, b| b.total_cmp(a));
        raw.push(row_sorted[..cfg.top_k].iter().sum::<f64>());
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / (total + epsilon)).collect())
}

/// Patch weights for every image of a batch, `batch x patches` row-major.
pub fn batch_patch_weights(
    feats: &PatchFeatureBatch,
    cfg: &PatchWeightConfig,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(feats.batch * feats.patches);
    for b in 0..feats.batch {
        out.extend(patch_weights(feats.image(b), feats.channels, cfg, epsilon)?);
    }
    Ok(out)
}

/// Cosine between two rows, exactly 1 for identical non-zero rows.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let aa = dot(a, a);
    let bb = dot(b, b);
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na > NORM_EPSILON && nb > NORM_EPSILON {
        dot(a, b) / (aa * bb).sqrt()
    } else {
        dot(a, b) / (na.max(NORM_EPSILON) * nb.max(NORM_EPSILON))
    }
}

/// Weighted cosine alignment loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PgfaLoss {
    pub loss: f64,
    /// Gradient with respect to the raw student features, laid out like
    /// the student batch.
    pub grad_student: Vec<f64>,
}

/// `(1/B) sum_b sum_i w_bi (1 - cos(vfm_bi, student_bi))`.
///
/// Patch weights come from the VFM features alone and are held constant,
/// so the gradient flows only into the student features.
pub fn pgfa_loss(
    vfm: &PatchFeatureBatch,
    student: &PatchFeatureBatch,
    cfg: &PatchWeightConfig,
    epsilon: f64,
) -> Result<PgfaLoss> {
    check_same_shape(vfm, student)?;
    let weights = batch_patch_weights(vfm, cfg, epsilon)?;
    pgfa_loss_with_weights(vfm, student, &weights)
}

fn check_same_shape(vfm: &PatchFeatureBatch, student: &PatchFeatureBatch) -> Result<()> {
    if (vfm.batch, vfm.patches, vfm.channels) != (student.batch, student.patches, student.channels)
    {
        return Err(Error::invalid(format!(
            "shape mismatch: vfm {}x{}x{} vs student {}x{}x{}",
            vfm.batch, vfm.patches, vfm.channels, student.batch, student.patches, student.channels
        )));
    }
    if vfm.batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// Same as [`pgfa_loss`] with precomputed `batch x patches` weights, for
/// callers that reuse the weights of frozen VFM features.
pub fn pgfa_loss_with_weights(
    vfm: &PatchFeatureBatch,
    student: &PatchFeatureBatch,
    weights: &[f64],
) -> Result<PgfaLoss> {
    check_same_shape(vfm, student)?;
    if weights.len() != vfm.batch * vfm.patches {
        return Err(Error::invalid(format!(
            "{} weights for {}x{} patches",
            weights.len(),
            vfm.batch,
            vfm.patches
        )));
    }
    let c = vfm.channels;
    let scale = 1.0 / vfm.batch as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; student.data.len()];
    for b in 0..vfm.batch {
        let mut image_loss = 0.0;
        for i in 0..vfm.patches {
            let w = weights[b * vfm.patches + i];
            let d = &vfm.image(b)[i * c..(i + 1) * c];
            let s = &student.image(b)[i * c..(i + 1) * c];
            let cos = cosine(d, s);
            image_loss += w * (1.0 - cos);

            let d_hat = normalized(d, NORM_EPSILON);
            let cos_hat = if l2_norm(s) > NORM_EPSILON { cos } else { 0.0 };
            let g = cosine_grad(&d_hat, s, cos_hat);
            let offset = (b * vfm.patches + i) * c;
            for (k, gk) in g.iter().enumerate() {
                grad[offset + k] = -scale * w * gk;
            }
        }
        loss += image_loss;
    }
    Ok(PgfaLoss {
        loss: loss * scale,
        grad_student: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn normalize_rows_examples() {
        assert_eq!(
            l2_normalize_rows(&[3.0, 4.0], 2, 1e-12).unwrap(),
            vec![0.6, 0.8]
        );
        assert_eq!(
            l2_normalize_rows(&[0.6, 0.8], 2, 1e-12).unwrap(),
            vec![0.6, 0.8]
        );
        assert_eq!(
            l2_normalize_rows(&[0.0, 0.0], 2, 1e-12).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(l2_normalize_rows(&[1.0, 2.0, 3.0], 2, 1e-12).is_err());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(
            similarity_matrix(&[0.6, 0.8, 0.6, 0.8], 2).unwrap(),
            vec![1.0; 4]
        );
        assert_eq!(
            similarity_matrix(&[1.0, 0.0, 0.0, 1.0], 2).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0]
        );
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = similarity_matrix(&[1.0, 0.0, h, h], 2).unwrap();
        assert!((s[1] - h).abs() < 1e-15 && s[1] == s[2]);
    }

    #[test]
    fn identical_patches_get_uniform_weights() {
        let row = [0.3, -1.2, 0.5];
        let feats: Vec<f64> = row.iter().cycle().take(3 * 64).cloned().collect();
        for k in [1, 7, 50, 64] {
            let cfg = PatchWeightConfig {
                tau: 0.07,
                top_k: k,
            };
            let w = patch_weights(&feats, 3, &cfg, 1e-8).unwrap();
            for v in w {
                assert!((v - 1.0 / 64.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_patch() {
        let cfg = PatchWeightConfig {
            tau: 0.07,
            top_k: 1,
        };
        let w = patch_weights(&[1.0, 2.0], 2, &cfg, 1e-8).unwrap();
        // 1 / (1 + eps)
        assert!((w[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn top_k_larger_than_patches_rejected() {
        let cfg = PatchWeightConfig {
            tau: 0.07,
            top_k: 3,
        };
        assert!(matches!(
            patch_weights(&[1.0, 0.0, 0.0, 1.0], 2, &cfg, 1e-8),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn temperature_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = random(&mut rng, 12 * 5);
        let w = patch_weights(&feats, 5, &PatchWeightConfig { tau: 1e6, top_k: 4 }, 1e-8).unwrap();
        let max = w.iter().cloned().fold(f64::MIN, f64::max);
        let min = w.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-6);

        // concentration shows while similarity gaps are small next to tau;
        // near-parallel patches keep them in that regime down to 0.007
        let base = random(&mut rng, 5);
        let feats: Vec<f64> = (0..12)
            .flat_map(|_| {
                base.iter()
                    .map(|b| b + 0.05 * rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>()
            })
            .collect();
        let max_at = |tau| {
            patch_weights(&feats, 5, &PatchWeightConfig { tau, top_k: 4 }, 1e-8)
                .unwrap()
                .into_iter()
                .fold(f64::MIN, f64::max)
        };
        assert!(max_at(0.007) > max_at(0.07));
    }

    #[test]
    fn pgfa_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random(&mut rng, 2 * 4 * 8);
        let vfm = PatchFeatureBatch::new(2, 4, 8, data.clone()).unwrap();
        let student = PatchFeatureBatch::new(2, 4, 8, data).unwrap();
        let cfg = PatchWeightConfig {
            tau: 0.07,
            top_k: 2,
        };
        let out = pgfa_loss(&vfm, &student, &cfg, 1e-8).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_student.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn pgfa_orthogonal_is_one() {
        // student patch i is the vfm patch rotated by 90 degrees in the plane
        let vfm_rows = [[1.0, 2.0], [-0.5, 1.5], [2.0, 0.1], [0.3, -0.7]];
        let vfm: Vec<f64> = vfm_rows.iter().flatten().cloned().collect();
        let student: Vec<f64> = vfm_rows.iter().flat_map(|r| [-r[1], r[0]]).collect();
        let vfm = PatchFeatureBatch::new(1, 4, 2, vfm).unwrap();
        let student = PatchFeatureBatch::new(1, 4, 2, student).unwrap();
        let cfg = PatchWeightConfig {
            tau: 0.07,
            top_k: 2,
        };
        let out = pgfa_loss(&vfm, &student, &cfg, 1e-8).unwrap();
        assert!((out.loss - 1.0).abs() < 1e-6, "{}", out.loss);
    }

    #[test]
    fn pgfa_shape_mismatch() {
        let a = PatchFeatureBatch::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let b = PatchFeatureBatch::new(1, 2, 1, vec![1.0; 2]).unwrap();
        assert!(pgfa_loss(
            &a,
            &b,
            &PatchWeightConfig {
                tau: 0.07,
                top_k: 1
            },
            1e-8
        )
        .is_err());
    }

    #[test]
    fn pgfa_positive_multiple_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = random(&mut rng, 3 * 6);
        let scaled: Vec<f64> = data.iter().map(|v| 2.5 * v).collect();
        let vfm = PatchFeatureBatch::new(1, 3, 6, data).unwrap();
        let student = PatchFeatureBatch::new(1, 3, 6, scaled).unwrap();
        let out = pgfa_loss(
            &vfm,
            &student,
            &PatchWeightConfig {
                tau: 0.07,
                top_k: 2,
            },
            1e-8,
        )
        .unwrap();
        assert!(out.loss.abs() < 1e-15);
    }
}
