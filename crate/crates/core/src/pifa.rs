//! Prototype-based instance feature alignment.
//!
//! Instance features are pooled from a VFM feature map with RoIAlign,
//! averaged per pseudo-label class, and folded into a momentum prototype
//! bank. Student instance features are then pulled toward the prototype of
//! their pseudo-label with an InfoNCE loss over the initialized prototypes.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::linalg::{cosine_grad, dot, l2_norm, normalized, running_mean, NORM_EPSILON};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
/// Momentum quoted alongside the prototype update rule in the method
/// description; kept as an alternative preset.
pub const ALT_MOMENTUM: f64 = 0.999;
pub const DEFAULT_TAU: f64 = 0.07;
pub const ROI_OUTPUT: (usize, usize) = (7, 7);
/// Bilinear samples per bin along each axis.
pub const SAMPLING_RATIO: usize = 2;

/// `channels x height x width` feature map covering an image of
/// `image_width x image_height` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    image_width: f64,
    image_height: f64,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        image_width: f64,
        image_height: f64,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map values must be finite"));
        }
        if !(image_width > 0.0 && image_height > 0.0) {
            return Err(Error::invalid("image size must be positive"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            image_width,
            image_height,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn image_size(&self) -> (f64, f64) {
        (self.image_width, self.image_height)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear interpolation at continuous feature-grid coordinates, where
    /// cell `(y, x)` spans `[y, y+1) x [x, x+1)` and its value sits at the
    /// cell center. Coordinates beyond the outer centers take the edge value.
    pub fn bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let (y0, y1, ly) = axis(y, self.height);
        let (x0, x1, lx) = axis(x, self.width);
        let top = lerp(self.at(c, y0, x0), self.at(c, y0, x1), lx);
        let bottom = lerp(self.at(c, y1, x0), self.at(c, y1, x1), lx);
        lerp(top, bottom, ly)
    }
}

fn axis(coord: f64, len: usize) -> (usize, usize, f64) {
    let u = (coord - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = u.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, u - lo as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// RoIAlign of one box into a `channels x out_h x out_w` grid.
///
/// The box is clipped to the image and mapped onto the feature grid by the
/// ratios `width / image_width` and `height / image_height`. Each output bin
/// averages `SAMPLING_RATIO x SAMPLING_RATIO` regularly spaced bilinear
/// samples.
pub fn roi_align(fmap: &FeatureMap, bbox: &BBox, output: (usize, usize)) -> Result<Vec<f64>> {
    let (out_h, out_w) = output;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("RoIAlign output size must be positive"));
    }
    let clipped = bbox
        .clip(fmap.image_width, fmap.image_height)
        .ok_or_else(|| {
            Error::invalid(format!(
                "box {:?} has zero area inside the image",
                bbox.to_array()
            ))
        })?;
    if clipped != *bbox {
        debug!(
            "clipped RoI {:?} to {:?}",
            bbox.to_array(),
            clipped.to_array()
        );
    }
    let sx = fmap.width as f64 / fmap.image_width;
    let sy = fmap.height as f64 / fmap.image_height;
    let (fx1, fy1) = (clipped.x1() * sx, clipped.y1() * sy);
    let bin_w = (clipped.x2() * sx - fx1) / out_w as f64;
    let bin_h = (clipped.y2() * sy - fy1) / out_h as f64;
    let step = 1.0 / SAMPLING_RATIO as f64;

    let mut out = vec![0.0; fmap.channels * out_h * out_w];
    let mut samples = Vec::with_capacity(SAMPLING_RATIO * SAMPLING_RATIO);
    for py in 0..out_h {
        for px in 0..out_w {
            samples.clear();
            for iy in 0..SAMPLING_RATIO {
                let y = fy1 + (py as f64 + (iy as f64 + 0.5) * step) * bin_h;
                for ix in 0..SAMPLING_RATIO {
                    let x = fx1 + (px as f64 + (ix as f64 + 0.5) * step) * bin_w;
                    samples.push((y, x));
                }
            }
            for c in 0..fmap.channels {
                out[(c * out_h + py) * out_w + px] =
                    running_mean(samples.iter().map(|&(y, x)| fmap.bilinear(c, y, x)));
            }
        }
    }
    Ok(out)
}

/// RoIAlign at the default 7x7 resolution, then a spatial mean per channel.
pub fn pool_instance(fmap: &FeatureMap, bbox: &BBox) -> Result<Vec<f64>> {
    let (h, w) = ROI_OUTPUT;
    let grid = roi_align(fmap, bbox, ROI_OUTPUT)?;
    Ok(grid
        .chunks_exact(h * w)
        .map(|bins| running_mean(bins.iter().copied()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFeature {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMean {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Mean feature per class present in `instances`.
pub fn batch_class_means(instances: &[InstanceFeature]) -> Result<BTreeMap<usize, ClassMean>> {
    let mut acc: BTreeMap<usize, ClassMean> = BTreeMap::new();
    let channels = instances.first().map(|i| i.features.len());
    for inst in instances {
        if Some(inst.features.len()) != channels {
            return Err(Error::invalid("instances disagree on channel count"));
        }
        let entry = acc.entry(inst.label).or_insert_with(|| ClassMean {
            mean: vec![0.0; inst.features.len()],
            count: 0,
        });
        for (s, v) in entry.mean.iter_mut().zip(&inst.features) {
            *s += v;
        }
        entry.count += 1;
    }
    for m in acc.values_mut() {
        let n = m.count as f64;
        m.mean.iter_mut().for_each(|v| *v /= n);
    }
    Ok(acc)
}

/// Per-class momentum prototypes.
///
/// Prototypes are stored unnormalized; [`pifa_loss`] normalizes them. A
/// class's first observation initializes its prototype directly.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    num_classes: usize,
    channels: usize,
    prototypes: Vec<f64>,
    initialized: Vec<bool>,
    momentum: f64,
}

impl PrototypeBank {
    pub fn new(num_classes: usize, channels: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum={momentum} must lie in [0, 1]"
            )));
        }
        if num_classes == 0 || channels == 0 {
            return Err(Error::invalid("prototype bank needs classes and channels"));
        }
        Ok(Self {
            num_classes,
            channels,
            prototypes: vec![0.0; num_classes * channels],
            initialized: vec![false; num_classes],
            momentum,
        })
    }

    /// Rebuilds a bank from stored prototypes and its initialized mask.
    /// Uninitialized rows must be all zero.
    pub fn from_parts(
        num_classes: usize,
        channels: usize,
        prototypes: Vec<f64>,
        initialized: Vec<bool>,
        momentum: f64,
    ) -> Result<Self> {
        let mut bank = Self::new(num_classes, channels, momentum)?;
        if prototypes.len() != num_classes * channels || initialized.len() != num_classes {
            return Err(Error::invalid(
                "prototype bank parts have inconsistent sizes",
            ));
        }
        for (k, init) in initialized.iter().enumerate() {
            let row = &prototypes[k * channels..(k + 1) * channels];
            if !init && row.iter().any(|&v| v != 0.0) {
                return Err(Error::invalid(format!(
                    "uninitialized prototype {k} is not zero"
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("prototype {k} is not finite")));
            }
        }
        bank.prototypes = prototypes;
        bank.initialized = initialized;
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn momentum(&self) -> f64 {
        self.momentum
    }
    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }
    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class * self.channels..(class + 1) * self.channels]
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized.get(class).copied().unwrap_or(false)
    }

    /// Number of initialized prototypes.
    pub fn active(&self) -> usize {
        self.initialized.iter().filter(|&&b| b).count()
    }

    /// Applies `p <- mu p + (1 - mu) f` for every class in `class_means`;
    /// absent classes keep their prototype.
    pub fn update(&mut self, class_means: &BTreeMap<usize, ClassMean>) -> Result<()> {
        for (&class, m) in class_means {
            if class >= self.num_classes {
                return Err(Error::invalid(format!(
                    "class {class} out of range for {} prototypes",
                    self.num_classes
                )));
            }
            if m.mean.len() != self.channels {
                return Err(Error::invalid(format!(
                    "class mean has {} channels, bank has {}",
                    m.mean.len(),
                    self.channels
                )));
            }
        }
        let mu = self.momentum;
        for (&class, m) in class_means {
            let row = &mut self.prototypes[class * self.channels..(class + 1) * self.channels];
            if self.initialized[class] {
                for (p, f) in row.iter_mut().zip(&m.mean) {
                    *p = mu * *p + (1.0 - mu) * f;
                }
            } else {
                row.copy_from_slice(&m.mean);
                self.initialized[class] = true;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PifaLoss {
    pub loss: f64,
    /// Gradient with respect to each raw instance feature vector.
    pub grad_instances: Vec<Vec<f64>>,
}

/// Prototype InfoNCE averaged over instances.
///
/// Instances and prototypes are L2-normalized; the softmax runs over the
/// initialized prototypes only. Prototypes are constants for the gradient.
pub fn pifa_loss(
    instances: &[InstanceFeature],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<PifaLoss> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau={tau} must be positive")));
    }
    let active: Vec<usize> = (0..bank.num_classes)
        .filter(|&c| bank.initialized[c])
        .collect();
    if active.is_empty() {
        return Err(Error::invalid("no initialized prototypes"));
    }
    let protos: Vec<Vec<f64>> = active
        .iter()
        .map(|&c| normalized(bank.prototype(c), NORM_EPSILON))
        .collect();

    let m = instances.len();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(m);
    for (i, inst) in instances.iter().enumerate() {
        if inst.features.len() != bank.channels {
            return Err(Error::invalid(format!(
                "instance {i} has {} channels, bank has {}",
                inst.features.len(),
                bank.channels
            )));
        }
        let target = active
            .iter()
            .position(|&c| c == inst.label)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "instance {i} is labeled {} which has no initialized prototype",
                    inst.label
                ))
            })?;
        let f_hat = normalized(&inst.features, NORM_EPSILON);
        let logits: Vec<f64> = protos.iter().map(|p| dot(&f_hat, p) / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += (total.ln() + max) - logits[target];

        // d/d f_hat = (sum_c softmax_c p_c - p_target) / tau
        let mut g_hat = vec![0.0; bank.channels];
        for (e, p) in exps.iter().zip(&protos) {
            let w = e / total;
            for (g, pk) in g_hat.iter_mut().zip(p) {
                *g += w * pk;
            }
        }
        for (g, pk) in g_hat.iter_mut().zip(&protos[target]) {
            *g = (*g - pk) / tau;
        }
        grads.push(project_through_normalization(
            &g_hat,
            &inst.features,
            &f_hat,
        ));
    }
    if m > 0 {
        let scale = 1.0 / m as f64;
        loss *= scale;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    Ok(PifaLoss {
        loss,
        grad_instances: grads,
    })
}

/// Chain rule through `x -> x / max(|x|, eps)` for an upstream gradient `g`.
fn project_through_normalization(g: &[f64], x: &[f64], x_hat: &[f64]) -> Vec<f64> {
    let nx = l2_norm(x);
    if nx > NORM_EPSILON {
        let along = dot(g, x_hat);
        g.iter()
            .zip(x_hat)
            .map(|(gk, hk)| (gk - along * hk) / nx)
            .collect()
    } else {
        cosine_grad(g, x, 0.0)
    }
}
