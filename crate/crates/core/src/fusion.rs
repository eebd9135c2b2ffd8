//! Dual-source pseudo-label fusion.
//!
//! [`depf`] is the entropy-aware, class-agnostic fusion: detections from both
//! sources are pooled, clustered by IoU regardless of class, and each cluster
//! is collapsed into one pseudo-label whose box and class distribution are
//! inverse-entropy weighted means of the members. [`nms`], [`wbf`] and
//! [`remove_individual`] are the baseline strategies it is compared against.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cluster, iou, BBox, ClusterSet};

pub const DEFAULT_BETA: f64 = 0.7;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// A box with a per-class probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub probs: Vec<f64>,
}

impl Detection {
    /// Checks that `probs` is non-empty with every entry finite and in
    /// `[0, 1]`. The sum-to-one check lives at ingestion, see
    /// [`crate::io::read_detections`].
    pub fn new(bbox: BBox, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self { bbox, probs })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Most likely class, lowest index on ties.
    pub fn label(&self) -> usize {
        argmax(&self.probs)
    }

    /// Probability of the most likely class.
    pub fn confidence(&self) -> f64 {
        self.probs[self.label()]
    }
}

impl AsRef<Detection> for Detection {
    fn as_ref(&self) -> &Detection {
        self
    }
}

/// One fused pseudo-label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedLabel {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub probs: Vec<f64>,
    pub label: usize,
}

impl FusedLabel {
    pub fn confidence(&self) -> f64 {
        self.probs[self.label]
    }

    fn from_detection(d: &Detection) -> Self {
        Self {
            bbox: d.bbox,
            probs: d.probs.clone(),
            label: d.label(),
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Depf,
    Nms,
    Wbf,
    Ri,
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "depf" => Ok(Self::Depf),
            "nms" => Ok(Self::Nms),
            "wbf" => Ok(Self::Wbf),
            "ri" => Ok(Self::Ri),
            other => Err(Error::invalid(format!("unknown fusion method `{other}`"))),
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Depf => "depf",
            Self::Nms => "nms",
            Self::Wbf => "wbf",
            Self::Ri => "ri",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// IoU threshold for clustering (and suppression, for NMS).
    pub beta: f64,
    /// Shared stability constant for the entropy log and the weight inversion.
    pub epsilon: f64,
    pub method: FusionMethod,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
            method: FusionMethod::Depf,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!(
                "beta={} must lie in (0, 1)",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon={} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Which of the two fused inputs a detection came from. The teacher-like
/// source sorts before the VFM-like source on otherwise equal keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    A = 0,
    B = 1,
}

/// A detection tagged with its source, as produced by [`pooled_sorted`].
#[derive(Debug, Clone, Copy)]
pub struct Tagged<'a> {
    pub source: Source,
    pub det: &'a Detection,
}

/// Shannon entropy `-sum p log(p + epsilon)` in nats.
///
/// Zero-probability terms contribute nothing. Results within rounding of
/// zero (possible for one-hot inputs when `epsilon > 0`) are clamped to 0.
pub fn shannon_entropy(probs: &[f64], epsilon: f64) -> Result<f64> {
    let mut h = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::invalid(format!(
                "probability {p} is negative or not finite"
            )));
        }
        if p > 0.0 {
            h -= p * (p + epsilon).ln();
        }
    }
    Ok(h.max(0.0))
}

/// Normalized inverse-entropy weights `(1 / (H_k + eps)) / sum_j (1 / (H_j + eps))`.
pub fn entropy_weights<D: AsRef<Detection>>(cluster: &[D], epsilon: f64) -> Result<Vec<f64>> {
    if cluster.is_empty() {
        return Err(Error::invalid("cannot weight an empty cluster"));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid(format!(
            "epsilon={epsilon} must be positive"
        )));
    }
    let raw = cluster
        .iter()
        .map(|d| shannon_entropy(&d.as_ref().probs, epsilon).map(|h| 1.0 / (h + epsilon)))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Collapses a cluster into one pseudo-label using [`entropy_weights`].
pub fn fuse_cluster<D: AsRef<Detection>>(cluster: &[D], epsilon: f64) -> Result<FusedLabel> {
    let weights = entropy_weights(cluster, epsilon)?;
    let num_classes = cluster[0].as_ref().num_classes();
    let mut coords = [0.0f64; 4];
    let mut probs = vec![0.0f64; num_classes];
    for (d, &w) in cluster.iter().zip(&weights) {
        let d = d.as_ref();
        if d.num_classes() != num_classes {
            return Err(Error::invalid("cluster members disagree on class count"));
        }
        for (acc, c) in coords.iter_mut().zip(d.bbox.to_array()) {
            *acc += w * c;
        }
        for (acc, p) in probs.iter_mut().zip(&d.probs) {
            *acc += w * p;
        }
    }
    let label = argmax(&probs);
    Ok(FusedLabel {
        bbox: BBox::from_valid(coords),
        probs,
        label,
    })
}

/// Class count shared by every detection of both sources, or `None` when
/// both are empty.
pub fn common_class_count(a: &[Detection], b: &[Detection]) -> Result<Option<usize>> {
    let mut count = None;
    for (source, dets) in [("A", a), ("B", b)] {
        for (i, d) in dets.iter().enumerate() {
            match count {
                None => count = Some(d.num_classes()),
                Some(c) if c != d.num_classes() => {
                    return Err(Error::invalid(format!(
                        "class-count mismatch: source {source} detection {i} has {} classes, expected {c}",
                        d.num_classes()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(count)
}

/// Compares two detections under the canonical clustering order:
/// descending top-class probability, then `(x1, y1, x2, y2)` ascending.
fn canonical_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.confidence().total_cmp(&a.confidence()).then_with(|| {
        a.bbox
            .to_array()
            .iter()
            .zip(b.bbox.to_array().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Pools both sources and sorts them into canonical order. Remaining ties
/// are broken by source, then by position within the source.
pub fn pooled_sorted<'a>(a: &'a [Detection], b: &'a [Detection]) -> Vec<Tagged<'a>> {
    let mut pooled: Vec<Tagged<'a>> = a
        .iter()
        .map(|det| Tagged {
            source: Source::A,
            det,
        })
        .chain(b.iter().map(|det| Tagged {
            source: Source::B,
            det,
        }))
        .collect();
    pooled.sort_by(|x, y| canonical_cmp(x.det, y.det).then(x.source.cmp(&y.source)));
    pooled
}

/// Canonical processing order for a single list; see [`pooled_sorted`].
pub fn canonical_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| canonical_cmp(&dets[i], &dets[j]));
    order
}

fn cluster_pooled(pooled: &[Tagged<'_>], beta: f64) -> Result<ClusterSet> {
    let boxes: Vec<BBox> = pooled.iter().map(|t| t.det.bbox).collect();
    cluster(&boxes, beta)
}

/// Result of one fusion strategy on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome {
    pub fused: Vec<FusedLabel>,
    /// Clusters formed before any filtering. For NMS this counts the
    /// surviving detections.
    pub clusters: usize,
}

/// Entropy-aware dual-source fusion.
///
/// Pools both sources, sorts them canonically, clusters by IoU above
/// `cfg.beta` ignoring class, and fuses every cluster. Output follows
/// cluster creation order.
pub fn depf(a: &[Detection], b: &[Detection], cfg: &FusionConfig) -> Result<Vec<FusedLabel>> {
    Ok(depf_outcome(a, b, cfg)?.fused)
}

fn depf_outcome(a: &[Detection], b: &[Detection], cfg: &FusionConfig) -> Result<FusionOutcome> {
    cfg.validate()?;
    common_class_count(a, b)?;
    let pooled = pooled_sorted(a, b);
    let clusters = cluster_pooled(&pooled, cfg.beta)?;
    let fused = clusters
        .clusters()
        .iter()
        .map(|c| {
            let members: Vec<&Detection> = c.iter().map(|&i| pooled[i].det).collect();
            fuse_cluster(&members, cfg.epsilon)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FusionOutcome {
        clusters: clusters.len(),
        fused,
    })
}

/// Class-wise greedy non-maximum suppression.
///
/// Detections are grouped by their top class. Within a class they are
/// visited by descending probability of that class, and any later box with
/// IoU above `iou_thresh` to a kept box is dropped. Output lists survivors
/// class by class in ascending class order.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    let Some(num_classes) = common_class_count(detections, &[])? else {
        return Ok(Vec::new());
    };
    let labels: Vec<usize> = detections.iter().map(Detection::label).collect();
    let mut kept = Vec::new();
    for class in 0..num_classes {
        let mut order: Vec<usize> = (0..detections.len())
            .filter(|&i| labels[i] == class)
            .collect();
        order.sort_by(|&i, &j| detections[j].probs[class].total_cmp(&detections[i].probs[class]));
        let mut keep_class: Vec<usize> = Vec::new();
        for i in order {
            if keep_class
                .iter()
                .all(|&k| iou(&detections[k].bbox, &detections[i].bbox) <= iou_thresh)
            {
                keep_class.push(i);
            }
        }
        kept.extend(keep_class.into_iter().map(|i| detections[i].clone()));
    }
    Ok(kept)
}

/// Weighted box fusion over both sources.
///
/// Detections are visited by descending confidence (top-class probability)
/// and matched only against fused boxes of the same top class; the best
/// match with IoU above `iou_thresh` absorbs the detection. Fused boxes are
/// confidence-weighted coordinate means. The fused class distribution is the
/// plain mean of member distributions, so the fused confidence for the
/// cluster class is the mean member confidence.
pub fn wbf(a: &[Detection], b: &[Detection], iou_thresh: f64) -> Result<Vec<FusedLabel>> {
    common_class_count(a, b)?;
    let mut pooled: Vec<&Detection> = a.iter().chain(b).collect();
    pooled.sort_by(|x, y| y.confidence().total_cmp(&x.confidence()));

    struct Group<'a> {
        class: usize,
        members: Vec<&'a Detection>,
        fused: BBox,
    }

    let mut groups: Vec<Group<'_>> = Vec::new();
    for det in pooled {
        let class = det.label();
        let mut best: Option<(usize, f64)> = None;
        for (g, group) in groups.iter().enumerate() {
            if group.class != class {
                continue;
            }
            let v = iou(&group.fused, &det.bbox);
            if v > best.map_or(iou_thresh, |(_, b)| b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                let group = &mut groups[g];
                group.members.push(det);
                group.fused = confidence_weighted_box(&group.members);
            }
            None => groups.push(Group {
                class,
                members: vec![det],
                fused: det.bbox,
            }),
        }
    }

    Ok(groups
        .into_iter()
        .map(|g| {
            let n = g.members.len() as f64;
            let mut probs = vec![0.0; g.members[0].num_classes()];
            for m in &g.members {
                for (acc, p) in probs.iter_mut().zip(&m.probs) {
                    *acc += p;
                }
            }
            probs.iter_mut().for_each(|p| *p /= n);
            let label = argmax(&probs);
            FusedLabel {
                bbox: g.fused,
                probs,
                label,
            }
        })
        .collect())
}

fn confidence_weighted_box(members: &[&Detection]) -> BBox {
    let mut coords = [0.0f64; 4];
    let mut total = 0.0;
    for m in members {
        let w = m.confidence();
        total += w;
        for (acc, c) in coords.iter_mut().zip(m.bbox.to_array()) {
            *acc += w * c;
        }
    }
    if total > 0.0 {
        coords.iter_mut().for_each(|c| *c /= total);
        BBox::from_valid(coords)
    } else {
        members[0].bbox
    }
}

/// Keeps only clusters corroborated by both sources, then fuses them with
/// entropy weights. Clustering is the same class-agnostic pass as [`depf`].
pub fn remove_individual(
    a: &[Detection],
    b: &[Detection],
    iou_thresh: f64,
    epsilon: f64,
) -> Result<Vec<FusedLabel>> {
    Ok(remove_individual_outcome(a, b, iou_thresh, epsilon)?.fused)
}

fn remove_individual_outcome(
    a: &[Detection],
    b: &[Detection],
    iou_thresh: f64,
    epsilon: f64,
) -> Result<FusionOutcome> {
    common_class_count(a, b)?;
    let pooled = pooled_sorted(a, b);
    let clusters = cluster_pooled(&pooled, iou_thresh)?;
    let mut fused = Vec::new();
    for c in clusters.clusters() {
        let has = |s: Source| c.iter().any(|&i| pooled[i].source == s);
        if has(Source::A) && has(Source::B) {
            let members: Vec<&Detection> = c.iter().map(|&i| pooled[i].det).collect();
            fused.push(fuse_cluster(&members, epsilon)?);
        }
    }
    Ok(FusionOutcome {
        clusters: clusters.len(),
        fused,
    })
}

/// Runs the strategy selected by `cfg.method` on one image.
pub fn fuse_sources(a: &[Detection], b: &[Detection], cfg: &FusionConfig) -> Result<FusionOutcome> {
    cfg.validate()?;
    match cfg.method {
        FusionMethod::Depf => depf_outcome(a, b, cfg),
        FusionMethod::Ri => remove_individual_outcome(a, b, cfg.beta, cfg.epsilon),
        FusionMethod::Wbf => {
            let fused = wbf(a, b, cfg.beta)?;
            Ok(FusionOutcome {
                clusters: fused.len(),
                fused,
            })
        }
        FusionMethod::Nms => {
            let union: Vec<Detection> = a.iter().chain(b).cloned().collect();
            let fused: Vec<FusedLabel> = nms(&union, cfg.beta)?
                .iter()
                .map(FusedLabel::from_detection)
                .collect();
            Ok(FusionOutcome {
                clusters: fused.len(),
                fused,
            })
        }
    }
}
