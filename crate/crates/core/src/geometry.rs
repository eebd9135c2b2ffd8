//! Axis-aligned boxes, IoU, and the greedy IoU clustering shared by the
//! fusion strategies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in absolute pixel corner form `(x1, y1, x2, y2)`.
///
/// Construction through [`BBox::new`] guarantees finite coordinates with
/// `x2 > x1` and `y2 > y1`, so every `BBox` has strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "box [{x1}, {y1}, {x2}, {y2}] has non-finite coordinates"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::invalid(format!(
                "box [{x1}, {y1}, {x2}, {y2}] is degenerate (requires x2 > x1 and y2 > y1)"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// Builds a box from coordinates already known to be valid, such as a
    /// convex combination of valid boxes.
    pub(crate) fn from_valid(c: [f64; 4]) -> Self {
        debug_assert!(c[2] > c[0] && c[3] > c[1], "invalid box {c:?}");
        Self {
            x1: c[0],
            y1: c[1],
            x2: c[2],
            y2: c[3],
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection with `[0, width] x [0, height]`, or `None` if nothing
    /// with positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        BBox::new(x1, y1, x2, y2).ok()
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(de)?;
        BBox::from_array(c).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, and 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Partition of detection indices into IoU-linked groups.
///
/// Each cluster lists indices into the slice handed to [`cluster`], in the
/// order the members joined.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClusterSet {
    clusters: Vec<Vec<usize>>,
}

impl ClusterSet {
    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn into_inner(self) -> Vec<Vec<usize>> {
        self.clusters
    }

    /// Materializes each cluster as references into `items`.
    pub fn members<'a, T>(&self, items: &'a [T]) -> Vec<Vec<&'a T>> {
        self.clusters
            .iter()
            .map(|c| c.iter().map(|&i| &items[i]).collect())
            .collect()
    }
}

/// Greedy single-pass clustering.
///
/// Boxes are visited in slice order. Each joins the first existing cluster
/// that holds a member with IoU strictly greater than `beta`, otherwise it
/// opens a new cluster. Clusters are never merged. Callers that need a
/// deterministic partition sort the input first (see
/// [`crate::fusion::canonical_order`]).
pub fn cluster(boxes: &[BBox], beta: f64) -> Result<ClusterSet> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold beta={beta} must lie in (0, 1)"
        )));
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (k, b) in boxes.iter().enumerate() {
        let found = clusters
            .iter()
            .position(|c| c.iter().any(|&j| iou(b, &boxes[j]) > beta));
        match found {
            Some(m) => clusters[m].push(k),
            None => clusters.push(vec![k]),
        }
    }
    Ok(ClusterSet { clusters })
}
