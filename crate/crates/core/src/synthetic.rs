//! Seeded synthetic scenes for the toy adaptation loop.
//!
//! A scene is a 128 x 128 image with 2 to 5 non-overlapping objects from
//! four classes, observed through a 16 x 16 grid of 8-channel features.
//! Channels 0..4 carry class evidence and channels 4..8 carry background.
//!
//! Three feature maps are produced per scene:
//!
//! - `vfm_map`: domain-invariant features, the frozen foundation model's
//!   view of the image.
//! - `weak_view` / `strong_view`: the target-domain image as seen by the
//!   detector. Class-0 evidence leaks into channel 1 (the domain shift),
//!   and each view adds independent cell noise, weak for the teacher and
//!   strong for the student.
//!
//! Teacher proposals and VFM detections come from an explicit noise model
//! with independent error modes. The teacher's class scores are computed
//! later from the weak view, so its confusions come from the domain shift
//! (class 0 read as class 1). The VFM detections confuse classes 2 and 3,
//! have looser boxes and flatter distributions.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::fusion::Detection;
use crate::geometry::BBox;
use crate::pifa::FeatureMap;

pub const NUM_CLASSES: usize = 4;
pub const CHANNELS: usize = 8;
pub const IMAGE_SIZE: f64 = 128.0;
pub const GRID: usize = 16;
pub const PATCHES: usize = GRID * GRID;

const CELL: f64 = IMAGE_SIZE / GRID as f64;
const LAYOUT: usize = 4;
const SLOT: f64 = IMAGE_SIZE / LAYOUT as f64;
const MIN_SIDE: f64 = 14.0;
const MAX_SIDE: f64 = 28.0;
const BACKGROUND_LEVEL: f64 = 0.5;

/// Parameters of the scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Per-object appearance noise on the class channels.
    pub object_noise: f64,
    pub cell_noise: f64,
    pub weak_noise: f64,
    pub strong_noise: f64,
    /// Fraction of class-0 evidence moved into channel 1 by the domain shift.
    pub shift: f64,
    /// Box jitter standard deviation as a fraction of box size.
    pub box_jitter: f64,
    pub miss_rate: f64,
    /// Expected false positives per ground-truth object, per source.
    pub false_positive_rate: f64,
    pub vfm_box_scale: f64,
    /// Probability that the VFM swaps class 2 and class 3.
    pub vfm_confusion: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            object_noise: 0.3,
            cell_noise: 0.05,
            weak_noise: 0.05,
            strong_noise: 0.15,
            shift: 0.4,
            box_jitter: 0.02,
            miss_rate: 0.1,
            false_positive_rate: 0.05,
            vfm_box_scale: 1.05,
            vfm_confusion: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image_id: String,
    /// Hidden labels, used for evaluation only.
    pub objects: Vec<GroundTruth>,
    pub vfm_map: FeatureMap,
    pub weak_view: FeatureMap,
    pub strong_view: FeatureMap,
    /// Teacher box proposals; class scores come from the teacher model.
    pub teacher_boxes: Vec<BBox>,
    pub vfm_detections: Vec<Detection>,
}

/// Seed of scene `index` in a set generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

pub fn generate_scenes(seed: u64, count: usize, noise: &NoiseModel) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .map(|i| generate_scene(scene_seed(seed, i), format!("scene_{i:04}"), noise))
        .collect()
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite non-negative standard deviation")
}

pub fn generate_scene(seed: u64, image_id: String, noise: &NoiseModel) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(&mut rng);

    let base = paint_base(&mut rng, &objects, noise);
    let weak = view(&mut rng, &base, noise.shift, noise.weak_noise);
    let strong = view(&mut rng, &base, noise.shift, noise.strong_noise);
    let map = |data| FeatureMap::new(CHANNELS, GRID, GRID, data, IMAGE_SIZE, IMAGE_SIZE);

    let teacher_boxes = teacher_proposals(&mut rng, &objects, noise);
    let vfm_detections = vfm_detections(&mut rng, &objects, noise)?;
    Ok(SyntheticScene {
        image_id,
        objects,
        vfm_map: map(base)?,
        weak_view: map(weak)?,
        strong_view: map(strong)?,
        teacher_boxes,
        vfm_detections,
    })
}

fn place_objects(rng: &mut ChaCha8Rng) -> Vec<GroundTruth> {
    let count = rng.random_range(2..=5);
    sample(rng, LAYOUT * LAYOUT, count)
        .into_iter()
        .map(|slot| {
            let (sx, sy) = ((slot % LAYOUT) as f64 * SLOT, (slot / LAYOUT) as f64 * SLOT);
            let w = rng.random_range(MIN_SIDE..MAX_SIDE);
            let h = rng.random_range(MIN_SIDE..MAX_SIDE);
            let x1 = sx + rng.random_range(0.0..SLOT - w);
            let y1 = sy + rng.random_range(0.0..SLOT - h);
            GroundTruth {
                bbox: BBox::from_valid([x1, y1, x1 + w, y1 + h]),
                class: rng.random_range(0..NUM_CLASSES),
            }
        })
        .collect()
}

/// `C x H x W` map; a cell belongs to an object when its center lies in
/// the object's box.
fn paint_base(rng: &mut ChaCha8Rng, objects: &[GroundTruth], noise: &NoiseModel) -> Vec<f64> {
    let appearance: Vec<Vec<f64>> = objects
        .iter()
        .map(|o| {
            (0..NUM_CLASSES)
                .map(|c| f64::from(u8::from(c == o.class)) + normal(noise.object_noise).sample(rng))
                .collect()
        })
        .collect();
    let cell = normal(noise.cell_noise);
    let mut data = vec![0.0; CHANNELS * PATCHES];
    for gy in 0..GRID {
        for gx in 0..GRID {
            let (cx, cy) = ((gx as f64 + 0.5) * CELL, (gy as f64 + 0.5) * CELL);
            let owner = objects.iter().position(|o| {
                let b = &o.bbox;
                cx >= b.x1() && cx < b.x2() && cy >= b.y1() && cy < b.y2()
            });
            for ch in 0..CHANNELS {
                let mean = match owner {
                    Some(k) if ch < NUM_CLASSES => appearance[k][ch],
                    Some(_) => 0.0,
                    None if ch >= NUM_CLASSES => BACKGROUND_LEVEL,
                    None => 0.0,
                };
                data[(ch * GRID + gy) * GRID + gx] = mean + cell.sample(rng);
            }
        }
    }
    data
}

/// Domain-shifted copy of `base` with fresh cell noise.
fn view(rng: &mut ChaCha8Rng, base: &[f64], shift: f64, sd: f64) -> Vec<f64> {
    let mut out = base.to_vec();
    for p in 0..PATCHES {
        let c0 = base[p];
        out[p] = (1.0 - shift) * c0;
        out[PATCHES + p] += shift * c0;
    }
    let d = normal(sd);
    out.iter_mut().for_each(|v| *v += d.sample(rng));
    out
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, scale: f64, frac: f64) -> Option<BBox> {
    let (cx, cy) = ((b.x1() + b.x2()) / 2.0, (b.y1() + b.y2()) / 2.0);
    let (hw, hh) = (b.width() * scale / 2.0, b.height() * scale / 2.0);
    let dx = normal(frac * b.width());
    let dy = normal(frac * b.height());
    BBox::new(
        cx - hw + dx.sample(rng),
        cy - hh + dy.sample(rng),
        cx + hw + dx.sample(rng),
        cy + hh + dy.sample(rng),
    )
    .ok()?
    .clip(IMAGE_SIZE, IMAGE_SIZE)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(MIN_SIDE..MAX_SIDE);
    let h = rng.random_range(MIN_SIDE..MAX_SIDE);
    let x1 = rng.random_range(0.0..IMAGE_SIZE - w);
    let y1 = rng.random_range(0.0..IMAGE_SIZE - h);
    BBox::from_valid([x1, y1, x1 + w, y1 + h])
}

fn false_positive_count(rng: &mut ChaCha8Rng, objects: usize, rate: f64) -> usize {
    (0..objects).filter(|_| rng.random_bool(rate)).count()
}

fn teacher_proposals(
    rng: &mut ChaCha8Rng,
    objects: &[GroundTruth],
    noise: &NoiseModel,
) -> Vec<BBox> {
    let mut boxes = Vec::new();
    for o in objects {
        if rng.random_bool(noise.miss_rate) {
            continue;
        }
        boxes.extend(jitter(rng, &o.bbox, 1.0, noise.box_jitter));
    }
    for _ in 0..false_positive_count(rng, objects.len(), noise.false_positive_rate) {
        boxes.push(random_box(rng));
    }
    boxes
}

/// Distribution with `top` on `class` and the rest spread over the other
/// classes in random proportions.
fn spread(rng: &mut ChaCha8Rng, class: usize, top: f64) -> Vec<f64> {
    let shares: Vec<f64> = (0..NUM_CLASSES)
        .map(|c| {
            if c == class {
                0.0
            } else {
                rng.random_range(0.5..1.0)
            }
        })
        .collect();
    let total: f64 = shares.iter().sum();
    let mut probs: Vec<f64> = shares.iter().map(|s| (1.0 - top) * s / total).collect();
    probs[class] = top;
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    probs
}

fn vfm_detections(
    rng: &mut ChaCha8Rng,
    objects: &[GroundTruth],
    noise: &NoiseModel,
) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for o in objects {
        if rng.random_bool(noise.miss_rate) {
            continue;
        }
        let Some(bbox) = jitter(rng, &o.bbox, noise.vfm_box_scale, noise.box_jitter) else {
            continue;
        };
        let confused = o.class >= 2 && rng.random_bool(noise.vfm_confusion);
        let probs = if confused {
            let top = rng.random_range(0.45..0.6);
            spread(rng, 5 - o.class, top)
        } else {
            let top = rng.random_range(0.7..0.95);
            spread(rng, o.class, top)
        };
        dets.push(Detection::new(bbox, probs)?);
    }
    for _ in 0..false_positive_count(rng, objects.len(), noise.false_positive_rate) {
        let bbox = random_box(rng);
        let class = rng.random_range(0..NUM_CLASSES);
        let top = rng.random_range(0.3..0.45);
        dets.push(Detection::new(bbox, spread(rng, class, top))?);
    }
    Ok(dets)
}

/// Detection counts against hidden ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub const MATCH_IOU: f64 = 0.5;

/// Greedy one-to-one matching in descending confidence: a prediction is a
/// true positive when an unmatched object of its class overlaps it with
/// IoU at least [`MATCH_IOU`] (the best such object is taken).
pub fn match_counts(preds: &[(BBox, usize, f64)], objects: &[GroundTruth]) -> Counts {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].2.total_cmp(&preds[a].2).then(a.cmp(&b)));
    let mut taken = vec![false; objects.len()];
    let mut tp = 0;
    for i in order {
        let (bbox, class, _) = &preds[i];
        let best = objects
            .iter()
            .enumerate()
            .filter(|(j, o)| !taken[*j] && o.class == *class)
            .map(|(j, o)| (j, crate::geometry::iou(bbox, &o.bbox)))
            .filter(|(_, v)| *v >= MATCH_IOU)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            taken[j] = true;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: preds.len() - tp,
        fn_: objects.len() - tp,
    }
}

pub fn detection_counts(dets: &[Detection], objects: &[GroundTruth]) -> Counts {
    let preds: Vec<_> = dets
        .iter()
        .map(|d| (d.bbox, d.label(), d.confidence()))
        .collect();
    match_counts(&preds, objects)
}

/// Channel-last `patches x channels` rows of a channel-first map.
pub fn patch_rows(map: &FeatureMap) -> Vec<f64> {
    let (c, n) = (map.channels(), map.height() * map.width());
    let mut rows = vec![0.0; n * c];
    for ch in 0..c {
        for p in 0..n {
            rows[p * c + ch] = map.data()[ch * n + p];
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible() {
        let a = generate_scene(3, "a".into(), &NoiseModel::default()).unwrap();
        let b = generate_scene(3, "a".into(), &NoiseModel::default()).unwrap();
        assert_eq!(a.objects, b.objects);
        assert_eq!(a.strong_view, b.strong_view);
        assert_eq!(a.vfm_detections, b.vfm_detections);
    }

    #[test]
    fn objects_do_not_overlap() {
        for s in 0..50 {
            let scene = generate_scene(s, String::new(), &NoiseModel::default()).unwrap();
            let o = &scene.objects;
            assert!((2..=5).contains(&o.len()));
            for i in 0..o.len() {
                for j in i + 1..o.len() {
                    assert_eq!(crate::geometry::iou(&o[i].bbox, &o[j].bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn vfm_probs_are_distributions() {
        let scenes = generate_scenes(1, 20, &NoiseModel::default()).unwrap();
        for d in scenes.iter().flat_map(|s| &s.vfm_detections) {
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let scene = generate_scene(5, String::new(), &NoiseModel::default()).unwrap();
        let preds: Vec<_> = scene
            .objects
            .iter()
            .map(|o| (o.bbox, o.class, 1.0))
            .collect();
        let c = match_counts(&preds, &scene.objects);
        assert_eq!(c.f1(), 1.0);
        let wrong: Vec<_> = scene
            .objects
            .iter()
            .map(|o| (o.bbox, (o.class + 1) % 4, 1.0))
            .collect();
        assert_eq!(match_counts(&wrong, &scene.objects).tp, 0);
    }
}
