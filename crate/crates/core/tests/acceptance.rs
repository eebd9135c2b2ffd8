//! End-to-end acceptance checks. Each criterion writes one `PASS`/`FAIL`
//! line to stderr, bypassing output capture; the test fails if any
//! criterion fails.
//!
//!     cargo test -p sfodkit --release --test acceptance -- --nocapture

// The reference implementations below are deliberately literal.
#![allow(
    clippy::needless_range_loop,
    clippy::type_complexity,
    clippy::neg_cmp_op_on_partial_ord
)]

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfodkit::ema::EmaState;
use sfodkit::fusion::{
    depf, entropy_weights, shannon_entropy, Detection, FusionConfig, FusionMethod,
};
use sfodkit::geometry::BBox;
use sfodkit::gradcheck::{self, GradLoss};
use sfodkit::io::{
    parse_detections, read_tensor, write_detections, write_tensor, DetectionFile, ImageDetections,
    ReadOptions, Tensor,
};
use sfodkit::pgfa::{batch_patch_weights, PatchFeatureBatch, PatchWeightConfig};
use sfodkit::pifa::{
    pifa_loss, pool_instance, ClassMean, FeatureMap, InstanceFeature, PrototypeBank,
};
use sfodkit::selftrain::{
    fusion_benchmark, reference_trajectory, run_adaptation, trajectory, Mode, TrainerConfig,
};
use sfodkit::synthetic::{generate_scenes, NoiseModel};

type Outcome = Result<String, String>;

const EPS: f64 = 1e-8;
const BETA: f64 = 0.7;

// ---------------------------------------------------------------------------
// Reference clustering and fusion, written out step by step.

struct Pred {
    b: [f64; 4],
    p: Vec<f64>,
}

fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn oracle_entropy(p: &[f64], eps: f64) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * (v + eps).ln();
        }
    }
    h.max(0.0)
}

fn top(p: &[f64]) -> f64 {
    p.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Merges both sources, orders them, and groups them into clusters.
/// Returns the clusters as lists of indices into the merged list.
fn oracle_clusters<'a>(
    a: &'a [Pred],
    b: &'a [Pred],
    beta: f64,
) -> (Vec<&'a Pred>, Vec<Vec<usize>>) {
    // B <- B1 u B2, tagged by source
    let mut merged: Vec<(&Pred, u8)> = a
        .iter()
        .map(|d| (d, 0))
        .chain(b.iter().map(|d| (d, 1)))
        .collect();
    // confidence descending, then coordinates ascending, then source
    merged.sort_by(|x, y| {
        top(&y.0.p)
            .partial_cmp(&top(&x.0.p))
            .unwrap()
            .then(x.0.b.partial_cmp(&y.0.b).unwrap())
            .then(x.1.cmp(&y.1))
    });
    let merged: Vec<&Pred> = merged.into_iter().map(|(d, _)| d).collect();

    // C <- []
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (k, d) in merged.iter().enumerate() {
        // find cluster C_m with some member b_j such that IoU(b_k, b_j) > beta
        let mut found = None;
        for (m, c) in clusters.iter().enumerate() {
            let mut hit = false;
            for &j in c {
                if oracle_iou(&d.b, &merged[j].b) > beta {
                    hit = true;
                }
            }
            if hit {
                found = Some(m);
                break;
            }
        }
        match found {
            Some(m) => clusters[m].push(k),
            None => clusters.push(vec![k]),
        }
    }
    (merged, clusters)
}

fn oracle_depf(a: &[Pred], b: &[Pred], beta: f64, eps: f64) -> Vec<([f64; 4], Vec<f64>, usize)> {
    let (merged, clusters) = oracle_clusters(a, b, beta);
    let mut out = Vec::new();
    for c in clusters {
        let mut w: Vec<f64> = c
            .iter()
            .map(|&k| 1.0 / (oracle_entropy(&merged[k].p, eps) + eps))
            .collect();
        let total: f64 = w.iter().sum();
        for x in &mut w {
            *x /= total;
        }
        let n = merged[c[0]].p.len();
        let mut bx = [0.0; 4];
        let mut p = vec![0.0; n];
        for (i, &k) in c.iter().enumerate() {
            for j in 0..4 {
                bx[j] += w[i] * merged[k].b[j];
            }
            for j in 0..n {
                p[j] += w[i] * merged[k].p[j];
            }
        }
        let mut label = 0;
        for j in 1..n {
            if p[j] > p[label] {
                label = j;
            }
        }
        out.push((bx, p, label));
    }
    out
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    match rng.random_range(0..10) {
        // one-hot
        0 => {
            let mut p = vec![0.0; c];
            p[rng.random_range(0..c)] = 1.0;
            p
        }
        // uniform
        1 => vec![1.0 / c as f64; c],
        _ => {
            let sharp = rng.random_range(0.5..4.0);
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>().powf(sharp)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        }
    }
}

/// Boxes scattered around a few anchors so that clusters of several
/// members, chains and singletons all occur.
fn random_instance(rng: &mut ChaCha8Rng) -> (usize, Vec<Pred>, Vec<Pred>) {
    let c = rng.random_range(2..=8);
    let anchors: Vec<[f64; 4]> = (0..rng.random_range(1..=4))
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
            let (w, h) = (rng.random_range(10.0..80.0), rng.random_range(10.0..80.0));
            [x, y, x + w, y + h]
        })
        .collect();
    let side = |rng: &mut ChaCha8Rng| -> Vec<Pred> {
        (0..rng.random_range(0..=10))
            .map(|_| {
                let a = anchors.choose(rng).unwrap();
                let (w, h) = (a[2] - a[0], a[3] - a[1]);
                let j = rng.random_range(0.0..0.15);
                let b = [
                    a[0] + j * w * rng.random_range(-1.0..1.0),
                    a[1] + j * h * rng.random_range(-1.0..1.0),
                    a[2] + j * w * rng.random_range(-1.0..1.0),
                    a[3] + j * h * rng.random_range(-1.0..1.0),
                ];
                Pred {
                    b,
                    p: random_probs(rng, c),
                }
            })
            .collect()
    };
    let a = side(rng);
    let b = side(rng);
    (c, a, b)
}

fn to_detections(preds: &[Pred]) -> Vec<Detection> {
    preds
        .iter()
        .map(|d| Detection::new(BBox::from_array(d.b).unwrap(), d.p.clone()).unwrap())
        .collect()
}

fn depf_cfg() -> FusionConfig {
    FusionConfig {
        beta: BETA,
        epsilon: EPS,
        method: FusionMethod::Depf,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// Criteria

fn depf_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut max_rel, mut fused_total, mut merged_clusters) = (0.0f64, 0, 0);
    for case in 0..1000 {
        let (_, a, b) = random_instance(&mut rng);
        let got =
            depf(&to_detections(&a), &to_detections(&b), &depf_cfg()).map_err(|e| e.to_string())?;
        let want = oracle_depf(&a, &b, BETA, EPS);
        if got.len() != want.len() {
            return Err(format!(
                "instance {case}: {} clusters, oracle has {}",
                got.len(),
                want.len()
            ));
        }
        for (g, (wb, wp, wl)) in got.iter().zip(&want) {
            if g.label != *wl {
                return Err(format!("instance {case}: label {} vs oracle {wl}", g.label));
            }
            for (x, y) in g
                .bbox
                .to_array()
                .iter()
                .zip(wb)
                .chain(g.probs.iter().zip(wp))
            {
                max_rel = max_rel.max(if *y == 0.0 { x.abs() } else { rel(*x, *y) });
            }
        }
        fused_total += want.len();
        merged_clusters += a.len() + b.len() - want.len();
    }
    let elapsed = start.elapsed();
    if max_rel > 1e-12 {
        return Err(format!("max relative deviation {max_rel:e} > 1e-12"));
    }
    if elapsed > Duration::from_secs(10) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!(
        "1000 instances, {fused_total} fused labels ({merged_clusters} merges), max rel dev {max_rel:e}, {elapsed:.2?}"
    ))
}

fn entropy_weight_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let (mut worst_ratio, mut worst_sum, mut pairs) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..1000 {
        let (_, a, b) = random_instance(&mut rng);
        let (merged, clusters) = oracle_clusters(&a, &b, BETA);
        for c in clusters {
            let members: Vec<Detection> = to_detections(
                &c.iter()
                    .map(|&k| Pred {
                        b: merged[k].b,
                        p: merged[k].p.clone(),
                    })
                    .collect::<Vec<_>>(),
            );
            let w = entropy_weights(&members, EPS).map_err(|e| e.to_string())?;
            let h: Vec<f64> = members
                .iter()
                .map(|d| shannon_entropy(&d.probs, EPS).unwrap())
                .collect();
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if i != j {
                        let expected = (h[j] + EPS) / (h[i] + EPS);
                        worst_ratio = worst_ratio.max(rel(w[i] / w[j], expected));
                        pairs += 1;
                    }
                }
            }
        }
    }
    if worst_ratio > 1e-9 || worst_sum > 1e-9 {
        return Err(format!("ratio dev {worst_ratio:e}, sum dev {worst_sum:e}"));
    }
    Ok(format!(
        "{pairs} ordered pairs, max ratio rel dev {worst_ratio:e}, max |sum-1| {worst_sum:e}"
    ))
}

fn fused_distribution_closure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let (mut worst_sum, mut labels) = (0.0f64, 0usize);
    for case in 0..1000 {
        let (_, a, b) = random_instance(&mut rng);
        let got =
            depf(&to_detections(&a), &to_detections(&b), &depf_cfg()).map_err(|e| e.to_string())?;
        let (merged, clusters) = oracle_clusters(&a, &b, BETA);
        if got.len() != clusters.len() {
            return Err(format!("instance {case}: cluster count differs"));
        }
        for (f, c) in got.iter().zip(&clusters) {
            worst_sum = worst_sum.max((f.probs.iter().sum::<f64>() - 1.0).abs());
            let coords = f.bbox.to_array();
            for j in 0..4 {
                let lo = c
                    .iter()
                    .map(|&k| merged[k].b[j])
                    .fold(f64::INFINITY, f64::min);
                let hi = c
                    .iter()
                    .map(|&k| merged[k].b[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if coords[j] < lo || coords[j] > hi {
                    return Err(format!(
                        "instance {case}: coordinate {j} = {} outside [{lo}, {hi}]",
                        coords[j]
                    ));
                }
            }
            labels += 1;
        }
    }
    if worst_sum > 1e-9 {
        return Err(format!("max |sum-1| {worst_sum:e}"));
    }
    Ok(format!(
        "{labels} fused labels inside member hulls, max |sum-1| {worst_sum:e}"
    ))
}

fn pgfa_weight_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let (mut worst_sum, mut worst_uniform, mut worst_spread, mut worst_scale) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (b, n, c) = (
            rng.random_range(1..=3),
            rng.random_range(2..=64),
            rng.random_range(1..=16),
        );
        let top_k = rng.random_range(1..=n);
        let cfg = PatchWeightConfig { tau: 0.07, top_k };
        let data: Vec<f64> = (0..b * n * c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let feats = PatchFeatureBatch::new(b, n, c, data.clone()).unwrap();
        let w = batch_patch_weights(&feats, &cfg, EPS).map_err(|e| e.to_string())?;
        for row in w.chunks_exact(n) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }

        // per-row positive rescaling
        let scaled: Vec<f64> = data
            .chunks_exact(c)
            .flat_map(|r| {
                let s = 10f64.powf(rng.random_range(-3.0..3.0));
                r.iter().map(move |v| v * s).collect::<Vec<_>>()
            })
            .collect();
        let ws = batch_patch_weights(&PatchFeatureBatch::new(b, n, c, scaled).unwrap(), &cfg, EPS)
            .unwrap();
        for (x, y) in w.iter().zip(&ws) {
            worst_scale = worst_scale.max((x - y).abs());
        }

        // identical patches: all weights equal for any top_k
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let same: Vec<f64> = (0..b * n).flat_map(|_| row.clone()).collect();
        let wu = batch_patch_weights(&PatchFeatureBatch::new(b, n, c, same).unwrap(), &cfg, EPS)
            .unwrap();
        let (lo, hi) = wu
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        worst_spread = worst_spread.max(hi - lo);
    }

    // identical patches equal 1/N at the default configuration
    let cfg = PatchWeightConfig::default();
    for n in [50, 64, 100, 256] {
        let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let same: Vec<f64> = (0..n).flat_map(|_| row.clone()).collect();
        let wu = batch_patch_weights(&PatchFeatureBatch::new(1, n, 8, same).unwrap(), &cfg, EPS)
            .unwrap();
        for v in wu {
            worst_uniform = worst_uniform.max((v - 1.0 / n as f64).abs());
        }
    }
    if worst_sum > 1e-6 || worst_uniform > 1e-9 || worst_spread > 1e-12 || worst_scale > 1e-9 {
        return Err(format!(
            "sum {worst_sum:e}, uniform {worst_uniform:e}, spread {worst_spread:e}, scale {worst_scale:e}"
        ));
    }
    Ok(format!(
        "50 batches: max |sum-1| {worst_sum:e}, rescale dev {worst_scale:e}, identical-patch spread {worst_spread:e}; \
         default top_k: max |w - 1/N| {worst_uniform:e}"
    ))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 2];
    for seed in 1..=20 {
        for (i, loss) in [GradLoss::Pgfa, GradLoss::Pifa].into_iter().enumerate() {
            let r = gradcheck::check(loss, seed, 1e-4).map_err(|e| e.to_string())?;
            worst[i] = worst[i].max(r.max_rel_error);
        }
    }
    let elapsed = start.elapsed();
    if worst.iter().any(|&w| !(w < 1e-5)) || elapsed > Duration::from_secs(30) {
        return Err(format!(
            "pgfa {:e}, pifa {:e}, {elapsed:.2?}",
            worst[0], worst[1]
        ));
    }
    Ok(format!(
        "20 seeds each: pgfa max rel err {:e}, pifa {:e}, {elapsed:.2?}",
        worst[0], worst[1]
    ))
}

fn unit(c: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; c];
    v[i] = 1.0;
    v
}

fn bank_with(k: usize, c: usize, rows: &[Vec<f64>]) -> PrototypeBank {
    PrototypeBank::from_parts(k, c, rows.concat(), vec![true; k], 0.9).unwrap()
}

fn pifa_closed_forms() -> Outcome {
    let tau = 0.07;
    let mut notes = Vec::new();
    for k in [2usize, 4, 8] {
        // instance on its own prototype, all prototypes orthogonal
        let bank = bank_with(k, k, &(0..k).map(|i| unit(k, i)).collect::<Vec<_>>());
        let inst: Vec<InstanceFeature> = (0..k)
            .map(|i| InstanceFeature {
                features: unit(k, i).iter().map(|v| 3.0 * v).collect(),
                label: i,
            })
            .collect();
        let got = pifa_loss(&inst, &bank, tau)
            .map_err(|e| e.to_string())?
            .loss;
        let want = (1.0 + (k as f64 - 1.0) * (-1.0 / tau).exp()).ln();
        if (got - want).abs() > 1e-9 {
            return Err(format!("separated K={k}: {got} vs {want}"));
        }

        // instance orthogonal to every prototype
        let c = k + 1;
        let bank = bank_with(k, c, &(0..k).map(|i| unit(c, i)).collect::<Vec<_>>());
        let inst = [InstanceFeature {
            features: unit(c, k),
            label: 0,
        }];
        let got = pifa_loss(&inst, &bank, tau)
            .map_err(|e| e.to_string())?
            .loss;
        if (got - (k as f64).ln()).abs() > 1e-6 {
            return Err(format!("orthogonal K={k}: {got} vs ln K"));
        }
        notes.push(format!("K={k} ok"));
    }

    // one initialized prototype
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut bank = PrototypeBank::new(3, 4, 0.9).unwrap();
    let mut means = BTreeMap::new();
    means.insert(
        1,
        ClassMean {
            mean: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            count: 1,
        },
    );
    bank.update(&means).unwrap();
    let inst: Vec<InstanceFeature> = (0..5)
        .map(|_| InstanceFeature {
            features: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: 1,
        })
        .collect();
    let got = pifa_loss(&inst, &bank, tau)
        .map_err(|e| e.to_string())?
        .loss;
    if got != 0.0 {
        return Err(format!("single prototype: {got} != 0"));
    }
    Ok(format!("{}, single prototype exactly 0", notes.join(", ")))
}

fn gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn ema_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    let teacher: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let student: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g0 = gap(&teacher, &student);

    let mut every = EmaState::new(teacher.clone(), 0.999, 1).unwrap();
    let mut worst = 0.0f64;
    for n in 1..=1000 {
        every.step(&student).unwrap();
        let expected = 0.999f64.powi(n) * g0;
        worst = worst.max((gap(every.teacher(), &student) - expected).abs());
    }

    let mut sched = EmaState::new(teacher, 0.999, 5).unwrap();
    for n in 1..=1000u64 {
        sched.step(&student).unwrap();
        if sched.applied() != n / 5 {
            return Err(format!(
                "after {n} calls, {} updates applied",
                sched.applied()
            ));
        }
    }
    if worst > 1e-9 {
        return Err(format!("gap deviation {worst:e}"));
    }
    Ok(format!(
        "max |gap - alpha^n gap0| {worst:e} over n<=1000, interval 5 applies floor(n/5)"
    ))
}

fn prototype_convergence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let mut notes = Vec::new();
    for mu in [0.9, 0.999] {
        let c = 5;
        let p0: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut bank = PrototypeBank::from_parts(1, c, p0.clone(), vec![true], mu).unwrap();
        let mut means = BTreeMap::new();
        means.insert(
            0,
            ClassMean {
                mean: f.clone(),
                count: 4,
            },
        );
        let g0 = gap(&p0, &f);
        let mut worst = 0.0f64;
        for t in 1..=1000 {
            bank.update(&means).unwrap();
            worst = worst.max((gap(bank.prototype(0), &f) - mu.powi(t) * g0).abs());
        }
        if worst > 1e-9 {
            return Err(format!("mu={mu}: deviation {worst:e}"));
        }
        notes.push(format!("mu={mu} max dev {worst:e}"));
    }
    Ok(notes.join(", "))
}

/// Bilinear value at feature-grid coordinates with cell centers at +0.5 and
/// edge clamping.
fn oracle_bilinear(map: &[f64], h: usize, w: usize, c: usize, y: f64, x: f64) -> f64 {
    let v = |yy: usize, xx: usize| map[(c * h + yy) * w + xx];
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x1))
        + ty * ((1.0 - tx) * v(y1, x0) + tx * v(y1, x1))
}

/// Per-channel mean over 7x7 bins, each bin averaged over uniform random
/// samples.
fn dense_pool(
    rng: &mut ChaCha8Rng,
    map: &[f64],
    (c, h, w): (usize, usize, usize),
    img: f64,
    b: [f64; 4],
    samples: usize,
) -> Vec<f64> {
    let (sx, sy) = (w as f64 / img, h as f64 / img);
    let (x1, y1) = (b[0] * sx, b[1] * sy);
    let (bw, bh) = ((b[2] - b[0]) * sx / 7.0, (b[3] - b[1]) * sy / 7.0);
    let mut out = vec![0.0; c];
    for py in 0..7 {
        for px in 0..7 {
            for _ in 0..samples {
                let y = y1 + (py as f64 + rng.random::<f64>()) * bh;
                let x = x1 + (px as f64 + rng.random::<f64>()) * bw;
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += oracle_bilinear(map, h, w, ch, y, x);
                }
            }
        }
    }
    out.iter().map(|v| v / (49 * samples) as f64).collect()
}

fn roi_align_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let (c, h, w, img) = (4, 16, 16, 128.0);
    let mut worst = 0.0f64;
    for pair in 0..100 {
        let map: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let fmap = FeatureMap::new(c, h, w, map.clone(), img, img).unwrap();
        let (bw, bh) = (rng.random_range(8.0..100.0), rng.random_range(8.0..100.0));
        let (x1, y1) = (
            rng.random_range(0.0..img - bw),
            rng.random_range(0.0..img - bh),
        );
        let b = [x1, y1, x1 + bw, y1 + bh];
        let got = pool_instance(&fmap, &BBox::from_array(b).unwrap()).map_err(|e| e.to_string())?;
        let want = dense_pool(&mut rng, &map, (c, h, w), img, b, 1000);
        let err = gap(&got, &want) / want.iter().map(|v| v * v).sum::<f64>().sqrt();
        if err > 5e-2 {
            return Err(format!("pair {pair}: relative error {err:e}"));
        }
        worst = worst.max(err);
    }
    for value in [0.0, 1.0, -2.5, 0.1, 1e6] {
        let fmap = FeatureMap::new(3, 9, 11, vec![value; 3 * 9 * 11], 100.0, 80.0).unwrap();
        for _ in 0..20 {
            let (x1, y1) = (rng.random_range(0.0..90.0), rng.random_range(0.0..70.0));
            let b = BBox::new(
                x1,
                y1,
                x1 + rng.random_range(1.0..10.0),
                y1 + rng.random_range(1.0..10.0),
            )
            .unwrap();
            let got = pool_instance(&fmap, &b).unwrap();
            if got.iter().any(|&v| v != value) {
                return Err(format!("constant {value} pooled to {got:?}"));
            }
        }
    }
    Ok(format!(
        "100 pairs, max relative error {worst:e}; constant maps exact"
    ))
}

fn fusion_ordering() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut worst = f64::INFINITY;
    for seed in 0..100 {
        let scenes =
            generate_scenes(seed, 100, &NoiseModel::default()).map_err(|e| e.to_string())?;
        let r = fusion_benchmark(&scenes, BETA, EPS).map_err(|e| e.to_string())?;
        let margin = r.depf.f1 - r.teacher.f1.max(r.vfm.f1).max(r.remove_individual.f1);
        worst = worst.min(margin);
        if margin >= 0.0 {
            wins += 1;
        }
    }
    let elapsed = start.elapsed();
    if wins < 95 || elapsed > Duration::from_secs(60) {
        return Err(format!("{wins}/100 seeds, {elapsed:.2?}"));
    }
    Ok(format!("DEPF F1 >= teacher, VFM and remove-individual on {wins}/100 seeds (worst margin {worst:+.4}), {elapsed:.2?}"))
}

fn packaged_config() -> TrainerConfig {
    TrainerConfig::from_toml(
        &fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml"))
            .unwrap(),
    )
    .unwrap()
}

fn adaptation_improvement() -> Outcome {
    let cfg = packaged_config();
    let scenes = generate_scenes(cfg.seed, cfg.num_scenes, &NoiseModel::default())
        .map_err(|e| e.to_string())?;
    let report = run_adaptation(&cfg, &scenes).map_err(|e| e.to_string())?;
    let s = &report.summary;
    if !(s.last.fused.f1 > s.initial_best_single_f1) {
        return Err(format!(
            "final fused F1 {:.4} vs epoch-0 best single {:.4}",
            s.last.fused.f1, s.initial_best_single_f1
        ));
    }

    let mut plain = cfg.clone();
    plain.lambda = 0.0;
    let full = trajectory(&plain, &scenes, Mode::Full).map_err(|e| e.to_string())?;
    let reference = reference_trajectory(&plain, &scenes).map_err(|e| e.to_string())?;
    let bits =
        |t: &Vec<Vec<f64>>| -> Vec<u64> { t.iter().flatten().map(|v| v.to_bits()).collect() };
    if full.is_empty() || bits(&full) != bits(&reference) {
        return Err("lambda=0 trajectory differs from the regularizer-free reference".into());
    }
    Ok(format!(
        "final fused F1 {:.4} > epoch-0 best single {:.4}; lambda=0 matches reference over {} steps",
        s.last.fused.f1,
        s.initial_best_single_f1,
        full.len()
    ))
}

fn io_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1012);

    for i in 0..50 {
        let ndim = rng.random_range(0..=4);
        let dims: Vec<usize> = (0..ndim).map(|_| rng.random_range(0..=5)).collect();
        let len = dims.iter().product::<usize>();
        let specials = [
            0.0f32,
            -0.0,
            f32::MIN_POSITIVE,
            f32::MAX,
            f32::INFINITY,
            f32::NAN,
            1e-45,
        ];
        let data: Vec<f32> = (0..len)
            .map(|_| {
                if rng.random_range(0..5) == 0 {
                    *specials.choose(&mut rng).unwrap()
                } else {
                    f32::from_bits(rng.random::<u32>() & 0xbfff_ffff)
                }
            })
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("t{i}.ftns"));
        write_tensor(&t, &path).map_err(|e| e.to_string())?;
        let back = read_tensor(&path).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if back.dims != t.dims || bits(&back) != bits(&t) {
            return Err(format!("tensor {i} not bit-exact"));
        }
    }

    let mut worst = 0.0f64;
    for i in 0..20 {
        let (k, a, _) = random_instance(&mut rng);
        let file = DetectionFile {
            num_classes: k,
            class_names: (i % 2 == 0).then(|| (0..k).map(|c| format!("class{c}")).collect()),
            images: vec![ImageDetections {
                image_id: format!("img{i}"),
                detections: to_detections(&a),
            }],
        };
        let path = dir.path().join(format!("d{i}.json"));
        write_detections(&path, &file).map_err(|e| e.to_string())?;
        let text = fs::read_to_string(&path).unwrap();
        let back =
            parse_detections(&text, &path, ReadOptions::default()).map_err(|e| e.to_string())?;
        if back.num_classes != k || back.class_names != file.class_names || back.images.len() != 1 {
            return Err(format!("detection file {i}: header changed"));
        }
        for (x, y) in back.images[0]
            .detections
            .iter()
            .zip(&file.images[0].detections)
        {
            for (u, v) in x
                .bbox
                .to_array()
                .iter()
                .zip(y.bbox.to_array())
                .chain(x.probs.iter().zip(y.probs.iter().copied()))
            {
                worst = worst.max((u - v).abs());
            }
        }
        if back.images[0].detections.len() != file.images[0].detections.len() {
            return Err(format!("detection file {i}: detection count changed"));
        }
    }
    if worst > 1e-9 {
        return Err(format!("detection round-trip deviation {worst:e}"));
    }

    let exit_notes = malformed_exit_codes(dir.path())?;
    Ok(format!(
        "50 tensors bit-exact, 20 detection files max dev {worst:e}; {exit_notes}"
    ))
}

fn malformed_exit_codes(dir: &Path) -> Result<String, String> {
    let good = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/two_source/teacher.json");
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    };
    let bad_json = write("bad.json", b"{\"num_classes\": 2, \"images\": [");
    let bad_sum = write(
        "sum.json",
        br#"{"num_classes": 2, "images": [{"image_id": "x", "detections": [{"box": [0, 0, 1, 1], "probs": [0.6, 0.2]}]}]}"#,
    );
    let unknown = write(
        "unknown.json",
        br#"{"num_classes": 2, "images": [], "extra": 1}"#,
    );
    let mut truncated = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap().encode();
    truncated.truncate(truncated.len() - 4);
    let truncated = write("short.ftns", &truncated);
    let mut magic = Tensor::new(vec![2], vec![1.0; 2]).unwrap().encode();
    magic[0] = b'X';
    let magic = write("magic.ftns", &magic);
    let missing = dir.join("does-not-exist.json");
    let out = dir.join("out.json");
    let outt = dir.join("out.ftns");

    let fuse = |b: &Path| {
        vec![
            "fuse".into(),
            "--source-a".into(),
            good.display().to_string(),
            "--source-b".into(),
            b.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let weights = |f: &Path| {
        vec![
            "pgfa-weights".into(),
            "--features".into(),
            f.display().to_string(),
            "--out".into(),
            outt.display().to_string(),
        ]
    };
    let cases: Vec<(&str, Vec<String>, i32)> = vec![
        ("truncated JSON", fuse(&bad_json), 2),
        ("probs sum 0.8", fuse(&bad_sum), 2),
        ("unknown field", fuse(&unknown), 2),
        ("missing file", fuse(&missing), 1),
        ("short tensor payload", weights(&truncated), 2),
        ("bad tensor magic", weights(&magic), 2),
        ("missing tensor", weights(&missing), 1),
        ("unknown flag", vec!["fuse".into(), "--bogus".into()], 2),
    ];
    for (name, args, want) in &cases {
        let o = Command::new(env!("CARGO_BIN_EXE_sfodkit"))
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        let code = o.status.code().unwrap_or(-1);
        if code != *want {
            return Err(format!("{name}: exit {code}, expected {want}"));
        }
        if o.stderr.is_empty() {
            return Err(format!("{name}: no diagnostic on stderr"));
        }
    }
    let ok = Command::new(env!("CARGO_BIN_EXE_sfodkit"))
        .args(fuse(&good))
        .output()
        .map_err(|e| e.to_string())?
        .status
        .code();
    if ok != Some(0) {
        return Err(format!("valid fuse exited {ok:?}"));
    }
    Ok(format!(
        "{} malformed-input exit codes as documented",
        cases.len()
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("DEPF oracle equivalence", depf_oracle_equivalence),
        ("entropy-weight law", entropy_weight_law),
        ("fused-distribution closure", fused_distribution_closure),
        (
            "PGFA weight normalization and symmetry",
            pgfa_weight_properties,
        ),
        ("gradient checks", gradient_checks),
        ("closed-form PIFA losses", pifa_closed_forms),
        ("EMA geometry", ema_geometry),
        ("prototype EMA convergence", prototype_convergence),
        ("RoIAlign oracle", roi_align_oracle),
        ("fusion-strategy ordering", fusion_ordering),
        ("toy adaptation improvement", adaptation_improvement),
        ("I/O round-trips", io_round_trips),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let line = match check() {
            Ok(detail) => format!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed.push(i + 1);
                format!("FAIL {:>2} {name}: {detail}", i + 1)
            }
        };
        writeln!(err, "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
