//! Toy mean-teacher adaptation on synthetic scenes.
//!
//! The detector is a linear scorer on pooled instance features: an
//! adapter `A` (`C x C`) followed by class weights `W` (`K x C`) and a bias
//! `b`, so `logits = W A x + b`. Parameters live in one flat vector laid out
//! as `[A, W, b]`, row-major.
//!
//! Every epoch the teacher scores its proposals, the result is fused with
//! the VFM detections, and the student descends
//! `L_det + lambda * (L_pgfa + L_pifa)` on minibatches of scenes. The
//! teacher follows the student through [`EmaState`].

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ema::{EmaState, DEFAULT_ALPHA, DEFAULT_INTERVAL};
use crate::error::{Error, Result};
use crate::fusion::{
    argmax, depf, nms, remove_individual, wbf, Detection, FusedLabel, FusionConfig, FusionMethod,
    DEFAULT_BETA, DEFAULT_EPSILON,
};
use crate::pgfa::{
    batch_patch_weights, pgfa_loss_with_weights, PatchFeatureBatch, PatchWeightConfig,
    DEFAULT_TOP_K,
};
use crate::pifa::{
    batch_class_means, pifa_loss, pool_instance, InstanceFeature, PrototypeBank, DEFAULT_MOMENTUM,
};
use crate::synthetic::{
    detection_counts, match_counts, patch_rows, Counts, SyntheticScene, CHANNELS, NUM_CLASSES,
    PATCHES,
};

/// Logit scale of the source-trained scorer.
pub const SOURCE_SCALE: f64 = 4.0;

/// `L_det + lambda * (L_pgfa + L_pifa)`.
pub fn total_loss(det_loss: f64, pgfa: f64, pifa: f64, lambda: f64) -> f64 {
    det_loss + lambda * (pgfa + pifa)
}

pub fn num_params(k: usize, c: usize) -> usize {
    c * c + k * c + k
}

/// Identity adapter, `W = scale * [I | 0]`, zero bias: the scorer a source
/// domain without the class-0 shift would produce.
pub fn source_params(k: usize, c: usize, scale: f64) -> Vec<f64> {
    let mut p = vec![0.0; num_params(k, c)];
    for i in 0..c {
        p[i * c + i] = 1.0;
    }
    for i in 0..k.min(c) {
        p[c * c + i * c + i] = scale;
    }
    p
}

fn matvec(m: &[f64], x: &[f64]) -> Vec<f64> {
    m.chunks_exact(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `A x`.
pub fn embed(params: &[f64], c: usize, x: &[f64]) -> Vec<f64> {
    matvec(&params[..c * c], x)
}

pub fn logits(params: &[f64], k: usize, c: usize, x: &[f64]) -> Vec<f64> {
    let z = embed(params, c, x);
    let w = &params[c * c..c * c + k * c];
    let b = &params[c * c + k * c..];
    matvec(w, &z).iter().zip(b).map(|(l, bi)| l + bi).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

pub fn class_probs(params: &[f64], k: usize, c: usize, x: &[f64]) -> Vec<f64> {
    softmax(&logits(params, k, c, x))
}

/// Mean softmax cross-entropy over `instances` and its gradient with
/// respect to every parameter. An empty set has loss 0.
pub fn det_loss(
    params: &[f64],
    k: usize,
    c: usize,
    instances: &[InstanceFeature],
) -> Result<(f64, Vec<f64>)> {
    if params.len() != num_params(k, c) {
        return Err(Error::invalid(format!(
            "{} parameters, expected {}",
            params.len(),
            num_params(k, c)
        )));
    }
    let mut grad = vec![0.0; params.len()];
    if instances.is_empty() {
        return Ok((0.0, grad));
    }
    let w = &params[c * c..c * c + k * c];
    let mut loss = 0.0;
    for inst in instances {
        if inst.features.len() != c || inst.label >= k {
            return Err(Error::invalid("instance does not match the scorer shape"));
        }
        let z = embed(params, c, &inst.features);
        let l: Vec<f64> = matvec(w, &z)
            .iter()
            .zip(&params[c * c + k * c..])
            .map(|(a, b)| a + b)
            .collect();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = l.iter().map(|v| (v - max).exp()).sum();
        loss += total.ln() + max - l[inst.label];

        let mut dl: Vec<f64> = l.iter().map(|v| (v - max).exp() / total).collect();
        dl[inst.label] -= 1.0;
        let mut dz = vec![0.0; c];
        for (ki, d) in dl.iter().enumerate() {
            grad[c * c + k * c + ki] += d;
            for j in 0..c {
                grad[c * c + ki * c + j] += d * z[j];
                dz[j] += d * w[ki * c + j];
            }
        }
        for (i, d) in dz.iter().enumerate() {
            for j in 0..c {
                grad[i * c + j] += d * inst.features[j];
            }
        }
    }
    let scale = 1.0 / instances.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Training configuration, read from TOML. Missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub seed: u64,
    pub num_scenes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub tau: f64,
    pub top_k: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub mu: f64,
    pub alpha: f64,
    pub ema_interval: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scenes: 30,
            epochs: 20,
            batch_size: 2,
            lambda: 1.0,
            learning_rate: 0.5,
            tau: crate::pgfa::DEFAULT_TAU,
            top_k: DEFAULT_TOP_K,
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
            mu: DEFAULT_MOMENTUM,
            alpha: DEFAULT_ALPHA,
            ema_interval: DEFAULT_INTERVAL,
        }
    }
}

impl TrainerConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            location: e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_default(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse {
                location, message, ..
            } => Error::Parse {
                path: path.to_path_buf(),
                location,
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!(
                "lambda={} must be finite and non-negative",
                self.lambda
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate={} must be positive",
                self.learning_rate
            ));
        }
        if self.num_scenes == 0 {
            return fail("num_scenes must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return fail(format!("epsilon={} must be positive", self.epsilon));
        }
        self.patch_config().validate(PATCHES)?;
        self.fusion_config().validate()?;
        crate::pifa::PrototypeBank::new(NUM_CLASSES, CHANNELS, self.mu)?;
        EmaState::new(Vec::new(), self.alpha, self.ema_interval)?;
        Ok(())
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            beta: self.beta,
            epsilon: self.epsilon,
            method: FusionMethod::Depf,
        }
    }

    pub fn patch_config(&self) -> PatchWeightConfig {
        PatchWeightConfig {
            tau: self.tau,
            top_k: self.top_k,
        }
    }
}

/// Pseudo-label evaluation against hidden ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

impl From<Counts> for Metrics {
    fn from(counts: Counts) -> Self {
        Self {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fused: Metrics,
    pub teacher: Metrics,
    pub vfm: Metrics,
    /// Teacher argmax accuracy on the ground-truth boxes.
    pub teacher_accuracy: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub det: f64,
    pub pgfa: f64,
    pub pifa: f64,
    pub total: f64,
}

/// One line of the per-epoch report. Epoch 0 evaluates the source model
/// and carries no losses; epoch `e` evaluates the teacher after `e`
/// epochs of training, with losses averaged over that epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: Option<StepLosses>,
    pub ema_updates: u64,
    #[serde(flatten)]
    pub eval: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs: usize,
    pub num_scenes: usize,
    pub initial: Evaluation,
    #[serde(rename = "final")]
    pub last: Evaluation,
    pub initial_best_single_f1: f64,
    /// Final fused F1 strictly above the better single source at epoch 0.
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: TrainerConfig,
    pub records: Vec<EpochRecord>,
    pub summary: Summary,
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
}

impl Report {
    /// Writes `epochs.jsonl` (one record per line) and `summary.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut lines = String::new();
        for r in &self.records {
            lines.push_str(&serde_json::to_string(r).expect("records serialize"));
            lines.push('\n');
        }
        let path = dir.join("epochs.jsonl");
        fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        let summary = serde_json::json!({
            "config": self.config,
            "summary": self.summary,
            "student": self.student,
            "teacher": self.teacher,
        });
        let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        text.push('\n');
        let path = dir.join("summary.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Whether a step includes the alignment regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Full,
    /// Detection loss only. Prototypes are never touched.
    DetectionOnly,
}

struct SceneCache {
    vfm_rows: Vec<f64>,
    strong_rows: Vec<f64>,
    pgfa_weights: Vec<f64>,
    proposal_feats: Vec<Vec<f64>>,
    object_feats: Vec<Vec<f64>>,
}

struct PseudoLabel {
    label: usize,
    student_feat: Vec<f64>,
    vfm_feat: Vec<f64>,
}

pub struct Trainer<'a> {
    config: TrainerConfig,
    mode: Mode,
    scenes: &'a [SyntheticScene],
    cache: Vec<SceneCache>,
    student: Vec<f64>,
    ema: EmaState,
    bank: PrototypeBank,
    rng: ChaCha8Rng,
    pseudo: Vec<Vec<PseudoLabel>>,
}

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4553;

impl<'a> Trainer<'a> {
    pub fn new(config: TrainerConfig, scenes: &'a [SyntheticScene], mode: Mode) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::invalid("no scenes to train on"));
        }
        let patch_cfg = config.patch_config();
        let cache = scenes
            .iter()
            .map(|s| {
                let vfm_rows = patch_rows(&s.vfm_map);
                let vfm = PatchFeatureBatch::new(1, PATCHES, CHANNELS, vfm_rows.clone())?;
                Ok(SceneCache {
                    pgfa_weights: batch_patch_weights(&vfm, &patch_cfg, config.epsilon)?,
                    vfm_rows,
                    strong_rows: patch_rows(&s.strong_view),
                    proposal_feats: s
                        .teacher_boxes
                        .iter()
                        .map(|b| pool_instance(&s.weak_view, b))
                        .collect::<Result<_>>()?,
                    object_feats: s
                        .objects
                        .iter()
                        .map(|o| pool_instance(&s.weak_view, &o.bbox))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let student = source_params(NUM_CLASSES, CHANNELS, SOURCE_SCALE);
        Ok(Self {
            ema: EmaState::new(student.clone(), config.alpha, config.ema_interval)?,
            bank: PrototypeBank::new(NUM_CLASSES, CHANNELS, config.mu)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT),
            pseudo: Vec::new(),
            student,
            cache,
            scenes,
            mode,
            config,
        })
    }

    pub fn student(&self) -> &[f64] {
        &self.student
    }

    pub fn teacher(&self) -> &[f64] {
        self.ema.teacher()
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    /// Teacher detections per scene: proposals scored by the current teacher.
    pub fn teacher_detections(&self) -> Result<Vec<Vec<Detection>>> {
        self.scenes
            .iter()
            .zip(&self.cache)
            .map(|(s, c)| {
                s.teacher_boxes
                    .iter()
                    .zip(&c.proposal_feats)
                    .map(|(b, x)| {
                        Detection::new(*b, class_probs(self.teacher(), NUM_CLASSES, CHANNELS, x))
                    })
                    .collect()
            })
            .collect()
    }

    fn fused_labels(&self) -> Result<Vec<Vec<FusedLabel>>> {
        let cfg = self.config.fusion_config();
        self.teacher_detections()?
            .iter()
            .zip(self.scenes)
            .map(|(t, s)| depf(t, &s.vfm_detections, &cfg))
            .collect()
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        let teacher = self.teacher_detections()?;
        let fused = self.fused_labels()?;
        let (mut ct, mut cv, mut cf) = (Counts::default(), Counts::default(), Counts::default());
        let (mut correct, mut total) = (0usize, 0usize);
        for (i, s) in self.scenes.iter().enumerate() {
            ct += detection_counts(&teacher[i], &s.objects);
            cv += detection_counts(&s.vfm_detections, &s.objects);
            let preds: Vec<_> = fused[i]
                .iter()
                .map(|f| (f.bbox, f.label, f.confidence()))
                .collect();
            cf += match_counts(&preds, &s.objects);
            for (o, x) in s.objects.iter().zip(&self.cache[i].object_feats) {
                total += 1;
                if argmax(&class_probs(self.teacher(), NUM_CLASSES, CHANNELS, x)) == o.class {
                    correct += 1;
                }
            }
        }
        Ok(Evaluation {
            fused: cf.into(),
            teacher: ct.into(),
            vfm: cv.into(),
            teacher_accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
        })
    }

    /// Re-fuses teacher and VFM detections and pools features at the fused boxes.
    pub fn refresh_pseudo_labels(&mut self) -> Result<()> {
        let fused = self.fused_labels()?;
        self.pseudo = fused
            .iter()
            .zip(self.scenes)
            .map(|(labels, s)| {
                labels
                    .iter()
                    .map(|f| {
                        Ok(PseudoLabel {
                            label: f.label,
                            student_feat: pool_instance(&s.strong_view, &f.bbox)?,
                            vfm_feat: pool_instance(&s.vfm_map, &f.bbox)?,
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// One gradient step on the scenes in `batch`, followed by an EMA tick.
    pub fn step(&mut self, batch: &[usize]) -> Result<StepLosses> {
        let (k, c) = (NUM_CLASSES, CHANNELS);
        if self.pseudo.len() != self.scenes.len() {
            self.refresh_pseudo_labels()?;
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.scenes.len()) {
            return Err(Error::invalid(format!("scene index {bad} out of range")));
        }
        let labels: Vec<&PseudoLabel> = batch.iter().flat_map(|&i| &self.pseudo[i]).collect();
        let instances: Vec<InstanceFeature> = labels
            .iter()
            .map(|p| InstanceFeature {
                features: p.student_feat.clone(),
                label: p.label,
            })
            .collect();
        let (det, mut grad) = det_loss(&self.student, k, c, &instances)?;

        let (mut pgfa, mut pifa) = (0.0, 0.0);
        if self.mode == Mode::Full && !batch.is_empty() {
            let mut reg = vec![0.0; grad.len()];
            let adapter = &self.student[..c * c];

            let mut vfm = Vec::with_capacity(batch.len() * PATCHES * c);
            let mut rows = Vec::with_capacity(vfm.capacity());
            let mut weights = Vec::with_capacity(batch.len() * PATCHES);
            let mut inputs: Vec<&[f64]> = Vec::with_capacity(batch.len() * PATCHES);
            for &i in batch {
                let sc = &self.cache[i];
                vfm.extend_from_slice(&sc.vfm_rows);
                weights.extend_from_slice(&sc.pgfa_weights);
                for x in sc.strong_rows.chunks_exact(c) {
                    rows.extend(matvec(adapter, x));
                    inputs.push(x);
                }
            }
            let vfm = PatchFeatureBatch::new(batch.len(), PATCHES, c, vfm)?;
            let rows = PatchFeatureBatch::new(batch.len(), PATCHES, c, rows)?;
            let out = pgfa_loss_with_weights(&vfm, &rows, &weights)?;
            pgfa = out.loss;
            for (g, x) in out.grad_student.chunks_exact(c).zip(&inputs) {
                outer_add(&mut reg[..c * c], g, x);
            }

            if !labels.is_empty() {
                let targets: Vec<InstanceFeature> = labels
                    .iter()
                    .map(|p| InstanceFeature {
                        features: p.vfm_feat.clone(),
                        label: p.label,
                    })
                    .collect();
                self.bank.update(&batch_class_means(&targets)?)?;
                let embedded: Vec<InstanceFeature> = instances
                    .iter()
                    .map(|inst| InstanceFeature {
                        features: matvec(adapter, &inst.features),
                        label: inst.label,
                    })
                    .collect();
                let out = pifa_loss(&embedded, &self.bank, self.config.tau)?;
                pifa = out.loss;
                for (g, inst) in out.grad_instances.iter().zip(&instances) {
                    outer_add(&mut reg[..c * c], g, &inst.features);
                }
            }
            for (g, r) in grad.iter_mut().zip(&reg) {
                *g += self.config.lambda * r;
            }
        }

        for (p, g) in self.student.iter_mut().zip(&grad) {
            *p -= self.config.learning_rate * g;
        }
        self.ema.step(&self.student)?;
        Ok(StepLosses {
            det,
            pgfa,
            pifa,
            total: total_loss(det, pgfa, pifa, self.config.lambda),
        })
    }

    /// Refreshes pseudo-labels, then steps through the scenes in shuffled
    /// minibatches. `on_step` sees the student after every step.
    pub fn train_epoch(&mut self, mut on_step: impl FnMut(&[f64])) -> Result<StepLosses> {
        self.refresh_pseudo_labels()?;
        let mut order: Vec<usize> = (0..self.scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = StepLosses::default();
        let mut steps = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let l = self.step(batch)?;
            on_step(&self.student);
            sum.det += l.det;
            sum.pgfa += l.pgfa;
            sum.pifa += l.pifa;
            sum.total += l.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        Ok(StepLosses {
            det: sum.det / n,
            pgfa: sum.pgfa / n,
            pifa: sum.pifa / n,
            total: sum.total / n,
        })
    }
}

/// `m += g x^T` for an `m` of shape `g.len() x x.len()`.
fn outer_add(m: &mut [f64], g: &[f64], x: &[f64]) {
    for (row, gi) in m.chunks_exact_mut(x.len()).zip(g) {
        for (v, xj) in row.iter_mut().zip(x) {
            *v += gi * xj;
        }
    }
}

/// Runs the full adaptation loop and evaluates after every epoch.
pub fn run_adaptation(config: &TrainerConfig, scenes: &[SyntheticScene]) -> Result<Report> {
    let mut trainer = Trainer::new(config.clone(), scenes, Mode::Full)?;
    let initial = trainer.evaluate()?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        losses: None,
        ema_updates: 0,
        eval: initial.clone(),
    }];
    for epoch in 1..=config.epochs {
        let losses = trainer.train_epoch(|_| {})?;
        records.push(EpochRecord {
            epoch,
            losses: Some(losses),
            ema_updates: trainer.ema().applied(),
            eval: trainer.evaluate()?,
        });
    }
    let last = records.last().expect("epoch 0 record").eval.clone();
    let best_single = initial.teacher.f1.max(initial.vfm.f1);
    Ok(Report {
        config: config.clone(),
        summary: Summary {
            epochs: config.epochs,
            num_scenes: scenes.len(),
            improved: last.fused.f1 > best_single,
            initial_best_single_f1: best_single,
            initial,
            last,
        },
        records,
        student: trainer.student().to_vec(),
        teacher: trainer.teacher().to_vec(),
    })
}

/// Student parameters after every step of a detection-loss-only run with
/// the same data, shuffling and EMA schedule as [`run_adaptation`].
pub fn reference_trajectory(
    config: &TrainerConfig,
    scenes: &[SyntheticScene],
) -> Result<Vec<Vec<f64>>> {
    trajectory(config, scenes, Mode::DetectionOnly)
}

/// Student parameters after every step of a run in the given mode.
pub fn trajectory(
    config: &TrainerConfig,
    scenes: &[SyntheticScene],
    mode: Mode,
) -> Result<Vec<Vec<f64>>> {
    let mut trainer = Trainer::new(config.clone(), scenes, mode)?;
    let mut out = Vec::new();
    for _ in 0..config.epochs {
        trainer.train_epoch(|p| out.push(p.to_vec()))?;
    }
    Ok(out)
}

/// Pseudo-label quality of every fusion strategy on source-model teacher
/// detections and VFM detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionBenchmark {
    pub teacher: Metrics,
    pub vfm: Metrics,
    pub depf: Metrics,
    pub remove_individual: Metrics,
    pub nms: Metrics,
    pub wbf: Metrics,
}

pub fn fusion_benchmark(
    scenes: &[SyntheticScene],
    beta: f64,
    epsilon: f64,
) -> Result<FusionBenchmark> {
    let source = source_params(NUM_CLASSES, CHANNELS, SOURCE_SCALE);
    let cfg = FusionConfig {
        beta,
        epsilon,
        method: FusionMethod::Depf,
    };
    let fused_counts = |labels: &[FusedLabel], s: &SyntheticScene| {
        let preds: Vec<_> = labels
            .iter()
            .map(|f| (f.bbox, f.label, f.confidence()))
            .collect();
        match_counts(&preds, &s.objects)
    };
    let mut c = [Counts::default(); 6];
    for s in scenes {
        let teacher: Vec<Detection> = s
            .teacher_boxes
            .iter()
            .map(|b| {
                Detection::new(
                    *b,
                    class_probs(
                        &source,
                        NUM_CLASSES,
                        CHANNELS,
                        &pool_instance(&s.weak_view, b)?,
                    ),
                )
            })
            .collect::<Result<_>>()?;
        let vfm = &s.vfm_detections;
        c[0] += detection_counts(&teacher, &s.objects);
        c[1] += detection_counts(vfm, &s.objects);
        c[2] += fused_counts(&depf(&teacher, vfm, &cfg)?, s);
        c[3] += fused_counts(&remove_individual(&teacher, vfm, beta, epsilon)?, s);
        let union: Vec<Detection> = teacher.iter().chain(vfm).cloned().collect();
        c[4] += detection_counts(&nms(&union, beta)?, &s.objects);
        c[5] += fused_counts(&wbf(&teacher, vfm, beta)?, s);
    }
    Ok(FusionBenchmark {
        teacher: c[0].into(),
        vfm: c[1].into(),
        depf: c[2].into(),
        remove_individual: c[3].into(),
        nms: c[4].into(),
        wbf: c[5].into(),
    })
}
