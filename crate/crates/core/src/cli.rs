//! The `sfodkit` command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime failure (I/O, or a gradient
//! check above tolerance), 2 on usage or validation errors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use crate::ema::{EmaState, DEFAULT_ALPHA, DEFAULT_INTERVAL};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse_sources, Detection, FusionConfig, FusionMethod, DEFAULT_BETA, DEFAULT_EPSILON,
};
use crate::gradcheck::{self, GradLoss, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::io::{
    read_detections, read_prototype_bank, read_tensor, write_detections, write_ema_state,
    write_fused, write_tensor, DetectionFile, FusedImage, ImageDetections, ReadOptions, Tensor,
};
use crate::pgfa::{
    batch_patch_weights, pgfa_loss, PatchFeatureBatch, PatchWeightConfig, DEFAULT_TOP_K,
};
use crate::pifa::{pifa_loss, InstanceFeature, DEFAULT_MOMENTUM};
use crate::selftrain::{
    class_probs, run_adaptation, source_params, total_loss, TrainerConfig, SOURCE_SCALE,
};
use crate::synthetic::{
    generate_scenes, patch_rows, NoiseModel, CHANNELS, GRID, NUM_CLASSES, PATCHES,
};

/// The packaged self-training configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SFODKIT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "sfodkit",
    version,
    about = "Pseudo-label fusion and feature alignment toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse two detection files into pseudo-labels.
    Fuse(FuseArgs),
    /// Compute per-patch alignment weights for a B x N x C feature tensor.
    PgfaWeights(PgfaWeightsArgs),
    /// Evaluate an alignment loss or the total training loss.
    Loss(LossArgs),
    /// Compare analytic loss gradients with central differences.
    GradCheck(GradCheckArgs),
    /// Simulate the teacher EMA against a constant student.
    EmaSim(EmaSimArgs),
    /// Run the toy self-training loop on synthetic scenes.
    Selftrain(SelftrainArgs),
    /// Write a synthetic scene set as detection and tensor files.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Depf,
    Nms,
    Wbf,
    Ri,
}

impl From<MethodArg> for FusionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Depf => FusionMethod::Depf,
            MethodArg::Nms => FusionMethod::Nms,
            MethodArg::Wbf => FusionMethod::Wbf,
            MethodArg::Ri => FusionMethod::Ri,
        }
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long, value_enum, default_value = "depf")]
    pub method: MethodArg,
    /// IoU threshold for clustering, and for suppression with nms/wbf.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long)]
    pub source_a: PathBuf,
    #[arg(long)]
    pub source_b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rescale probability vectors that do not sum to 1 instead of rejecting them.
    #[arg(long)]
    pub renormalize: bool,
    /// Drop input detections whose top probability is below this value.
    #[arg(long, default_value_t = 0.0)]
    pub min_score: f64,
}

#[derive(Debug, Args)]
pub struct PgfaWeightsArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = crate::pgfa::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub topk: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossKind {
    Pgfa,
    Pifa,
    Total,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long, value_enum)]
    pub kind: LossKind,
    /// pgfa: VFM features, B x N x C.
    #[arg(long)]
    pub vfm: Option<PathBuf>,
    /// pgfa: student features, B x N x C.
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// pifa: instance features, M x C.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// pifa: instance class ids, length M.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// pifa: prototypes, K x C.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    /// pifa: initialized-prototype mask, length K (default: all initialized).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Softmax temperature (pgfa weights, pifa logits).
    #[arg(long, default_value_t = crate::pgfa::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub topk: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// total: detection loss.
    #[arg(long)]
    pub det: Option<f64>,
    /// total: pgfa loss.
    #[arg(long)]
    pub pgfa: Option<f64>,
    /// total: pifa loss.
    #[arg(long)]
    pub pifa: Option<f64>,
    /// total: regularizer weight.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Write the gradient with respect to the student or instance features.
    #[arg(long)]
    pub grad_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GradLossArg {
    Pgfa,
    Pifa,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, value_enum)]
    pub loss: GradLossArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub h: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct EmaSimArgs {
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_INTERVAL)]
    pub interval: u64,
    /// Number of step calls.
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    /// Initial value of every teacher parameter.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub teacher_init: f64,
    /// Constant value of every student parameter.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub student: f64,
    /// Directory for the final EMA state (ema_params.ftns, ema_state.json).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftrainArgs {
    /// TOML configuration (default: the packaged configuration).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Regularizer weight, overriding the configuration [packaged: 1]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Prototype momentum, overriding the configuration [packaged: 0.9]
    #[arg(long)]
    pub mu: Option<f64>,
    /// Teacher EMA decay, overriding the configuration [packaged: 0.999]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Steps between EMA updates, overriding the configuration [packaged: 5]
    #[arg(long)]
    pub ema_interval: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub scenes: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 1,
        _ => 2,
    }
}

/// Parses `SFODKIT_THREADS`; `None` when unset.
pub fn thread_limit(value: Option<&str>) -> Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::invalid(format!(
                "{THREADS_ENV}={v:?} must be a positive integer"
            ))),
        },
    }
}

/// Runs a parsed command inside a thread pool sized by `SFODKIT_THREADS`.
pub fn run(cli: Cli) -> ExitCode {
    let result = thread_limit(std::env::var(THREADS_ENV).ok().as_deref()).and_then(|threads| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
        pool.install(|| dispatch(cli.command))
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Fuse(a) => fuse(a),
        Command::PgfaWeights(a) => pgfa_weights(a),
        Command::Loss(a) => loss(a),
        Command::GradCheck(a) => grad_check(a),
        Command::EmaSim(a) => ema_sim(a),
        Command::Selftrain(a) => selftrain(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
    }
}

fn filter_scores(file: &mut DetectionFile, min_score: f64, path: &Path) {
    if min_score <= 0.0 {
        return;
    }
    let mut dropped = 0;
    for img in &mut file.images {
        let before = img.detections.len();
        img.detections.retain(|d| d.confidence() >= min_score);
        dropped += before - img.detections.len();
    }
    info!(
        "{}: dropped {dropped} detections below score {min_score}",
        path.display()
    );
}

fn fuse(a: FuseArgs) -> Result<u8> {
    let cfg = FusionConfig {
        beta: a.beta,
        epsilon: a.epsilon,
        method: a.method.into(),
    };
    cfg.validate()?;
    if !(0.0..=1.0).contains(&a.min_score) {
        return Err(Error::invalid(format!(
            "min-score={} must lie in [0, 1]",
            a.min_score
        )));
    }
    let opts = ReadOptions {
        renormalize: a.renormalize,
    };
    let mut fa = read_detections(&a.source_a, opts)?;
    let mut fb = read_detections(&a.source_b, opts)?;
    if fa.num_classes != fb.num_classes {
        return Err(Error::invalid(format!(
            "source A has {} classes, source B has {}",
            fa.num_classes, fb.num_classes
        )));
    }
    filter_scores(&mut fa, a.min_score, &a.source_a);
    filter_scores(&mut fb, a.min_score, &a.source_b);

    // images in A's order, then images only B has
    let mut ids: Vec<&str> = fa.images.iter().map(|i| i.image_id.as_str()).collect();
    let in_a: HashMap<&str, &ImageDetections> =
        fa.images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let in_b: HashMap<&str, &ImageDetections> =
        fb.images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    if in_a.len() != fa.images.len() || in_b.len() != fb.images.len() {
        return Err(Error::invalid("duplicate image_id within a source file"));
    }
    ids.extend(
        fb.images
            .iter()
            .map(|i| i.image_id.as_str())
            .filter(|id| !in_a.contains_key(id)),
    );

    let empty: Vec<Detection> = Vec::new();
    let dets = |m: &HashMap<&str, &ImageDetections>, id: &str| -> Vec<Detection> {
        m.get(id)
            .map_or_else(|| empty.clone(), |i| i.detections.clone())
    };
    let outcomes = ids
        .par_iter()
        .map(|id| fuse_sources(&dets(&in_a, id), &dets(&in_b, id), &cfg))
        .collect::<Result<Vec<_>>>()?;

    let (mut clusters, mut fused) = (0, 0);
    let mut images = Vec::with_capacity(ids.len());
    for (id, o) in ids.iter().zip(outcomes) {
        println!("{id}: clusters={} fused={}", o.clusters, o.fused.len());
        clusters += o.clusters;
        fused += o.fused.len();
        images.push(FusedImage {
            image_id: id.to_string(),
            labels: o.fused,
        });
    }
    println!(
        "total: images={} clusters={clusters} fused={fused}",
        images.len()
    );
    let names = fa.class_names.as_deref().or(fb.class_names.as_deref());
    write_fused(&a.out, &images, fa.num_classes, names)?;
    Ok(0)
}

fn patch_batch(tensor: Tensor, what: &str) -> Result<PatchFeatureBatch> {
    let [b, n, c] = tensor.dims[..] else {
        return Err(Error::invalid(format!(
            "{what} tensor must be B x N x C, got shape {:?}",
            tensor.dims
        )));
    };
    PatchFeatureBatch::new(b, n, c, tensor.to_f64())
}

fn pgfa_weights(a: PgfaWeightsArgs) -> Result<u8> {
    let feats = patch_batch(read_tensor(&a.features)?, "features")?;
    let cfg = PatchWeightConfig {
        tau: a.tau,
        top_k: a.topk,
    };
    let w = batch_patch_weights(&feats, &cfg, a.epsilon)?;
    for (b, row) in w.chunks_exact(feats.patches()).enumerate() {
        println!("image {b}: weight sum {:?}", row.iter().sum::<f64>());
    }
    write_tensor(
        &Tensor::from_f64(vec![feats.batch(), feats.patches()], &w)?,
        &a.out,
    )?;
    Ok(0)
}

fn required<T>(v: Option<T>, flag: &str, kind: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid(format!("--kind {kind} requires --{flag}")))
}

fn loss(a: LossArgs) -> Result<u8> {
    match a.kind {
        LossKind::Total => {
            let det = required(a.det, "det", "total")?;
            let pgfa = required(a.pgfa, "pgfa", "total")?;
            let pifa = required(a.pifa, "pifa", "total")?;
            if ![det, pgfa, pifa, a.lambda].iter().all(|v| v.is_finite()) || a.lambda < 0.0 {
                return Err(Error::invalid(
                    "losses must be finite and lambda non-negative",
                ));
            }
            println!("{:?}", total_loss(det, pgfa, pifa, a.lambda));
        }
        LossKind::Pgfa => {
            let vfm = patch_batch(read_tensor(required(a.vfm, "vfm", "pgfa")?)?, "vfm")?;
            let student = patch_batch(
                read_tensor(required(a.student, "student", "pgfa")?)?,
                "student",
            )?;
            let cfg = PatchWeightConfig {
                tau: a.tau,
                top_k: a.topk,
            };
            let out = pgfa_loss(&vfm, &student, &cfg, a.epsilon)?;
            println!("{:?}", out.loss);
            if let Some(path) = a.grad_out {
                let dims = vec![student.batch(), student.patches(), student.channels()];
                write_tensor(&Tensor::from_f64(dims, &out.grad_student)?, path)?;
            }
        }
        LossKind::Pifa => {
            let feats = read_tensor(required(a.features, "features", "pifa")?)?;
            let labels = read_tensor(required(a.labels, "labels", "pifa")?)?;
            let bank = read_prototype_bank(
                required(a.prototypes, "prototypes", "pifa")?,
                a.mask.as_deref(),
                DEFAULT_MOMENTUM,
            )?;
            let [m, c] = feats.dims[..] else {
                return Err(Error::invalid(format!(
                    "features must be M x C, got {:?}",
                    feats.dims
                )));
            };
            if labels.dims != [m] {
                return Err(Error::invalid(format!(
                    "labels shape {:?}, expected [{m}]",
                    labels.dims
                )));
            }
            let values = feats.to_f64();
            let instances = values
                .chunks_exact(c.max(1))
                .zip(&labels.data)
                .map(|(f, &l)| {
                    if l < 0.0 || l.fract() != 0.0 {
                        return Err(Error::invalid(format!("label {l} is not a class index")));
                    }
                    Ok(InstanceFeature {
                        features: f.to_vec(),
                        label: l as usize,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = pifa_loss(&instances, &bank, a.tau)?;
            println!("{:?}", out.loss);
            if let Some(path) = a.grad_out {
                let flat: Vec<f64> = out.grad_instances.into_iter().flatten().collect();
                write_tensor(&Tensor::from_f64(vec![m, c], &flat)?, path)?;
            }
        }
    }
    Ok(0)
}

fn grad_check(a: GradCheckArgs) -> Result<u8> {
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(Error::invalid(format!("tol={} must be positive", a.tol)));
    }
    let kind = match a.loss {
        GradLossArg::Pgfa => GradLoss::Pgfa,
        GradLossArg::Pifa => GradLoss::Pifa,
    };
    let r = gradcheck::check(kind, a.seed, a.h)?;
    let pass = r.max_rel_error < a.tol;
    println!(
        "max relative error {:e} (max abs {:e}, {} parameters, tol {:e}): {}",
        r.max_rel_error,
        r.max_abs_error,
        r.num_params,
        a.tol,
        if pass { "pass" } else { "FAIL" }
    );
    Ok(if pass { 0 } else { 1 })
}

fn ema_sim(a: EmaSimArgs) -> Result<u8> {
    let mut state = EmaState::new(vec![a.teacher_init; a.dim], a.alpha, a.interval)?;
    let student = vec![a.student; a.dim];
    let gap = |s: &EmaState| -> f64 {
        s.teacher()
            .iter()
            .zip(&student)
            .map(|(t, s)| (t - s) * (t - s))
            .sum::<f64>()
            .sqrt()
    };
    let initial = gap(&state);
    for _ in 0..a.steps {
        state.step(&student)?;
    }
    let n = state.applied();
    let expected = a.alpha.powi(n.min(i32::MAX as u64) as i32) * initial;
    println!("calls {} applied {n}", a.steps);
    println!("initial gap {initial:?}");
    println!("final gap {:?}", gap(&state));
    println!("alpha^n * initial gap {expected:?}");
    if let Some(dir) = a.out_dir {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_ema_state(
            &state,
            dir.join("ema_params.ftns"),
            dir.join("ema_state.json"),
        )?;
    }
    Ok(0)
}

fn selftrain(a: SelftrainArgs) -> Result<u8> {
    let mut cfg = match &a.config {
        Some(p) => TrainerConfig::load(p)?,
        None => TrainerConfig::from_toml(DEFAULT_CONFIG)?,
    };
    cfg.lambda = a.lambda.unwrap_or(cfg.lambda);
    cfg.mu = a.mu.unwrap_or(cfg.mu);
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.ema_interval = a.ema_interval.unwrap_or(cfg.ema_interval);
    cfg.validate()?;

    let scenes = generate_scenes(cfg.seed, cfg.num_scenes, &NoiseModel::default())?;
    let report = run_adaptation(&cfg, &scenes)?;
    for r in &report.records {
        let loss = r
            .losses
            .map_or_else(|| "-".to_string(), |l| format!("{:.6}", l.total));
        println!(
            "epoch {:>3}  loss {loss:>9}  fused F1 {:.4}  teacher F1 {:.4}  vfm F1 {:.4}  teacher acc {:.4}",
            r.epoch, r.eval.fused.f1, r.eval.teacher.f1, r.eval.vfm.f1, r.eval.teacher_accuracy
        );
    }
    let s = &report.summary;
    println!(
        "final fused F1 {:.4} vs epoch-0 best single-source F1 {:.4}: {}",
        s.last.fused.f1,
        s.initial_best_single_f1,
        if s.improved {
            "improved"
        } else {
            "not improved"
        }
    );
    report.write(&a.out_dir)?;
    Ok(0)
}

fn gen_synthetic(a: GenSyntheticArgs) -> Result<u8> {
    if a.scenes == 0 {
        return Err(Error::invalid("--scenes must be at least 1"));
    }
    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes = generate_scenes(a.seed, a.scenes, &NoiseModel::default())?;
    let source = source_params(NUM_CLASSES, CHANNELS, SOURCE_SCALE);

    let detection_file =
        |f: &dyn Fn(&crate::synthetic::SyntheticScene) -> Result<Vec<Detection>>| {
            Ok::<_, Error>(DetectionFile {
                num_classes: NUM_CLASSES,
                class_names: None,
                images: scenes
                    .iter()
                    .map(|s| {
                        Ok(ImageDetections {
                            image_id: s.image_id.clone(),
                            detections: f(s)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        };
    let teacher = detection_file(&|s| {
        s.teacher_boxes
            .iter()
            .map(|b| {
                let x = crate::pifa::pool_instance(&s.weak_view, b)?;
                Detection::new(*b, class_probs(&source, NUM_CLASSES, CHANNELS, &x))
            })
            .collect()
    })?;
    let vfm = detection_file(&|s| Ok(s.vfm_detections.clone()))?;
    let truth = detection_file(&|s| {
        s.objects
            .iter()
            .map(|o| {
                let mut p = vec![0.0; NUM_CLASSES];
                p[o.class] = 1.0;
                Detection::new(o.bbox, p)
            })
            .collect()
    })?;
    write_detections(dir.join("teacher.json"), &teacher)?;
    write_detections(dir.join("vfm.json"), &vfm)?;
    write_detections(dir.join("ground_truth.json"), &truth)?;

    let k = scenes.len();
    let stack = |f: &dyn Fn(&crate::synthetic::SyntheticScene) -> Vec<f64>| -> Vec<f64> {
        scenes.iter().flat_map(f).collect()
    };
    let patches = vec![k, PATCHES, CHANNELS];
    let maps = vec![k, CHANNELS, GRID, GRID];
    write_tensor(
        &Tensor::from_f64(patches.clone(), &stack(&|s| patch_rows(&s.vfm_map)))?,
        dir.join("vfm_patches.ftns"),
    )?;
    write_tensor(
        &Tensor::from_f64(patches, &stack(&|s| patch_rows(&s.strong_view)))?,
        dir.join("student_patches.ftns"),
    )?;
    write_tensor(
        &Tensor::from_f64(maps.clone(), &stack(&|s| s.weak_view.data().to_vec()))?,
        dir.join("teacher_view.ftns"),
    )?;
    write_tensor(
        &Tensor::from_f64(maps, &stack(&|s| s.strong_view.data().to_vec()))?,
        dir.join("student_view.ftns"),
    )?;
    println!("wrote {k} scenes to {}", dir.display());
    Ok(0)
}
