//! Two-phase training, loss assembly, evaluation and checkpoints.

mod checkpoint;
mod eval;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, NamedArray, Phase, MAGIC};
pub use eval::{
    bench_inference, evaluate, predict_all, predict_batch, worker_count, BenchReport, EvalRecord, EvalReport,
    Prediction, Tally, Timer, WallTimer,
};

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::Variant;
use crate::ctc::ctc_loss_batch;
use crate::error::{Error, Result};
use crate::frm::SequenceHead;
use crate::model::{images_to_batch, Forward, ModelConfig, SvtrV2, SGM_PREFIX};
use crate::msr::{build_batches, resize_bilinear, Charset, RawSample, ResizeMode};
use crate::nn::ParamStore;
use crate::optim::{adamw_step, clip_grad_norm, AdamState, AdamWConfig, OneCycle};
use crate::sgm::DEFAULT_WINDOW;
use crate::synth::{augment, mix, AugmentConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const BASE_LR: f64 = 6.5e-4;
pub const BASE_BATCH: f64 = 1024.0;

/// Which phases a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phases {
    A,
    B,
    AB,
}

impl FromStr for Phases {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Phases::A),
            "b" => Ok(Phases::B),
            "ab" | "a+b" | "both" => Ok(Phases::AB),
            other => Err(Error::Config(format!("unknown phase selection {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub head: SequenceHead,
    /// Peak learning rate; `None` scales the base rate by `batch_size / 1024`.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub phases: Phases,
    pub seed: u64,
    pub resize: ResizeMode,
    pub window: usize,
    pub max_label_len: usize,
    pub clip_norm: f64,
    pub augment: bool,
    pub val_fraction: f64,
    /// Per-epoch validation accuracy (costs one pass over the split).
    pub validate: bool,
    pub data: Option<PathBuf>,
    pub charset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Nano,
            head: SequenceHead::Frm,
            lr: None,
            weight_decay: 0.05,
            warmup_epochs: 1.5,
            total_epochs: 10.0,
            batch_size: 16,
            lambda1: 0.1,
            lambda2: 1.0,
            phases: Phases::AB,
            seed: 0,
            resize: ResizeMode::Msr,
            window: DEFAULT_WINDOW,
            max_label_len: 25,
            clip_norm: 5.0,
            augment: true,
            val_fraction: 0.1,
            validate: true,
            data: None,
            charset: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn peak_lr(&self) -> f64 {
        self.lr.unwrap_or(BASE_LR * self.batch_size as f64 / BASE_BATCH)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("loss weights must be nonnegative");
        }
        if self.total_epochs.is_nan()
            || self.total_epochs <= 0.0
            || self.warmup_epochs.is_nan()
            || self.warmup_epochs < 0.0
            || self.warmup_epochs >= self.total_epochs
        {
            return bad("need 0 <= warmup_epochs < total_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.peak_lr().is_nan() || self.peak_lr() <= 0.0 {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim().trim_matches('"'));
            cfg.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.charset, &mut cfg.out_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: FromStr>(k: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        }
        fn flag(k: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("bad value {v:?} for {k}"))),
            }
        }
        match key {
            "variant" => self.variant = value.parse()?,
            "head" => self.head = value.parse()?,
            "lr" => self.lr = if value == "auto" { None } else { Some(num(key, value)?) },
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "total_epochs" => self.total_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "phase" | "phases" => self.phases = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "resize" => self.resize = value.parse()?,
            "window" => self.window = num(key, value)?,
            "max_label_len" => self.max_label_len = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "augment" => self.augment = flag(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "validate" => self.validate = flag(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "charset" => self.charset = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize, sgm: bool) -> ModelConfig {
        let mut c = ModelConfig::new(self.variant, num_classes);
        c.head = self.head;
        c.sgm = sgm;
        c.window = self.window;
        c
    }
}

/// Whether `source_id` falls in the validation split.
pub fn is_validation(source_id: &str, seed: u64, fraction: f64) -> bool {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(source_id.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (v as f64 / u64::MAX as f64) < fraction
}

/// `(train, validation)` partition of `samples`.
pub fn split_validation(samples: &[RawSample], seed: u64, fraction: f64) -> (Vec<RawSample>, Vec<RawSample>) {
    samples
        .iter()
        .cloned()
        .partition(|s| !is_validation(&s.source_id, seed, fraction))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    /// Batch-mean CTC loss over feasible samples (unweighted).
    pub ctc: f64,
    /// Guidance loss (unweighted), phase B only.
    pub sgm: Option<f64>,
    /// Samples whose label cannot be aligned in the available frames.
    pub skipped: usize,
    pub forward: Forward,
}

/// `λ1 · L_ctc` in phase A, `λ1 · L_ctc + λ2 · L_sgm` in phase B.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &SvtrV2,
    store: &ParamStore<T>,
    images: Var,
    labels: &[Vec<usize>],
    phase: Phase,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    let with_sgm = match phase {
        Phase::A => false,
        Phase::B => true,
        Phase::Inference => {
            return Err(Error::Mode {
                mode: "inference",
                what: "training loss".into(),
            })
        }
    };
    if with_sgm && !model.has_sgm() {
        return Err(Error::Config("phase B needs the guidance branch".into()));
    }
    let forward = model.forward(tape, store, images)?;
    let (per_sample, feasible) = ctc_loss_batch(tape, forward.logits, labels)?;
    let n_ok = feasible.iter().filter(|&&f| f).count();
    let skipped = labels.len() - n_ok;
    let w = if n_ok > 0 { 1.0 / n_ok as f64 } else { 0.0 };
    let ctc_mean = tape.data(per_sample).iter().map(|v| v.as_f64()).sum::<f64>() * w;
    let weights = vec![T::from_f64(lambda1 * w); labels.len()];
    let mut total = tape.weighted_sum(per_sample, weights)?;
    let mut sgm = None;
    if with_sgm {
        let out = model.sgm_loss(tape, store, &forward.features, labels)?;
        sgm = Some(tape.data(out.loss)[0].as_f64());
        let scaled = tape.scale(out.loss, T::from_f64(lambda2));
        total = tape.add(total, scaled)?;
    }
    Ok(LossParts {
        total,
        ctc: ctc_mean,
        sgm,
        skipped,
        forward,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub phase: Phase,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ctc: f64,
    pub sgm: Option<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum Event<'a> {
    Step(&'a StepLog),
    Epoch(&'a EpochLog),
    Saved(Phase, &'a Path),
}

pub struct TrainOutcome {
    pub model: SvtrV2,
    pub store: ParamStore<f32>,
    pub phase_a: Option<Checkpoint>,
    pub phase_b: Option<Checkpoint>,
    pub inference: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub skipped: usize,
    pub excluded_long: usize,
    pub validation: Vec<RawSample>,
}

impl TrainOutcome {
    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }
}

fn prepare_batch(
    samples: &[RawSample],
    ids: &[usize],
    target: (usize, usize),
    augment_cfg: Option<&AugmentConfig>,
    seed: u64,
) -> Result<(Tensor<f32>, Vec<Vec<usize>>)> {
    let mut imgs = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for &i in ids {
        let s = &samples[i];
        let img = match augment_cfg {
            Some(cfg) => resize_bilinear(&augment(s, cfg, mix(seed ^ i as u64))?.image, target)?,
            None => resize_bilinear(&s.image, target)?,
        };
        imgs.push(img);
        labels.push(s.label.clone());
    }
    let refs: Vec<&Tensor<f32>> = imgs.iter().collect();
    Ok((images_to_batch(&refs)?, labels))
}

fn dump_bad_batch(out_dir: Option<&Path>, phase: Phase, step: usize, ids: &[&str]) -> String {
    let body = format!("phase={phase}\nstep={step}\n{}\n", ids.join("\n"));
    if let Some(dir) = out_dir {
        let p = dir.join(format!("nan_batch_{phase}_{step}.txt"));
        if fs::write(&p, &body).is_ok() {
            return format!("batch dumped to {}", p.display());
        }
    }
    format!("batch: {}", ids.join(", "))
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    charset: &'a Charset,
    train: &'a [RawSample],
    validation: &'a [RawSample],
    steps: Vec<StepLog>,
    epochs: Vec<EpochLog>,
    skipped: usize,
}

impl Run<'_> {
    fn phase(
        &mut self,
        phase: Phase,
        model: &SvtrV2,
        store: &mut ParamStore<f32>,
        observer: &mut dyn FnMut(Event),
    ) -> Result<()> {
        let cfg = self.cfg;
        let phase_salt = match phase {
            Phase::A => 0xA,
            _ => 0xB,
        };
        let probe = build_batches(self.train, cfg.batch_size, 0, cfg.resize)?;
        let per_epoch = probe.batches.len();
        let total = ((cfg.total_epochs * per_epoch as f64).round() as usize).max(1);
        let warmup = (cfg.warmup_epochs * per_epoch as f64).round() as usize;
        let schedule = OneCycle::new(cfg.peak_lr(), warmup, total);
        let adam = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        let aug = cfg.augment.then(AugmentConfig::default);
        let mut state = AdamState::for_store(store);
        let mut step = 0;
        let mut epoch = 0;
        while step < total {
            let epoch_seed = mix(cfg.seed ^ mix(phase_salt ^ (epoch as u64) << 8));
            let manifest = build_batches(self.train, cfg.batch_size, epoch_seed, cfg.resize)?;
            let mut loss_sum = 0.0;
            let mut n = 0;
            for batch in &manifest.batches {
                if step >= total {
                    break;
                }
                let lr = schedule.lr(step);
                let (images, labels) = prepare_batch(
                    self.train,
                    &batch.ids,
                    batch.target,
                    aug.as_ref(),
                    mix(epoch_seed ^ step as u64),
                )?;
                let mut tape = Tape::new();
                let x = tape.constant(images);
                let parts = total_loss(&mut tape, model, store, x, &labels, phase, cfg.lambda1, cfg.lambda2)?;
                let loss = tape.data(parts.total)[0] as f64;
                let ids: Vec<&str> = batch.ids.iter().map(|&i| self.train[i].source_id.as_str()).collect();
                if !loss.is_finite() {
                    let where_ = dump_bad_batch(cfg.out_dir.as_deref(), phase, step, &ids);
                    return Err(Error::NonFinite(format!(
                        "training loss at phase {phase} step {step}; {where_}"
                    )));
                }
                let grads = tape.backward(parts.total)?;
                store.zero_grads();
                store.accumulate_grads(&tape, &grads)?;
                drop(grads);
                drop(tape);
                let (grad_norm, clipped) = clip_grad_norm(store, cfg.clip_norm);
                if !grad_norm.is_finite() {
                    let where_ = dump_bad_batch(cfg.out_dir.as_deref(), phase, step, &ids);
                    return Err(Error::NonFinite(format!(
                        "gradient at phase {phase} step {step}; {where_}"
                    )));
                }
                if clipped {
                    log::debug!("phase {phase} step {step}: clipped gradient norm {grad_norm:.3}");
                }
                adamw_step(store, &mut state, lr, &adam)?;
                self.skipped += parts.skipped;
                let entry = StepLog {
                    phase,
                    step,
                    lr,
                    loss,
                    ctc: parts.ctc,
                    sgm: parts.sgm,
                    grad_norm,
                    clipped,
                    skipped: parts.skipped,
                };
                observer(Event::Step(&entry));
                self.steps.push(entry);
                loss_sum += loss;
                n += 1;
                step += 1;
            }
            let val_accuracy = if cfg.validate && !self.validation.is_empty() {
                let r = evaluate(
                    model,
                    store,
                    self.charset,
                    self.validation,
                    cfg.resize,
                    cfg.batch_size.max(16),
                )?;
                Some(r.accuracy())
            } else {
                None
            };
            let e = EpochLog {
                phase,
                epoch,
                step,
                mean_loss: loss_sum / n.max(1) as f64,
                val_accuracy,
            };
            observer(Event::Epoch(&e));
            self.epochs.push(e);
            epoch += 1;
        }
        for e in store.entries_mut() {
            e.tensor.grad = None;
        }
        Ok(())
    }
}

fn save_to(out_dir: Option<&Path>, name: &str, ckpt: &Checkpoint, observer: &mut dyn FnMut(Event)) -> Result<()> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(name);
        save_checkpoint(ckpt, &p)?;
        observer(Event::Saved(ckpt.phase, &p));
    }
    Ok(())
}

/// Runs phase A (no guidance), then phase B with a freshly initialised
/// guidance branch and a restarted schedule. Labels longer than
/// `max_label_len` are excluded from training.
pub fn train(
    cfg: &TrainConfig,
    samples: &[RawSample],
    charset: &Charset,
    observer: &mut dyn FnMut(Event),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let (train_all, validation) = split_validation(samples, cfg.seed, cfg.val_fraction);
    let before = train_all.len();
    let train_set: Vec<RawSample> = train_all
        .into_iter()
        .filter(|s| s.label.len() <= cfg.max_label_len)
        .collect();
    let excluded_long = before - train_set.len();
    if train_set.is_empty() {
        return Err(Error::Input(
            "no training samples left after the split and length cap".into(),
        ));
    }
    let mut run = Run {
        cfg,
        charset,
        train: &train_set,
        validation: &validation,
        steps: Vec::new(),
        epochs: Vec::new(),
        skipped: 0,
    };
    let out_dir = cfg.out_dir.as_deref();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let mut model = SvtrV2::build(cfg.model_config(charset.len(), false), &mut store, &mut rng)?;
    let mut phase_a = None;
    let mut phase_b = None;
    if matches!(cfg.phases, Phases::A | Phases::AB) {
        run.phase(Phase::A, &model, &mut store, observer)?;
        let c = Checkpoint::from_model(&model, &store, charset, Phase::A, run.steps.len() as u64)?;
        save_to(out_dir, "phase_a.ckpt", &c, observer)?;
        phase_a = Some(c);
    }
    if matches!(cfg.phases, Phases::B | Phases::AB) {
        store = store.without_prefix(SGM_PREFIX);
        let mut sgm_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x5e5));
        model = SvtrV2::build(cfg.model_config(charset.len(), true), &mut store, &mut sgm_rng)?;
        run.phase(Phase::B, &model, &mut store, observer)?;
        let c = Checkpoint::from_model(&model, &store, charset, Phase::B, run.steps.len() as u64)?;
        save_to(out_dir, "phase_b.ckpt", &c, observer)?;
        phase_b = Some(c);
    }
    let (lean, lean_store) = model.strip_for_inference(&store)?;
    let inference = Checkpoint::from_model(&lean, &lean_store, charset, Phase::Inference, run.steps.len() as u64)?;
    save_to(out_dir, "inference.ckpt", &inference, observer)?;
    Ok(TrainOutcome {
        model,
        store,
        phase_a,
        phase_b,
        inference,
        steps: run.steps,
        epochs: run.epochs,
        skipped: run.skipped,
        excluded_long,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let text = "# run\nvariant = nano\nlr = 1e-3\nphase = a\nbatch_size=8\naugment=false\nresize=fixed32x128\n";
        let c = TrainConfig::parse(text, Path::new("x.cfg")).unwrap();
        assert_eq!(c.lr, Some(1e-3));
        assert_eq!(c.phases, Phases::A);
        assert_eq!(c.batch_size, 8);
        assert!(!c.augment);
        assert_eq!(c.resize, ResizeMode::Fixed32x128);
        let bad = TrainConfig::parse("nope = 1\n", Path::new("x.cfg"));
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
        assert!(TrainConfig::parse("warmup_epochs = 12\n", Path::new("x")).is_err());
        assert!(TrainConfig::parse("lambda2 = -1\n", Path::new("x")).is_err());
    }

    #[test]
    fn default_peak_scales_with_batch() {
        let c = TrainConfig {
            batch_size: 512,
            ..Default::default()
        };
        assert!((c.peak_lr() - 3.25e-4).abs() < 1e-15);
    }

    #[test]
    fn validation_split_is_stable() {
        let ids: Vec<String> = (0..2000).map(|i| format!("images/regular_{i:06}.pgm")).collect();
        let a: Vec<bool> = ids.iter().map(|s| is_validation(s, 3, 0.1)).collect();
        let b: Vec<bool> = ids.iter().map(|s| is_validation(s, 3, 0.1)).collect();
        assert_eq!(a, b);
        let n = a.iter().filter(|&&v| v).count();
        assert!((150..250).contains(&n), "{n}");
    }
}
