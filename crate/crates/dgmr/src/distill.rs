//! Teacher→student knowledge distillation.
//!
//! The frozen original model is the teacher; the pruned model is the
//! student, trained to match the teacher's class-token and patch-token
//! outputs via MSE (plus an optional supervised cross-entropy term through a
//! fixed random head). Optimization is AdamW with decoupled weight decay
//! under a linear-warmup + cosine learning-rate schedule whose peak scales
//! as `base_lr · batch_size / 256`.
//!
//! Everything is deterministic per seed: batch order, the optimizer, and
//! the resulting loss curve reproduce bit-exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{Model, ModelConfig, IN_CHANS};
use crate::nn::{
    self, forward, forward_backward, ForwardOutput, FreezeMask, LossParts, LossSpec, LossTerms,
};
use crate::scalar::Scalar;

/// AdamW denominator epsilon.
pub const ADAM_EPS: f64 = 1e-8;
/// Default optimizer/schedule hyperparameters.
pub const DEFAULT_BASE_LR: f64 = 1e-4;
pub const DEFAULT_MIN_LR: f64 = 1e-6;
pub const DEFAULT_BETA1: f64 = 0.90;
pub const DEFAULT_BETA2: f64 = 0.95;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0;
/// Default warmup fraction of the total step budget (one epoch in ten).
pub const DEFAULT_WARMUP_FRAC: f64 = 0.1;

/// A batch of images (and optionally labels) in one flat buffer.
///
/// `images` holds `n` samples of shape `3×S×S`, channel-major. Pixel values
/// produced by [`gen_synthetic_dataset`] are exactly representable in `f32`,
/// so narrowing storage loses nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Vec<T>,
    pub n: usize,
    pub image_size: usize,
    pub labels: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
    /// Seed of the fixed random labeling head, recorded so training and
    /// evaluation can rebuild the exact head that produced `labels`.
    pub label_head_seed: Option<u64>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn sample_len(&self) -> usize {
        IN_CHANS * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.images[i * len..(i + 1) * len]
    }

    pub fn image_slices(&self) -> Vec<&[T]> {
        (0..self.n).map(|i| self.image(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.n * self.sample_len() {
            return Err(Error::Dataset(format!(
                "{} pixel values for {} samples of {}",
                self.images.len(),
                self.n,
                self.sample_len()
            )));
        }
        if !self.images.iter().all(|v| v.is_finite()) {
            return Err(Error::Dataset("non-finite pixel value".into()));
        }
        match (&self.labels, self.num_classes) {
            (Some(l), Some(k)) => {
                if l.len() != self.n {
                    return Err(Error::Dataset(format!(
                        "{} labels for {} samples",
                        l.len(),
                        self.n
                    )));
                }
                if let Some(&bad) = l.iter().find(|&&x| x >= k) {
                    return Err(Error::Dataset(format!(
                        "label {bad} out of range for {k} classes"
                    )));
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::Dataset(
                    "labels and num_classes must be present together".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Distillation hyperparameters. [`Default`] gives the published recipe:
/// class+patch MSE, AdamW β = (0.90, 0.95), no weight decay, base lr 1e-4
/// down to 1e-6, warmup for the first tenth of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub loss_terms: LossTerms,
    pub lambda_xent: f64,
    pub freeze: FreezeMask,
    pub batch_size: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            loss_terms: LossTerms::cls_patch(),
            lambda_xent: 0.1,
            freeze: FreezeMask::NONE,
            batch_size: 8,
            seed: 0,
            base_lr: DEFAULT_BASE_LR,
            min_lr: DEFAULT_MIN_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            warmup_frac: DEFAULT_WARMUP_FRAC,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_terms.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
        }
        if self.lambda_xent < 0.0 || self.base_lr <= 0.0 || self.min_lr < 0.0 {
            return Err(Error::InvalidArgument(
                "learning rates must be positive and λ non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidArgument(
                "warmup fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Computes the peak from the linear scaling rule
    /// `peak = base_lr · batch_size / 256`.
    pub fn new(
        base_lr: f64,
        min_lr: f64,
        batch_size: usize,
        warmup_steps: usize,
        total_steps: usize,
    ) -> Result<Self> {
        if total_steps == 0 || warmup_steps > total_steps {
            return Err(Error::InvalidArgument(format!(
                "bad schedule: warmup {warmup_steps} of {total_steps} total steps"
            )));
        }
        Ok(Self {
            peak_lr: base_lr * batch_size as f64 / 256.0,
            min_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Learning rate at a (1-based) optimization step.
    ///
    /// `lr_at(0) = 0` when warming up; `lr_at(warmup_steps)` is exactly the
    /// peak; `lr_at(total_steps)` is exactly `min_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        debug_assert!(step <= self.total_steps, "step beyond schedule end");
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step == self.warmup_steps {
            return self.peak_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.min_lr
            + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Optimizer state: step counter plus per-tensor first and second moments,
/// stored in model-shaped containers.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub step: usize,
    pub m: Model<T>,
    pub v: Model<T>,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &Model<T>, schedule: Schedule, config: &DistillConfig) -> Self {
        Self {
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
            schedule,
            beta1: config.beta1,
            beta2: config.beta2,
            weight_decay: config.weight_decay,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.schedule.lr_at(step)
    }
}

/// One AdamW step with decoupled weight decay and bias-corrected moments.
///
/// Increments the step counter, takes the learning rate from the schedule
/// at the new (1-based) step, and leaves frozen tensor groups untouched —
/// including their decay. Returns the learning rate used.
pub fn adamw_step<T: Scalar>(
    state: &mut TrainState<T>,
    model: &mut Model<T>,
    grads: &Model<T>,
    freeze: FreezeMask,
) -> Result<f64> {
    if grads.config != model.config {
        return Err(Error::IncompatibleModels(
            "gradient container does not match the model architecture".into(),
        ));
    }
    state.step += 1;
    let lr = state.schedule.lr_at(state.step);
    let b1 = T::val(state.beta1);
    let b2 = T::val(state.beta2);
    let bc1 = T::val(1.0 - state.beta1.powi(state.step as i32));
    let bc2 = T::val(1.0 - state.beta2.powi(state.step as i32));
    let lr_t = T::val(lr);
    let eps = T::val(ADAM_EPS);
    let decay = T::val(1.0 - lr * state.weight_decay);
    let one = T::one();

    let mut weights = model.param_tensors_mut();
    let mut ms = state.m.param_tensors_mut();
    let mut vs = state.v.param_tensors_mut();
    let gs = grads.param_tensors();
    for (((w, m), v), g) in weights.iter_mut().zip(&mut ms).zip(&mut vs).zip(&gs) {
        debug_assert_eq!(w.name, g.name);
        if freeze.is_frozen(w.group) {
            continue;
        }
        for i in 0..w.data.len() {
            let grad = g.data[i];
            m.data[i] = b1 * m.data[i] + (one - b1) * grad;
            v.data[i] = b2 * v.data[i] + (one - b2) * grad * grad;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            w.data[i] = decay * w.data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(lr)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub step: usize,
    pub lr: f64,
    pub parts: LossParts,
}

/// Renders the loss curve as CSV with columns
/// `step,lr,loss,loss_cls,loss_patch[,loss_xent]`; the xent column appears
/// only when that term was trained.
pub fn loss_curve_csv(curve: &[LossLogEntry]) -> String {
    let with_xent = curve.iter().any(|e| e.parts.xent.is_some());
    let mut out = String::from("step,lr,loss,loss_cls,loss_patch");
    if with_xent {
        out.push_str(",loss_xent");
    }
    out.push('\n');
    for e in curve {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}",
            e.step, e.lr, e.parts.total, e.parts.cls, e.parts.patch
        ));
        if with_xent {
            out.push_str(&format!(",{:e}", e.parts.xent.unwrap_or(0.0)));
        }
        out.push('\n');
    }
    out
}

/// The distillation objective for pre-computed outputs: per-term means over
/// the batch and their (enabled-terms) total. Exactly the numbers
/// [`run_distillation`] logs.
pub fn distill_loss<T: Scalar>(
    teacher: &[ForwardOutput<T>],
    student: &[ForwardOutput<T>],
    config: &DistillConfig,
    labels: Option<&[usize]>,
    head: Option<&DenseMatrix<T>>,
) -> Result<(f64, LossParts)> {
    config.validate()?;
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            left: format!("{} teacher outputs", teacher.len()),
            right: format!("{} student outputs", student.len()),
        });
    }
    if config.loss_terms.xent {
        let l = labels.ok_or_else(|| Error::InvalidArgument("xent loss requires labels".into()))?;
        if l.len() != teacher.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} samples",
                l.len(),
                teacher.len()
            )));
        }
        head.ok_or_else(|| Error::InvalidArgument("xent loss requires a head".into()))?;
    }
    let mut acc = nn::PartsAcc::default();
    for (i, (t, s)) in teacher.iter().zip(student).enumerate() {
        let (parts, _, _) = nn::sample_loss_refs(
            s,
            &t.cls,
            &t.patch,
            config.loss_terms,
            config.lambda_xent,
            labels.map(|l| l[i]),
            head,
            None,
        )?;
        acc.add(&parts);
    }
    let parts = acc.mean(teacher.len());
    Ok((parts.total, parts))
}

/// The fixed random linear head used for synthetic labels and the optional
/// supervised loss term. Deterministic in `(num_classes, embed_dim, seed)`.
pub fn fixed_head<T: Scalar>(num_classes: usize, embed_dim: usize, seed: u64) -> DenseMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(num_classes, embed_dim, |_, _| T::standard_normal(&mut rng))
}

/// Teacher-and-head pair for labeling synthetic data.
pub struct Labeler<'a, T> {
    pub teacher: &'a Model<T>,
    pub num_classes: usize,
}

/// Seeded synthetic dataset: uniform pixels in [0, 1), generated as `f32`
/// values so narrowing to 32-bit storage is lossless. With a labeler, each
/// sample's label is the argmax of a fixed random head applied to the
/// teacher's class output; the head is seeded by the same `seed`.
pub fn gen_synthetic_dataset<T: Scalar>(
    config: &ModelConfig,
    n: usize,
    seed: u64,
    labeler: Option<Labeler<'_, T>>,
) -> Result<Dataset<T>> {
    use rand::Rng;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = IN_CHANS * config.image_size * config.image_size;
    let images: Vec<T> = (0..n * len)
        .map(|_| T::val(rng.gen::<f32>() as f64))
        .collect();
    let mut ds = Dataset {
        images,
        n,
        image_size: config.image_size,
        labels: None,
        num_classes: None,
        label_head_seed: None,
    };
    if let Some(l) = labeler {
        if l.num_classes < 2 {
            return Err(Error::InvalidArgument(
                "labeling needs at least 2 classes".into(),
            ));
        }
        let head: DenseMatrix<T> = fixed_head(l.num_classes, config.embed_dim, seed);
        let outputs = forward(l.teacher, &ds.image_slices())?;
        let labels = outputs
            .iter()
            .map(|o| {
                let mut best = 0;
                let mut best_v = T::neg_infinity();
                for (j, row) in (0..l.num_classes).map(|j| (j, head.row(j))) {
                    let logit = crate::linalg::dot(row, o.cls.as_slice());
                    if logit > best_v {
                        best_v = logit;
                        best = j;
                    }
                }
                best
            })
            .collect();
        ds.labels = Some(labels);
        ds.num_classes = Some(l.num_classes);
        ds.label_head_seed = Some(seed);
    }
    ds.validate()?;
    Ok(ds)
}

/// Checks that two architectures differ in nothing but MLP width.
pub fn check_teacher_student(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    let mut t = teacher.clone();
    t.mlp_hidden = student.mlp_hidden;
    if t != *student {
        return Err(Error::IncompatibleModels(format!(
            "teacher and student may differ only in MLP width: {teacher:?} vs {student:?}"
        )));
    }
    Ok(())
}

/// Distills for a whole number of epochs; one step per batch,
/// `ceil(n / batch_size)` batches per epoch.
pub fn run_distillation<T: Scalar>(
    teacher: &Model<T>,
    student: &Model<T>,
    dataset: &Dataset<T>,
    config: &DistillConfig,
    epochs: usize,
) -> Result<(Model<T>, Vec<LossLogEntry>)> {
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    run_distillation_steps(teacher, student, dataset, config, epochs * steps_per_epoch)
}

/// Distills for a fixed step budget.
///
/// The teacher is evaluated once over the dataset and its outputs cached;
/// each epoch shuffles the sample order with the config seed and walks it
/// in batches. Deterministic per seed, down to the bits of the loss curve.
pub fn run_distillation_steps<T: Scalar>(
    teacher: &Model<T>,
    student: &Model<T>,
    dataset: &Dataset<T>,
    config: &DistillConfig,
    total_steps: usize,
) -> Result<(Model<T>, Vec<LossLogEntry>)> {
    config.validate()?;
    dataset.validate()?;
    check_teacher_student(&teacher.config, &student.config)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot distill on an empty dataset".into()));
    }
    if dataset.image_size != teacher.config.image_size {
        return Err(Error::Dataset(format!(
            "dataset images are {}px, model expects {}px",
            dataset.image_size, teacher.config.image_size
        )));
    }
    if total_steps == 0 {
        return Err(Error::InvalidArgument("zero training steps".into()));
    }
    let head: Option<DenseMatrix<T>> = if config.loss_terms.xent {
        let (k, hs) = match (dataset.num_classes, dataset.label_head_seed) {
            (Some(k), Some(hs)) => (k, hs),
            _ => {
                return Err(Error::Dataset(
                    "xent loss requires a labeled dataset".into(),
                ))
            }
        };
        Some(fixed_head(k, teacher.config.embed_dim, hs))
    } else {
        None
    };

    // Cache teacher outputs once; the teacher never changes.
    let teacher_out = forward(teacher, &dataset.image_slices())?;
    let teacher_cls: Vec<_> = teacher_out.iter().map(|o| o.cls.clone()).collect();
    let teacher_patch: Vec<_> = teacher_out.iter().map(|o| o.patch.clone()).collect();

    let warmup = (config.warmup_frac * total_steps as f64).round() as usize;
    let schedule = Schedule::new(
        config.base_lr,
        config.min_lr,
        config.batch_size,
        warmup,
        total_steps,
    )?;
    let mut trained = student.clone();
    let mut state = TrainState::new(&trained, schedule, config);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::with_capacity(total_steps);

    'steps: loop {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            if state.step == total_steps {
                break 'steps;
            }
            let images: Vec<&[T]> = batch.iter().map(|&i| dataset.image(i)).collect();
            let b_cls: Vec<_> = batch.iter().map(|&i| teacher_cls[i].clone()).collect();
            let b_patch: Vec<_> = batch.iter().map(|&i| teacher_patch[i].clone()).collect();
            let b_labels: Option<Vec<usize>> = dataset
                .labels
                .as_ref()
                .filter(|_| config.loss_terms.xent)
                .map(|l| batch.iter().map(|&i| l[i]).collect());
            let spec = LossSpec {
                teacher_cls: &b_cls,
                teacher_patch: &b_patch,
                terms: config.loss_terms,
                lambda_xent: config.lambda_xent,
                labels: b_labels.as_deref(),
                head: head.as_ref(),
                freeze: config.freeze,
            };
            let result = forward_backward(&trained, &images, &spec)?;
            let lr = adamw_step(&mut state, &mut trained, &result.grads, config.freeze)?;
            curve.push(LossLogEntry {
                step: state.step,
                lr,
                parts: result.parts,
            });
        }
    }
    Ok((trained, curve))
}
