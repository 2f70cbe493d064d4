//! Forward and analytic backward passes for the toy transformer.
//!
//! The forward pipeline is: patchify → linear patch embedding → prepend
//! class token → add positional embedding → pre-norm blocks
//! (`x + Attn(LN(x))`; `x + MLP(LN(x))`) with exact-erf GELU → final
//! layernorm → split into the class row and the patch rows.
//!
//! [`forward_backward`] runs the same pipeline while recording a per-sample
//! tape of intermediate activations, then walks the tape backwards to
//! produce exact analytic gradients of the distillation loss for every
//! trainable tensor. Gradients are accumulated over the batch in ascending
//! sample order, so results are bit-identical across runs.
//!
//! Images are flat channel-major slices (`[c][y][x]`) of length
//! `3 × image_size²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, DenseMatrix, DenseVector};
use crate::model::{AttentionWeights, Model, ModelConfig, ParamGroup, IN_CHANS};
use crate::scalar::Scalar;

/// Layernorm variance epsilon.
pub const LN_EPS: f64 = 1e-6;

/// Exact-erf GELU: `x·Φ(x)` with `Φ(x) = ½(1 + erf(x/√2))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_prime<T: Scalar>(x: T) -> T {
    // φ(x) = exp(−x²/2)/√(2π)
    let pdf = T::val(0.398_942_280_401_432_7) * (-x * x / T::val(2.0)).exp();
    normal_cdf(x) + x * pdf
}

fn normal_cdf<T: Scalar>(x: T) -> T {
    T::val(0.5) * (T::one() + (x * T::val(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Rowwise layernorm over the channel dimension with affine parameters.
pub fn layernorm<T: Scalar>(
    x: &DenseMatrix<T>,
    gain: &DenseVector<T>,
    bias: &DenseVector<T>,
) -> DenseMatrix<T> {
    layernorm_fwd(x, gain, bias).out
}

/// Rowwise softmax with max-subtraction.
pub fn softmax_rows<T: Scalar>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Which distillation terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: bool,
    pub patch: bool,
    pub xent: bool,
}

impl LossTerms {
    /// The standard distillation recipe: class + patch MSE, no supervision.
    pub fn cls_patch() -> Self {
        Self {
            cls: true,
            patch: true,
            xent: false,
        }
    }

    pub fn validate(self) -> Result<()> {
        if !(self.cls || self.patch || self.xent) {
            return Err(Error::InvalidArgument(
                "at least one loss term must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Tensor groups excluded from training: their gradients are zeroed after
/// the backward pass and the optimizer skips them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    pub embedding: bool,
    pub layer_norm: bool,
    pub attention: bool,
    pub mlp: bool,
}

impl FreezeMask {
    pub const NONE: Self = Self {
        embedding: false,
        layer_norm: false,
        attention: false,
        mlp: false,
    };

    pub fn is_frozen(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Embedding => self.embedding,
            ParamGroup::LayerNorm => self.layer_norm,
            ParamGroup::Attention => self.attention,
            ParamGroup::Mlp => self.mlp,
        }
    }
}

/// Model outputs for one sample: the class-token row and the patch rows,
/// both taken after the final layernorm.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub cls: DenseVector<T>,
    pub patch: DenseMatrix<T>,
}

/// Loss values averaged over a batch. `cls` and `patch` are always
/// reported; only enabled terms contribute to `total`
/// (`total = cls + patch + λ·xent`, restricted to the enabled subset, with
/// `xent` logged unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub patch: f64,
    pub xent: Option<f64>,
}

/// Everything [`forward_backward`] needs besides model and images: the
/// frozen teacher's outputs, the active loss terms, and the optional
/// supervision head.
#[derive(Debug, Clone)]
pub struct LossSpec<'a, T> {
    pub teacher_cls: &'a [DenseVector<T>],
    pub teacher_patch: &'a [DenseMatrix<T>],
    pub terms: LossTerms,
    /// Weight of the cross-entropy term when enabled.
    pub lambda_xent: f64,
    /// One label per sample; required iff `terms.xent`.
    pub labels: Option<&'a [usize]>,
    /// Fixed (untrained) linear head `num_classes×C` mapping class-token
    /// outputs to logits; required iff `terms.xent`.
    pub head: Option<&'a DenseMatrix<T>>,
    pub freeze: FreezeMask,
}

/// Result of [`forward_backward`].
#[derive(Debug, Clone)]
pub struct BackwardResult<T> {
    pub loss: f64,
    pub parts: LossParts,
    pub grads: Model<T>,
}

/// Cuts one image into non-overlapping patch rows.
///
/// Row `py·(S/p) + px` holds the patch at grid position `(py, px)`,
/// flattened channel-major, so its length is `3p²` — the patch-embedding
/// fan-in.
pub fn patchify<T: Scalar>(image: &[T], config: &ModelConfig) -> Result<DenseMatrix<T>> {
    let s = config.image_size;
    let p = config.patch_size;
    if image.len() != IN_CHANS * s * s {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            left: format!("image of {} values", image.len()),
            right: format!("config expects {}x{s}x{s}", IN_CHANS),
        });
    }
    let grid = s / p;
    let mut out = DenseMatrix::zeros(grid * grid, config.patch_dim());
    for py in 0..grid {
        for px in 0..grid {
            let row = out.row_mut(py * grid + px);
            let mut k = 0;
            for c in 0..IN_CHANS {
                for dy in 0..p {
                    let y = py * p + dy;
                    let base = c * s * s + y * s + px * p;
                    for dx in 0..p {
                        row[k] = image[base + dx];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Runs the model over a batch of images.
pub fn forward<T: Scalar>(model: &Model<T>, images: &[&[T]]) -> Result<Vec<ForwardOutput<T>>> {
    images
        .iter()
        .map(|img| forward_sample(model, img).map(|(out, _)| out))
        .collect()
}

/// Forward + analytic backward over a batch.
///
/// The loss is averaged over the batch; gradients match that convention.
/// Frozen tensor groups come back with exactly zero gradients.
pub fn forward_backward<T: Scalar>(
    model: &Model<T>,
    images: &[&[T]],
    spec: &LossSpec<'_, T>,
) -> Result<BackwardResult<T>> {
    validate_spec(model, images.len(), spec)?;
    let b = images.len();
    let inv_b = 1.0 / b as f64;
    let mut grads = model.zeros_like();
    let mut acc = PartsAcc::default();
    for (i, img) in images.iter().enumerate() {
        let (out, tape) = forward_sample(model, img)?;
        let (parts, d_cls, d_patch) = sample_loss(&out, spec, i, Some(inv_b))?;
        acc.add(&parts);
        let (d_cls, d_patch) = (
            d_cls.expect("grads requested"),
            d_patch.expect("grads requested"),
        );
        backward_sample(model, &tape, &d_cls, &d_patch, &mut grads);
    }
    for t in grads.param_tensors_mut() {
        if spec.freeze.is_frozen(t.group) {
            t.data.fill(T::zero());
        }
    }
    let parts = acc.mean(b);
    Ok(BackwardResult {
        loss: parts.total,
        parts,
        grads,
    })
}

/// Loss of the batch without gradients; same value [`forward_backward`]
/// reports. Used by evaluation and the finite-difference checks.
pub fn evaluate_loss<T: Scalar>(
    model: &Model<T>,
    images: &[&[T]],
    spec: &LossSpec<'_, T>,
) -> Result<LossParts> {
    validate_spec(model, images.len(), spec)?;
    let outputs = forward(model, images)?;
    loss_from_outputs(&outputs, spec)
}

/// Loss parts for already-computed student outputs against the teacher
/// outputs in `spec`. Shared by [`forward_backward`], [`evaluate_loss`] and
/// the distillation module so all report identical numbers.
pub fn loss_from_outputs<T: Scalar>(
    student: &[ForwardOutput<T>],
    spec: &LossSpec<'_, T>,
) -> Result<LossParts> {
    if student.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut acc = PartsAcc::default();
    for (i, out) in student.iter().enumerate() {
        let (parts, _, _) = sample_loss(out, spec, i, None)?;
        acc.add(&parts);
    }
    Ok(acc.mean(student.len()))
}

// ---------------------------------------------------------------------------
// Loss internals
// ---------------------------------------------------------------------------

#[derive(Default)]
pub(crate) struct PartsAcc {
    total: f64,
    cls: f64,
    patch: f64,
    xent: Option<f64>,
}

impl PartsAcc {
    pub(crate) fn add(&mut self, p: &LossParts) {
        self.total += p.total;
        self.cls += p.cls;
        self.patch += p.patch;
        if let Some(x) = p.xent {
            *self.xent.get_or_insert(0.0) += x;
        }
    }

    pub(crate) fn mean(&self, n: usize) -> LossParts {
        let inv = 1.0 / n as f64;
        LossParts {
            total: self.total * inv,
            cls: self.cls * inv,
            patch: self.patch * inv,
            xent: self.xent.map(|x| x * inv),
        }
    }
}

fn validate_spec<T: Scalar>(model: &Model<T>, batch: usize, spec: &LossSpec<'_, T>) -> Result<()> {
    spec.terms.validate()?;
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let c = model.config.embed_dim;
    let lp = model.config.num_patches();
    if spec.teacher_cls.len() != batch || spec.teacher_patch.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: format!("batch of {batch}"),
            right: format!(
                "teacher outputs for {}/{} samples",
                spec.teacher_cls.len(),
                spec.teacher_patch.len()
            ),
        });
    }
    for (tc, tp) in spec.teacher_cls.iter().zip(spec.teacher_patch) {
        if tc.len() != c || tp.shape() != (lp, c) {
            return Err(Error::ShapeMismatch {
                op: "loss",
                left: format!("student outputs {c} / {lp}x{c}"),
                right: format!("teacher outputs {} / {:?}", tc.len(), tp.shape()),
            });
        }
    }
    if spec.terms.xent {
        let head = spec
            .head
            .ok_or_else(|| Error::InvalidArgument("xent loss requires a head".into()))?;
        let labels = spec
            .labels
            .ok_or_else(|| Error::InvalidArgument("xent loss requires labels".into()))?;
        if head.cols() != c {
            return Err(Error::ShapeMismatch {
                op: "xent head",
                left: format!("head {}x{}", head.rows(), head.cols()),
                right: format!("class outputs of {c}"),
            });
        }
        if labels.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= head.rows()) {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: bad,
                size: head.rows(),
            });
        }
        if spec.lambda_xent < 0.0 {
            return Err(Error::InvalidArgument(
                "lambda for the xent term must be non-negative".into(),
            ));
        }
    }
    Ok(())
}

#[allow(clippy::type_complexity)]
fn sample_loss<T: Scalar>(
    out: &ForwardOutput<T>,
    spec: &LossSpec<'_, T>,
    sample: usize,
    inv_b: Option<f64>,
) -> Result<(LossParts, Option<DenseVector<T>>, Option<DenseMatrix<T>>)> {
    sample_loss_refs(
        out,
        &spec.teacher_cls[sample],
        &spec.teacher_patch[sample],
        spec.terms,
        spec.lambda_xent,
        spec.labels.map(|l| l[sample]),
        spec.head,
        inv_b,
    )
}

/// Per-sample loss parts and (optionally) gradients with respect to the
/// student outputs, pre-scaled by `1/B` for batch averaging.
///
/// `𝓛_cls = (1/C)‖z−ẑ‖²`, `𝓛_patch = (1/(L_p·C))‖z−ẑ‖²`; both are always
/// reported, but only enabled terms contribute to `total` and to the
/// gradients. `xent` is the plain cross-entropy; `total` adds it scaled by
/// λ.
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub(crate) fn sample_loss_refs<T: Scalar>(
    out: &ForwardOutput<T>,
    t_cls: &DenseVector<T>,
    t_patch: &DenseMatrix<T>,
    terms: LossTerms,
    lambda_xent: f64,
    label: Option<usize>,
    head: Option<&DenseMatrix<T>>,
    inv_b: Option<f64>,
) -> Result<(LossParts, Option<DenseVector<T>>, Option<DenseMatrix<T>>)> {
    if out.cls.len() != t_cls.len() || out.patch.shape() != t_patch.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: format!("student {} / {:?}", out.cls.len(), out.patch.shape()),
            right: format!("teacher {} / {:?}", t_cls.len(), t_patch.shape()),
        });
    }
    let c = out.cls.len();
    let lp = out.patch.rows();
    let want_grads = inv_b.is_some();
    let mut d_cls = want_grads.then(|| DenseVector::zeros(c));
    let mut d_patch = want_grads.then(|| DenseMatrix::zeros(lp, c));

    let mut cls_sq = T::zero();
    for i in 0..c {
        let e = out.cls.get(i) - t_cls.get(i);
        cls_sq += e * e;
    }
    let loss_cls = cls_sq.to_f64_lossy() / c as f64;

    let mut patch_sq = T::zero();
    for (s, t) in out.patch.data().iter().zip(t_patch.data()) {
        let e = *s - *t;
        patch_sq += e * e;
    }
    let loss_patch = patch_sq.to_f64_lossy() / (lp * c) as f64;

    let mut total = 0.0;
    if terms.cls {
        total += loss_cls;
        if let (Some(d), Some(inv_b)) = (d_cls.as_mut(), inv_b) {
            let scale = T::val(2.0 * inv_b / c as f64);
            for i in 0..c {
                d.set(i, scale * (out.cls.get(i) - t_cls.get(i)));
            }
        }
    }
    if terms.patch {
        total += loss_patch;
        if let (Some(d), Some(inv_b)) = (d_patch.as_mut(), inv_b) {
            let scale = T::val(2.0 * inv_b / (lp * c) as f64);
            for (dv, (s, t)) in d
                .data_mut()
                .iter_mut()
                .zip(out.patch.data().iter().zip(t_patch.data()))
            {
                *dv = scale * (*s - *t);
            }
        }
    }

    let mut loss_xent = None;
    if terms.xent {
        let head = head.expect("validated");
        let label = label.expect("validated");
        // logits = head · ẑ_cls, probabilities via stable softmax
        let k = head.rows();
        let mut logits = vec![T::zero(); k];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = crate::linalg::dot(head.row(j), out.cls.as_slice());
        }
        let max = logits
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let mut sum = T::zero();
        let mut probs = logits.clone();
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let ce = -(probs[label].to_f64_lossy().max(f64::MIN_POSITIVE)).ln();
        loss_xent = Some(ce);
        total += lambda_xent * ce;
        if let (Some(d), Some(inv_b)) = (d_cls.as_mut(), inv_b) {
            // d/dẑ λ·CE = λ·headᵀ(p − onehot)
            let scale = T::val(lambda_xent * inv_b);
            for (j, &p) in probs.iter().enumerate() {
                let coeff = scale * (p - if j == label { T::one() } else { T::zero() });
                for (i, &h) in head.row(j).iter().enumerate() {
                    d.set(i, d.get(i) + coeff * h);
                }
            }
        }
    }

    Ok((
        LossParts {
            total,
            cls: loss_cls,
            patch: loss_patch,
            xent: loss_xent,
        },
        d_cls,
        d_patch,
    ))
}

// ---------------------------------------------------------------------------
// Forward with tape
// ---------------------------------------------------------------------------

struct LnTape<T> {
    xhat: DenseMatrix<T>,
    inv_std: Vec<T>,
    out: DenseMatrix<T>,
}

struct AttnTape<T> {
    qkv: DenseMatrix<T>,
    probs: Vec<DenseMatrix<T>>,
    concat: DenseMatrix<T>,
}

struct BlockTape<T> {
    ln1: LnTape<T>,
    attn: AttnTape<T>,
    ln2: LnTape<T>,
    hidden_pre: DenseMatrix<T>,
    hidden_act: DenseMatrix<T>,
}

struct SampleTape<T> {
    patches: DenseMatrix<T>,
    blocks: Vec<BlockTape<T>>,
    final_ln: LnTape<T>,
}

fn layernorm_fwd<T: Scalar>(
    x: &DenseMatrix<T>,
    gain: &DenseVector<T>,
    bias: &DenseVector<T>,
) -> LnTape<T> {
    let (rows, cols) = x.shape();
    debug_assert_eq!(gain.len(), cols);
    let mut xhat = DenseMatrix::zeros(rows, cols);
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let inv_c = T::val(1.0 / cols as f64);
    for i in 0..rows {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_c;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let s = T::one() / (var + T::val(LN_EPS)).sqrt();
        inv_std.push(s);
        let xh = xhat.row_mut(i);
        let o = out.row_mut(i);
        for j in 0..cols {
            xh[j] = (row[j] - mean) * s;
            o[j] = gain.get(j) * xh[j] + bias.get(j);
        }
    }
    LnTape { xhat, inv_std, out }
}

/// dL/dx plus parameter gradients for one layernorm application.
fn layernorm_bwd<T: Scalar>(
    tape: &LnTape<T>,
    gain: &DenseVector<T>,
    dy: &DenseMatrix<T>,
) -> (DenseMatrix<T>, DenseVector<T>, DenseVector<T>) {
    let (rows, cols) = dy.shape();
    let mut dx = DenseMatrix::zeros(rows, cols);
    let mut dgain = DenseVector::zeros(cols);
    let mut dbias = DenseVector::zeros(cols);
    let inv_c = T::val(1.0 / cols as f64);
    for i in 0..rows {
        let dyr = dy.row(i);
        let xh = tape.xhat.row(i);
        for j in 0..cols {
            dgain.set(j, dgain.get(j) + dyr[j] * xh[j]);
            dbias.set(j, dbias.get(j) + dyr[j]);
        }
        // dx = s·(dx̂ − mean(dx̂) − x̂·mean(dx̂⊙x̂)) with dx̂ = dy⊙gain
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..cols {
            let dxh = dyr[j] * gain.get(j);
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh *= inv_c;
        mean_dxh_xh *= inv_c;
        let s = tape.inv_std[i];
        let dxr = dx.row_mut(i);
        for j in 0..cols {
            let dxh = dyr[j] * gain.get(j);
            dxr[j] = s * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (dx, dgain, dbias)
}

/// `y = x·Wᵀ + b` for row-major token matrices and out×in weights.
fn affine<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    b: &DenseVector<T>,
) -> Result<DenseMatrix<T>> {
    let mut y = matmul_nt(x, w)?;
    for i in 0..y.rows() {
        for (v, &bias) in y.row_mut(i).iter_mut().zip(b.as_slice()) {
            *v += bias;
        }
    }
    Ok(y)
}

fn column_sums<T: Scalar>(m: &DenseMatrix<T>) -> DenseVector<T> {
    let mut out = DenseVector::zeros(m.cols());
    for i in 0..m.rows() {
        for (j, &v) in m.row(i).iter().enumerate() {
            out.set(j, out.get(j) + v);
        }
    }
    out
}

/// Copies columns `[col0, col0+width)` into a fresh matrix.
fn col_block<T: Scalar>(m: &DenseMatrix<T>, col0: usize, width: usize) -> DenseMatrix<T> {
    let mut out = DenseMatrix::zeros(m.rows(), width);
    for i in 0..m.rows() {
        out.row_mut(i)
            .copy_from_slice(&m.row(i)[col0..col0 + width]);
    }
    out
}

fn add_col_block<T: Scalar>(dst: &mut DenseMatrix<T>, col0: usize, src: &DenseMatrix<T>) {
    for i in 0..src.rows() {
        let d = &mut dst.row_mut(i)[col0..col0 + src.cols()];
        for (a, &b) in d.iter_mut().zip(src.row(i)) {
            *a += b;
        }
    }
}

fn softmax_bwd_rows<T: Scalar>(a: &DenseMatrix<T>, da: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut dx = DenseMatrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let ar = a.row(i);
        let dar = da.row(i);
        let inner = crate::linalg::dot(ar, dar);
        let dxr = dx.row_mut(i);
        for j in 0..ar.len() {
            dxr[j] = ar[j] * (dar[j] - inner);
        }
    }
    dx
}

fn attention_fwd<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &AttentionWeights<T>,
) -> Result<(DenseMatrix<T>, AttnTape<T>)> {
    let c = x.cols();
    let heads = w.heads;
    let d = c / heads;
    let scale = T::val(1.0 / (d as f64).sqrt());
    let qkv = affine(x, &w.w_qkv, &w.b_qkv)?;
    let mut probs = Vec::with_capacity(heads);
    let mut concat = DenseMatrix::zeros(x.rows(), c);
    for h in 0..heads {
        let q = col_block(&qkv, h * d, d);
        let k = col_block(&qkv, c + h * d, d);
        let v = col_block(&qkv, 2 * c + h * d, d);
        let mut scores = matmul_nt(&q, &k)?;
        scores.scale_in_place(scale);
        let a = softmax_rows(&scores);
        let head_out = matmul(&a, &v)?;
        add_col_block(&mut concat, h * d, &head_out);
        probs.push(a);
    }
    let out = affine(&concat, &w.w_proj, &w.b_proj)?;
    Ok((out, AttnTape { qkv, probs, concat }))
}

struct AttnGrads<T> {
    dx: DenseMatrix<T>,
    dw_qkv: DenseMatrix<T>,
    db_qkv: DenseVector<T>,
    dw_proj: DenseMatrix<T>,
    db_proj: DenseVector<T>,
}

fn attention_bwd<T: Scalar>(
    tape: &AttnTape<T>,
    x: &DenseMatrix<T>,
    w: &AttentionWeights<T>,
    dy: &DenseMatrix<T>,
) -> AttnGrads<T> {
    let c = x.cols();
    let heads = w.heads;
    let d = c / heads;
    let scale = T::val(1.0 / (d as f64).sqrt());
    let dw_proj = matmul_tn(dy, &tape.concat).expect("proj backward shapes");
    let db_proj = column_sums(dy);
    let d_concat = matmul(dy, &w.w_proj).expect("proj backward shapes");
    let mut d_qkv = DenseMatrix::zeros(dy.rows(), 3 * c);
    for h in 0..heads {
        let q = col_block(&tape.qkv, h * d, d);
        let k = col_block(&tape.qkv, c + h * d, d);
        let v = col_block(&tape.qkv, 2 * c + h * d, d);
        let a = &tape.probs[h];
        let d_head = col_block(&d_concat, h * d, d);
        let da = matmul_nt(&d_head, &v).expect("attention backward shapes");
        let dv = matmul_tn(a, &d_head).expect("attention backward shapes");
        let mut ds = softmax_bwd_rows(a, &da);
        ds.scale_in_place(scale);
        let dq = matmul(&ds, &k).expect("attention backward shapes");
        let dk = matmul_tn(&ds, &q).expect("attention backward shapes");
        add_col_block(&mut d_qkv, h * d, &dq);
        add_col_block(&mut d_qkv, c + h * d, &dk);
        add_col_block(&mut d_qkv, 2 * c + h * d, &dv);
    }
    let dw_qkv = matmul_tn(&d_qkv, x).expect("qkv backward shapes");
    let db_qkv = column_sums(&d_qkv);
    let dx = matmul(&d_qkv, &w.w_qkv).expect("qkv backward shapes");
    AttnGrads {
        dx,
        dw_qkv,
        db_qkv,
        dw_proj,
        db_proj,
    }
}

fn forward_sample<T: Scalar>(
    model: &Model<T>,
    image: &[T],
) -> Result<(ForwardOutput<T>, SampleTape<T>)> {
    let cfg = &model.config;
    let c = cfg.embed_dim;
    let l = cfg.seq_len;
    let patches = patchify(image, cfg)?;
    let embedded = affine(&patches, &model.patch_embed, &model.patch_embed_bias)?;
    let mut x = DenseMatrix::zeros(l, c);
    x.row_mut(0).copy_from_slice(model.cls_token.as_slice());
    for i in 1..l {
        x.row_mut(i).copy_from_slice(embedded.row(i - 1));
    }
    x.add_in_place(&model.pos_embed);

    let mut blocks = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        let ln1 = layernorm_fwd(&x, &b.ln1_gain, &b.ln1_bias);
        let (attn_out, attn) = attention_fwd(&ln1.out, &b.attn)?;
        x.add_in_place(&attn_out);
        let ln2 = layernorm_fwd(&x, &b.ln2_gain, &b.ln2_bias);
        let hidden_pre = affine(&ln2.out, &b.mlp.w_hidden, &b.mlp.b_hidden)?;
        let mut hidden_act = hidden_pre.clone();
        for v in hidden_act.data_mut() {
            *v = gelu(*v);
        }
        let mlp_out = affine(&hidden_act, &b.mlp.w_output, &b.mlp.b_output)?;
        x.add_in_place(&mlp_out);
        blocks.push(BlockTape {
            ln1,
            attn,
            ln2,
            hidden_pre,
            hidden_act,
        });
    }
    let final_ln = layernorm_fwd(&x, &model.final_ln_gain, &model.final_ln_bias);
    let cls = DenseVector::from_vec(final_ln.out.row(0).to_vec());
    let mut patch = DenseMatrix::zeros(l - 1, c);
    for i in 1..l {
        patch.row_mut(i - 1).copy_from_slice(final_ln.out.row(i));
    }
    Ok((
        ForwardOutput { cls, patch },
        SampleTape {
            patches,
            blocks,
            final_ln,
        },
    ))
}

fn backward_sample<T: Scalar>(
    model: &Model<T>,
    tape: &SampleTape<T>,
    d_cls: &DenseVector<T>,
    d_patch: &DenseMatrix<T>,
    grads: &mut Model<T>,
) {
    let cfg = &model.config;
    let l = cfg.seq_len;
    let c = cfg.embed_dim;
    // Reassemble the output gradient and pull it through the final norm.
    let mut d_out = DenseMatrix::zeros(l, c);
    d_out.row_mut(0).copy_from_slice(d_cls.as_slice());
    for i in 1..l {
        d_out.row_mut(i).copy_from_slice(d_patch.row(i - 1));
    }
    let (mut dx, dg, db) = layernorm_bwd(&tape.final_ln, &model.final_ln_gain, &d_out);
    grads.final_ln_gain.add_in_place(&dg);
    grads.final_ln_bias.add_in_place(&db);

    for (bi, b) in model.blocks.iter().enumerate().rev() {
        let t = &tape.blocks[bi];
        let g = &mut grads.blocks[bi];
        // MLP branch: x_out = x_mid + W_outᵀ·gelu(W_hidᵀ·LN2(x_mid) + b) + b
        let d_mlp_out = &dx; // residual passes dx through unchanged
        g.mlp
            .w_output
            .add_in_place(&matmul_tn(d_mlp_out, &t.hidden_act).expect("mlp backward shapes"));
        g.mlp.b_output.add_in_place(&column_sums(d_mlp_out));
        let mut d_hidden = matmul(d_mlp_out, &b.mlp.w_output).expect("mlp backward shapes");
        for (dh, &pre) in d_hidden.data_mut().iter_mut().zip(t.hidden_pre.data()) {
            *dh *= gelu_prime(pre);
        }
        g.mlp
            .w_hidden
            .add_in_place(&matmul_tn(&d_hidden, &t.ln2.out).expect("mlp backward shapes"));
        g.mlp.b_hidden.add_in_place(&column_sums(&d_hidden));
        let d_ln2_out = matmul(&d_hidden, &b.mlp.w_hidden).expect("mlp backward shapes");
        let (d_mid_ln, dg2, db2) = layernorm_bwd(&t.ln2, &b.ln2_gain, &d_ln2_out);
        g.ln2_gain.add_in_place(&dg2);
        g.ln2_bias.add_in_place(&db2);
        dx.add_in_place(&d_mid_ln); // d(x_mid) = dx_out + LN2 path

        // Attention branch: x_mid = x_in + Attn(LN1(x_in))
        let ag = attention_bwd(&t.attn, &t.ln1.out, &b.attn, &dx);
        g.attn.w_qkv.add_in_place(&ag.dw_qkv);
        g.attn.b_qkv.add_in_place(&ag.db_qkv);
        g.attn.w_proj.add_in_place(&ag.dw_proj);
        g.attn.b_proj.add_in_place(&ag.db_proj);
        let (d_in_ln, dg1, db1) = layernorm_bwd(&t.ln1, &b.ln1_gain, &ag.dx);
        g.ln1_gain.add_in_place(&dg1);
        g.ln1_bias.add_in_place(&db1);
        dx.add_in_place(&d_in_ln); // d(x_in) = d(x_mid) + LN1 path
    }

    // Embeddings: tokens = [cls; patches·W_peᵀ + b_pe] + pos
    grads.pos_embed.add_in_place(&dx);
    for (gc, &d) in grads.cls_token.as_mut_slice().iter_mut().zip(dx.row(0)) {
        *gc += d;
    }
    let mut d_embed = DenseMatrix::zeros(l - 1, c);
    for i in 1..l {
        d_embed.row_mut(i - 1).copy_from_slice(dx.row(i));
    }
    grads
        .patch_embed
        .add_in_place(&matmul_tn(&d_embed, &tape.patches).expect("embed backward shapes"));
    grads.patch_embed_bias.add_in_place(&column_sums(&d_embed));
}
