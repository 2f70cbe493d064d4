//! Architecture description, weight containers and compression accounting.
//!
//! A [`Model`] is a plain pre-norm vision transformer: patch embedding, class
//! token, learned positional embedding, a stack of attention + MLP blocks,
//! and a final layernorm. Only the MLP hidden layer is ever pruned; the rest
//! of the structure exists so the pruned model can be trained and evaluated
//! end to end.
//!
//! [`ModelConfig::param_count`] and [`ModelConfig::flops_estimate`] implement
//! the compression arithmetic: both take an optional expansion-ratio override
//! `r` that prices a hypothetical model whose MLP hidden width is
//! `round(r·C)` without building it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::scalar::Scalar;

/// Input channels; images are always RGB here.
pub const IN_CHANS: usize = 3;

/// Architecture hyperparameters.
///
/// `seq_len` counts the class token, so it is `(image_size/patch_size)² + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn new(
        embed_dim: usize,
        depth: usize,
        heads: usize,
        mlp_hidden: usize,
        patch_size: usize,
        image_size: usize,
    ) -> Result<Self> {
        let cfg = Self {
            embed_dim,
            depth,
            heads,
            mlp_hidden,
            patch_size,
            image_size,
            seq_len: 0,
        };
        let cfg = Self {
            seq_len: cfg.num_patches_checked()? + 1,
            ..cfg
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn num_patches_checked(&self) -> Result<usize> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        let side = self.image_size / self.patch_size;
        Ok(side * side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig(
                "all dimensions must be at least 1".into(),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        let expect_len = self.num_patches_checked()? + 1;
        if self.seq_len != expect_len {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} inconsistent with image/patch size (expected {expect_len})",
                self.seq_len
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn num_patches(&self) -> usize {
        self.seq_len - 1
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Flattened patch length, the patch-embedding fan-in.
    #[inline]
    pub fn patch_dim(&self) -> usize {
        IN_CHANS * self.patch_size * self.patch_size
    }

    /// MLP hidden width priced by an override ratio: `round(r·C)`.
    fn hidden_for(&self, mlp_ratio_override: Option<f64>) -> u64 {
        match mlp_ratio_override {
            Some(r) => (r * self.embed_dim as f64).round() as u64,
            None => self.mlp_hidden as u64,
        }
    }

    /// Exact parameter count, optionally at a hypothetical expansion ratio.
    ///
    /// Patch embedding (weight + bias), class token, positional embedding,
    /// per block two layernorms + fused-qkv attention (4C² + 4C) + MLP
    /// (2CM + M + C), and the final layernorm.
    pub fn param_count(&self, mlp_ratio_override: Option<f64>) -> u64 {
        let c = self.embed_dim as u64;
        let l = self.seq_len as u64;
        let m = self.hidden_for(mlp_ratio_override);
        let patch_embed = c * self.patch_dim() as u64 + c;
        let cls = c;
        let pos = l * c;
        let norms = 4 * c; // two layernorms per block
        let attn = 4 * c * c + 4 * c;
        let mlp = 2 * c * m + m + c;
        patch_embed + cls + pos + self.depth as u64 * (norms + attn + mlp) + 2 * c
    }

    /// Forward-pass FLOPs at this config's sequence length, optionally at a
    /// hypothetical expansion ratio.
    ///
    /// Counts multiply-accumulate pairs as 2 FLOPs. Per block: qkv + output
    /// projections 8LC², attention score and value products 4L²C, MLP 4LCM,
    /// plus 8LC per layernorm. The patch embedding costs 2LC·patch_dim and
    /// the final layernorm another 8LC.
    pub fn flops_estimate(&self, mlp_ratio_override: Option<f64>) -> u64 {
        let c = self.embed_dim as u64;
        let l = self.seq_len as u64;
        let m = self.hidden_for(mlp_ratio_override);
        let embed = 2 * l * c * self.patch_dim() as u64;
        let attn = 8 * l * c * c + 4 * l * l * c;
        let mlp = 4 * l * c * m;
        let norms = 2 * 8 * l * c;
        embed + self.depth as u64 * (attn + mlp + norms) + 8 * l * c
    }
}

/// Published-architecture and toy preset names, in the order `preset` lists
/// them in its error message.
pub const PRESET_NAMES: [&str; 7] = [
    "openclip-g",
    "openclip-G",
    "eva-clip-E",
    "eva-clip-8B",
    "dinov2-g",
    "toy-small",
    "toy-medium",
];

/// Looks up a named architecture.
///
/// The published presets carry the models' known configurations
/// (width/depth/heads/MLP width at patch 14, image 224). The `eva-clip-8B`
/// vision tower's dimensions are not printed anywhere authoritative in one
/// place; the values below (C=4096, depth 32, MLP 20480) reproduce its
/// reported 7.5B parameter count and are documented as reconstructed.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let (c, depth, heads, m, p, img) = match name {
        "openclip-g" => (1408, 40, 16, 6144, 14, 224),
        "openclip-G" => (1664, 48, 16, 8192, 14, 224),
        "eva-clip-E" => (1792, 64, 16, 15360, 14, 224),
        "eva-clip-8B" => (4096, 32, 32, 20480, 14, 224),
        "dinov2-g" => (1536, 40, 24, 4096, 14, 224),
        "toy-small" => (16, 2, 2, 64, 4, 16),
        "toy-medium" => (32, 4, 4, 128, 4, 28),
        _ => {
            return Err(Error::UnknownPreset {
                name: name.to_string(),
                valid: PRESET_NAMES.join(", "),
            })
        }
    };
    ModelConfig::new(c, depth, heads, m, p, img)
}

/// The quadruple the pruning equations act on.
///
/// `w_hidden` is M×N (one row per hidden neuron), `w_output` N×M; both use
/// the out×in storage convention, so forward passes multiply by the
/// transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights<T> {
    pub w_hidden: DenseMatrix<T>,
    pub b_hidden: DenseVector<T>,
    pub w_output: DenseMatrix<T>,
    pub b_output: DenseVector<T>,
}

impl<T: Scalar> MlpWeights<T> {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            w_hidden: DenseMatrix::zeros(hidden, dim),
            b_hidden: DenseVector::zeros(hidden),
            w_output: DenseMatrix::zeros(dim, hidden),
            b_output: DenseVector::zeros(dim),
        }
    }

    /// Hidden width M.
    pub fn hidden(&self) -> usize {
        self.w_hidden.rows()
    }

    /// Input/output width N.
    pub fn dim(&self) -> usize {
        self.w_hidden.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.w_hidden.shape();
        let ok =
            self.b_hidden.len() == m && self.w_output.shape() == (n, m) && self.b_output.len() == n;
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "inconsistent MLP shapes: w_hidden {m}x{n}, b_hidden {}, w_output {:?}, b_output {}",
                self.b_hidden.len(),
                self.w_output.shape(),
                self.b_output.len()
            )));
        }
        Ok(())
    }
}

/// Fused-qkv attention weights. Never pruned, only trained or frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub w_qkv: DenseMatrix<T>,
    pub b_qkv: DenseVector<T>,
    pub w_proj: DenseMatrix<T>,
    pub b_proj: DenseVector<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            w_qkv: DenseMatrix::zeros(3 * dim, dim),
            b_qkv: DenseVector::zeros(3 * dim),
            w_proj: DenseMatrix::zeros(dim, dim),
            b_proj: DenseVector::zeros(dim),
            heads,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let ok = self.w_qkv.shape() == (3 * dim, dim)
            && self.b_qkv.len() == 3 * dim
            && self.w_proj.shape() == (dim, dim)
            && self.b_proj.len() == dim
            && self.heads > 0
            && dim.is_multiple_of(self.heads);
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "inconsistent attention shapes for dim {dim} with {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gain: DenseVector<T>,
    pub ln1_bias: DenseVector<T>,
    pub attn: AttentionWeights<T>,
    pub ln2_gain: DenseVector<T>,
    pub ln2_bias: DenseVector<T>,
    pub mlp: MlpWeights<T>,
}

impl<T: Scalar> BlockWeights<T> {
    pub fn zeros(dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln1_gain: DenseVector::zeros(dim),
            ln1_bias: DenseVector::zeros(dim),
            attn: AttentionWeights::zeros(dim, heads),
            ln2_gain: DenseVector::zeros(dim),
            ln2_bias: DenseVector::zeros(dim),
            mlp: MlpWeights::zeros(hidden, dim),
        }
    }

    pub fn validate(&self, dim: usize, hidden: usize) -> Result<()> {
        if self.ln1_gain.len() != dim
            || self.ln1_bias.len() != dim
            || self.ln2_gain.len() != dim
            || self.ln2_bias.len() != dim
        {
            return Err(Error::InvalidConfig(format!(
                "layernorm parameter length != {dim}"
            )));
        }
        self.attn.validate(dim)?;
        self.mlp.validate()?;
        if self.mlp.dim() != dim || self.mlp.hidden() != hidden {
            return Err(Error::InvalidConfig(format!(
                "MLP is {}x{}, block expects hidden {hidden}, dim {dim}",
                self.mlp.hidden(),
                self.mlp.dim()
            )));
        }
        Ok(())
    }
}

/// Full model: config plus every weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub patch_embed: DenseMatrix<T>,
    pub patch_embed_bias: DenseVector<T>,
    pub cls_token: DenseVector<T>,
    pub pos_embed: DenseMatrix<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_ln_gain: DenseVector<T>,
    pub final_ln_bias: DenseVector<T>,
}

/// Coarse tensor grouping used by freeze masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    LayerNorm,
    Attention,
    Mlp,
}

/// Read-only view of one named parameter tensor.
pub struct ParamTensor<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Mutable view of one named parameter tensor.
pub struct ParamTensorMut<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a mut [T],
}

impl<T: Scalar> Model<T> {
    /// All-zero model of the given architecture.
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.embed_dim;
        Self {
            config: config.clone(),
            patch_embed: DenseMatrix::zeros(c, config.patch_dim()),
            patch_embed_bias: DenseVector::zeros(c),
            cls_token: DenseVector::zeros(c),
            pos_embed: DenseMatrix::zeros(config.seq_len, c),
            blocks: (0..config.depth)
                .map(|_| BlockWeights::zeros(c, config.heads, config.mlp_hidden))
                .collect(),
            final_ln_gain: DenseVector::zeros(c),
            final_ln_bias: DenseVector::zeros(c),
        }
    }

    /// Same-shaped all-zero model; the gradient/moment container.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = self.config.embed_dim;
        if self.patch_embed.shape() != (c, self.config.patch_dim())
            || self.patch_embed_bias.len() != c
            || self.cls_token.len() != c
            || self.pos_embed.shape() != (self.config.seq_len, c)
            || self.final_ln_gain.len() != c
            || self.final_ln_bias.len() != c
        {
            return Err(Error::InvalidConfig(
                "embedding/final-norm tensor shapes inconsistent with config".into(),
            ));
        }
        if self.blocks.len() != self.config.depth {
            return Err(Error::InvalidConfig(format!(
                "{} blocks, config depth {}",
                self.blocks.len(),
                self.config.depth
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(c, self.config.mlp_hidden)
                .map_err(|e| Error::InvalidConfig(format!("block {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.param_tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Actual parameter count, by summing tensor sizes.
    pub fn param_count(&self) -> u64 {
        self.param_tensors()
            .iter()
            .map(|t| t.data.len() as u64)
            .sum()
    }

    /// Every parameter tensor with a stable name, in canonical order.
    ///
    /// The order is fixed (embeddings, then blocks in depth order, then the
    /// final norm) and shared with [`Self::param_tensors_mut`], so zipping
    /// the two across a model and its gradient container pairs tensors up
    /// correctly.
    pub fn param_tensors(&self) -> Vec<ParamTensor<'_, T>> {
        use ParamGroup::*;
        let mut out = Vec::with_capacity(6 + 12 * self.blocks.len());
        out.push(mat(
            "patch_embed.weight".into(),
            Embedding,
            &self.patch_embed,
        ));
        out.push(vec_(
            "patch_embed.bias".into(),
            Embedding,
            &self.patch_embed_bias,
        ));
        out.push(vec_("cls_token".into(), Embedding, &self.cls_token));
        out.push(mat("pos_embed".into(), Embedding, &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(vec_(format!("blocks.{i}.ln1.gain"), LayerNorm, &b.ln1_gain));
            out.push(vec_(format!("blocks.{i}.ln1.bias"), LayerNorm, &b.ln1_bias));
            out.push(mat(
                format!("blocks.{i}.attn.qkv.weight"),
                Attention,
                &b.attn.w_qkv,
            ));
            out.push(vec_(
                format!("blocks.{i}.attn.qkv.bias"),
                Attention,
                &b.attn.b_qkv,
            ));
            out.push(mat(
                format!("blocks.{i}.attn.proj.weight"),
                Attention,
                &b.attn.w_proj,
            ));
            out.push(vec_(
                format!("blocks.{i}.attn.proj.bias"),
                Attention,
                &b.attn.b_proj,
            ));
            out.push(vec_(format!("blocks.{i}.ln2.gain"), LayerNorm, &b.ln2_gain));
            out.push(vec_(format!("blocks.{i}.ln2.bias"), LayerNorm, &b.ln2_bias));
            out.push(mat(
                format!("blocks.{i}.mlp.hidden.weight"),
                Mlp,
                &b.mlp.w_hidden,
            ));
            out.push(vec_(
                format!("blocks.{i}.mlp.hidden.bias"),
                Mlp,
                &b.mlp.b_hidden,
            ));
            out.push(mat(
                format!("blocks.{i}.mlp.output.weight"),
                Mlp,
                &b.mlp.w_output,
            ));
            out.push(vec_(
                format!("blocks.{i}.mlp.output.bias"),
                Mlp,
                &b.mlp.b_output,
            ));
        }
        out.push(vec_("final_ln.gain".into(), LayerNorm, &self.final_ln_gain));
        out.push(vec_("final_ln.bias".into(), LayerNorm, &self.final_ln_bias));
        out
    }

    /// Mutable twin of [`Self::param_tensors`], same order and names.
    pub fn param_tensors_mut(&mut self) -> Vec<ParamTensorMut<'_, T>> {
        use ParamGroup::*;
        let mut out = Vec::with_capacity(6 + 12 * self.blocks.len());
        out.push(ParamTensorMut {
            name: "patch_embed.weight".into(),
            group: Embedding,
            data: self.patch_embed.data_mut(),
        });
        out.push(ParamTensorMut {
            name: "patch_embed.bias".into(),
            group: Embedding,
            data: self.patch_embed_bias.as_mut_slice(),
        });
        out.push(ParamTensorMut {
            name: "cls_token".into(),
            group: Embedding,
            data: self.cls_token.as_mut_slice(),
        });
        out.push(ParamTensorMut {
            name: "pos_embed".into(),
            group: Embedding,
            data: self.pos_embed.data_mut(),
        });
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.ln1.gain"),
                group: LayerNorm,
                data: b.ln1_gain.as_mut_slice(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.ln1.bias"),
                group: LayerNorm,
                data: b.ln1_bias.as_mut_slice(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.attn.qkv.weight"),
                group: Attention,
                data: b.attn.w_qkv.data_mut(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.attn.qkv.bias"),
                group: Attention,
                data: b.attn.b_qkv.as_mut_slice(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.attn.proj.weight"),
                group: Attention,
                data: b.attn.w_proj.data_mut(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.attn.proj.bias"),
                group: Attention,
                data: b.attn.b_proj.as_mut_slice(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.ln2.gain"),
                group: LayerNorm,
                data: b.ln2_gain.as_mut_slice(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.ln2.bias"),
                group: LayerNorm,
                data: b.ln2_bias.as_mut_slice(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.mlp.hidden.weight"),
                group: Mlp,
                data: b.mlp.w_hidden.data_mut(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.mlp.hidden.bias"),
                group: Mlp,
                data: b.mlp.b_hidden.as_mut_slice(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.mlp.output.weight"),
                group: Mlp,
                data: b.mlp.w_output.data_mut(),
            });
            out.push(ParamTensorMut {
                name: format!("blocks.{i}.mlp.output.bias"),
                group: Mlp,
                data: b.mlp.b_output.as_mut_slice(),
            });
        }
        out.push(ParamTensorMut {
            name: "final_ln.gain".into(),
            group: LayerNorm,
            data: self.final_ln_gain.as_mut_slice(),
        });
        out.push(ParamTensorMut {
            name: "final_ln.bias".into(),
            group: LayerNorm,
            data: self.final_ln_bias.as_mut_slice(),
        });
        out
    }
}

/// Seeded Gaussian initialization.
///
/// One ChaCha8 stream per call, consumed in a fixed order: class token,
/// positional embedding, patch-embedding weight, then per block the qkv,
/// projection, MLP hidden and MLP output weights. Embedding draws use
/// std 0.02; linear weights use std 1/√fan_in. All biases start at zero and
/// layernorm gains at exactly 1, so those tensors draw nothing from the
/// stream.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Model<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::zeros(config);
    let embed_std = T::val(0.02);
    fill_gaussian(&mut rng, model.cls_token.as_mut_slice(), embed_std);
    fill_gaussian(&mut rng, model.pos_embed.data_mut(), embed_std);
    fill_gaussian(
        &mut rng,
        model.patch_embed.data_mut(),
        fan_in_std::<T>(config.patch_dim()),
    );
    let dim_std = fan_in_std::<T>(config.embed_dim);
    let hidden_std = fan_in_std::<T>(config.mlp_hidden);
    for b in &mut model.blocks {
        fill_gaussian(&mut rng, b.attn.w_qkv.data_mut(), dim_std);
        fill_gaussian(&mut rng, b.attn.w_proj.data_mut(), dim_std);
        fill_gaussian(&mut rng, b.mlp.w_hidden.data_mut(), dim_std);
        fill_gaussian(&mut rng, b.mlp.w_output.data_mut(), hidden_std);
        b.ln1_gain.as_mut_slice().fill(T::one());
        b.ln2_gain.as_mut_slice().fill(T::one());
    }
    model.final_ln_gain.as_mut_slice().fill(T::one());
    model
}

fn mat<T: Scalar>(name: String, group: ParamGroup, m: &DenseMatrix<T>) -> ParamTensor<'_, T> {
    ParamTensor {
        name,
        group,
        shape: vec![m.rows(), m.cols()],
        data: m.data(),
    }
}

fn vec_<T: Scalar>(name: String, group: ParamGroup, v: &DenseVector<T>) -> ParamTensor<'_, T> {
    ParamTensor {
        name,
        group,
        shape: vec![v.len()],
        data: v.as_slice(),
    }
}

fn fan_in_std<T: Scalar>(fan_in: usize) -> T {
    T::val(1.0 / (fan_in as f64).sqrt())
}

fn fill_gaussian<T: Scalar, R: Rng>(rng: &mut R, data: &mut [T], std: T) {
    for x in data {
        *x = T::standard_normal(rng) * std;
    }
}
