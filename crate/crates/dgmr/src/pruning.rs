//! Neuron selection and structural slicing for MLP hidden layers.
//!
//! The main entry point is [`select_dgmr`]: greedy diversity-guided
//! selection. Each step picks the hidden neuron whose working-matrix row has
//! the largest ℓ2 norm, then eliminates that row's direction from every other
//! row (Gram-Schmidt), so later picks are judged only on weight directions
//! not yet captured. An N-dimensional row space supports at most N such
//! eliminations, so after every N selections the working matrix is rebuilt
//! from the original rows of the still-unselected neurons and the cycle
//! starts over.
//!
//! [`select_l2`], [`select_random`] and [`select_taylor`] are the baseline
//! criteria; [`prune_mlp`] / [`prune_model`] apply any selection
//! structurally: hidden rows and bias entries are gathered, output columns
//! follow, and the output bias is untouched.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eliminate_component_in_place, row_l2_norms, DenseMatrix, DenseVector};
use crate::model::{MlpWeights, Model};
use crate::scalar::Scalar;

/// Default degenerate-pivot threshold, relative to the mean original row
/// norm. Residuals at or below the absolute threshold trigger an early reset
/// instead of being selected.
pub const DEFAULT_EPS_REL: f64 = 1e-10;

/// Audit trail of one selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected neuron indices, in selection order. No duplicates.
    pub selected: Vec<usize>,
    /// Selection metric at each step: the residual ℓ2 norm for the
    /// diversity-guided criterion, the original row norm for ℓ2, the
    /// importance score for Taylor, and 0 for random.
    pub residual_norm_log: Vec<f64>,
    /// Step indices (i.e. `selected.len()` at the time) where the working
    /// matrix was rebuilt from unselected original rows.
    pub resets: Vec<usize>,
}

impl SelectionResult {
    /// Number of selected neurons.
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.residual_norm_log.len() != self.selected.len() {
            return Err(Error::InvalidConfig(format!(
                "residual log length {} != selection length {}",
                self.residual_norm_log.len(),
                self.selected.len()
            )));
        }
        let mut seen = vec![false; hidden];
        for &i in &self.selected {
            if i >= hidden {
                return Err(Error::IndexOutOfRange {
                    what: "selected neuron",
                    index: i,
                    size: hidden,
                });
            }
            if seen[i] {
                return Err(Error::InvalidConfig(format!("neuron {i} selected twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Diversity-guided selection (greedy argmax norm + Gram-Schmidt
/// elimination + reset).
///
/// `eps_rel` scales the degenerate-pivot threshold; see [`DEFAULT_EPS_REL`].
/// Ties at the argmax go to the lowest neuron index. Returns an error when
/// `target` exceeds the number of rows, or when every still-unselected
/// original row is numerically zero before `target` is reached.
pub fn select_dgmr<T: Scalar>(
    w_hidden: &DenseMatrix<T>,
    target: usize,
    eps_rel: f64,
) -> Result<SelectionResult> {
    Ok(select_dgmr_traced(w_hidden, target, eps_rel)?.0)
}

/// [`select_dgmr`] plus the residual vector stored at every selection step,
/// grouped by reset cycle. The trace is what the orthogonality tests
/// inspect; the selection itself is identical.
#[allow(clippy::type_complexity)]
pub fn select_dgmr_traced<T: Scalar>(
    w_hidden: &DenseMatrix<T>,
    target: usize,
    eps_rel: f64,
) -> Result<(SelectionResult, Vec<Vec<DenseVector<T>>>)> {
    let m = w_hidden.rows();
    let n = w_hidden.cols();
    if target < 1 || target > m {
        return Err(Error::TargetOutOfRange { target, max: m });
    }
    let norms = row_l2_norms(w_hidden);
    let mean_norm = norms.as_slice().iter().copied().sum::<T>() / T::val(m as f64);
    let eps = T::val(eps_rel) * mean_norm;

    let rebuild = |is_selected: &[bool]| -> (DenseMatrix<T>, Vec<usize>) {
        let idx: Vec<usize> = (0..m).filter(|&i| !is_selected[i]).collect();
        let v = w_hidden
            .gather_rows(&idx)
            .expect("indices come from the row range");
        (v, idx)
    };

    let mut is_selected = vec![false; m];
    let mut selected = Vec::with_capacity(target);
    let mut log = Vec::with_capacity(target);
    let mut resets = Vec::new();
    let mut cycles: Vec<Vec<DenseVector<T>>> = vec![Vec::new()];
    let (mut v, mut rowmap) = rebuild(&is_selected);
    let mut cycle_count = 0usize;

    while selected.len() < target {
        // Argmax residual norm; scanning in ascending original-index order
        // with a strict comparison gives the lowest index at ties.
        let mut best: Option<(usize, T)> = None;
        for (r, norm) in row_l2_norms(&v).as_slice().iter().enumerate() {
            if *norm > eps && best.is_none_or(|(_, b)| *norm > b) {
                best = Some((r, *norm));
            }
        }
        let Some((r, norm)) = best else {
            // Residual space exhausted before the scheduled reset. On a
            // fresh cycle this means the remaining original rows themselves
            // are numerically zero: no further progress is possible.
            if cycle_count == 0 {
                return Err(Error::RankExhausted {
                    selectable: selected.len(),
                    requested: target,
                });
            }
            resets.push(selected.len());
            (v, rowmap) = rebuild(&is_selected);
            cycle_count = 0;
            cycles.push(Vec::new());
            continue;
        };
        let neuron = rowmap[r];
        debug_assert!(!is_selected[neuron], "neuron {neuron} selected twice");
        is_selected[neuron] = true;
        selected.push(neuron);
        log.push(norm.to_f64_lossy());
        cycles
            .last_mut()
            .expect("cycle list starts non-empty")
            .push(DenseVector::from_vec(v.row(r).to_vec()));
        cycle_count += 1;
        if selected.len() == target {
            break;
        }
        if cycle_count == n {
            // Scheduled reset: N orthogonal directions exhaust the row
            // space, so elimination would zero everything anyway.
            resets.push(selected.len());
            (v, rowmap) = rebuild(&is_selected);
            cycle_count = 0;
            cycles.push(Vec::new());
        } else {
            eliminate_component_in_place(&mut v, r, eps * eps)?;
        }
    }

    let result = SelectionResult {
        selected,
        residual_norm_log: log,
        resets,
    };
    debug_assert!(result.validate(m).is_ok());
    Ok((result, cycles))
}

/// Magnitude baseline: top-`target` rows by original ℓ2 norm, descending,
/// ties to the lowest index. No elimination.
pub fn select_l2<T: Scalar>(w_hidden: &DenseMatrix<T>, target: usize) -> Result<SelectionResult> {
    let m = w_hidden.rows();
    if target < 1 || target > m {
        return Err(Error::TargetOutOfRange { target, max: m });
    }
    let norms = row_l2_norms(w_hidden);
    let order = sort_desc_stable(norms.as_slice());
    let selected: Vec<usize> = order[..target].to_vec();
    let log = selected
        .iter()
        .map(|&i| norms.get(i).to_f64_lossy())
        .collect();
    Ok(SelectionResult {
        selected,
        residual_norm_log: log,
        resets: Vec::new(),
    })
}

/// Random baseline: uniform sample without replacement, seeded.
pub fn select_random(m: usize, target: usize, seed: u64) -> Result<SelectionResult> {
    use rand::{Rng, SeedableRng};
    if target < 1 || target > m {
        return Err(Error::TargetOutOfRange { target, max: m });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..m).collect();
    // Partial Fisher-Yates: the first `target` entries are a uniform sample.
    for i in 0..target {
        let j = rng.gen_range(i..m);
        idx.swap(i, j);
    }
    idx.truncate(target);
    Ok(SelectionResult {
        selected: idx,
        residual_norm_log: vec![0.0; target],
        resets: Vec::new(),
    })
}

/// First-order Taylor baseline: importance per neuron is Σ_k |w·g| over its
/// row; top-`target` descending, ties to the lowest index.
pub fn select_taylor<T: Scalar>(
    w_hidden: &DenseMatrix<T>,
    hidden_grads: &DenseMatrix<T>,
    target: usize,
) -> Result<SelectionResult> {
    if w_hidden.shape() != hidden_grads.shape() {
        return Err(Error::ShapeMismatch {
            op: "select_taylor",
            left: format!("weights {}x{}", w_hidden.rows(), w_hidden.cols()),
            right: format!("grads {}x{}", hidden_grads.rows(), hidden_grads.cols()),
        });
    }
    let m = w_hidden.rows();
    if target < 1 || target > m {
        return Err(Error::TargetOutOfRange { target, max: m });
    }
    let importance: Vec<T> = (0..m)
        .map(|i| {
            w_hidden
                .row(i)
                .iter()
                .zip(hidden_grads.row(i))
                .map(|(&w, &g)| (w * g).abs())
                .sum()
        })
        .collect();
    let order = sort_desc_stable(&importance);
    let selected: Vec<usize> = order[..target].to_vec();
    let log = selected
        .iter()
        .map(|&i| importance[i].to_f64_lossy())
        .collect();
    Ok(SelectionResult {
        selected,
        residual_norm_log: log,
        resets: Vec::new(),
    })
}

/// Indices sorted by score descending; equal scores keep ascending index
/// order (stable sort).
fn sort_desc_stable<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("selection scores are finite")
    });
    order
}

/// Applies a selection to one MLP: gathers hidden rows, hidden bias entries
/// and output columns in selection order; the output bias is copied
/// unchanged (removing a hidden neuron removes a summand, not an output
/// coordinate).
pub fn prune_mlp<T: Scalar>(
    mlp: &MlpWeights<T>,
    selection: &SelectionResult,
) -> Result<MlpWeights<T>> {
    selection.validate(mlp.hidden())?;
    Ok(MlpWeights {
        w_hidden: mlp.w_hidden.gather_rows(&selection.selected)?,
        b_hidden: mlp.b_hidden.gather(&selection.selected)?,
        w_output: mlp.w_output.gather_cols(&selection.selected)?,
        b_output: mlp.b_output.clone(),
    })
}

/// Selection criterion for [`prune_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneCriterion {
    Dgmr,
    L2,
    Random,
    Taylor,
}

impl PruneCriterion {
    pub const NAMES: [&'static str; 4] = ["dgmr", "l2", "random", "taylor"];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dgmr => "dgmr",
            Self::L2 => "l2",
            Self::Random => "random",
            Self::Taylor => "taylor",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "dgmr" => Ok(Self::Dgmr),
            "l2" => Ok(Self::L2),
            "random" => Ok(Self::Random),
            "taylor" => Ok(Self::Taylor),
            _ => Err(Error::InvalidArgument(format!(
                "unknown criterion '{name}' (expected one of: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

/// Knobs for [`prune_model`] that only some criteria use.
#[derive(Debug, Clone)]
pub struct PruneOptions<'a, T> {
    /// Degenerate-pivot threshold for the diversity-guided criterion.
    pub eps_rel: f64,
    /// Seed for the random criterion. Block `i` samples with seed
    /// `seed + i` so blocks stay independent and reproducible.
    pub seed: u64,
    /// Accumulated hidden-weight gradients for the Taylor criterion; must
    /// be a gradient container shaped like the model being pruned.
    pub taylor_grads: Option<&'a Model<T>>,
}

impl<T> Default for PruneOptions<'_, T> {
    fn default() -> Self {
        Self {
            eps_rel: DEFAULT_EPS_REL,
            seed: 0,
            taylor_grads: None,
        }
    }
}

/// What [`prune_model`] did, serializable for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub criterion: String,
    pub target_ratio: f64,
    /// Hidden width after pruning, `round(r·C)`.
    pub target_hidden: usize,
    /// Present when `r·C` was not an integer and had to be rounded.
    pub rounding_note: Option<String>,
    pub original_params: u64,
    pub pruned_params: u64,
    pub original_flops: u64,
    pub pruned_flops: u64,
    /// Seed used by the random criterion.
    pub seed: Option<u64>,
    /// Per-block selection audit trails (absent for the random criterion,
    /// which is fully described by its seed).
    pub selections: Option<Vec<SelectionResult>>,
}

/// Prunes every block's MLP independently to `round(r·C)` hidden neurons.
///
/// `r` is the target expansion ratio: pruned hidden width over embedding
/// width. Attention, norms and embeddings pass through untouched. Blocks are
/// processed in parallel; each block's selection is deterministic on its
/// own, so the result does not depend on scheduling.
pub fn prune_model<T: Scalar>(
    model: &Model<T>,
    criterion: PruneCriterion,
    r: f64,
    options: &PruneOptions<'_, T>,
) -> Result<(Model<T>, PruneReport)> {
    let c = model.config.embed_dim;
    let m = model.config.mlp_hidden;
    if !r.is_finite() || r <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "expansion ratio must be positive, got {r}"
        )));
    }
    let exact = r * c as f64;
    let target = exact.round() as usize;
    if target < 1 || target > m {
        return Err(Error::TargetOutOfRange { target, max: m });
    }
    let rounding_note = if (exact - target as f64).abs() > 1e-9 {
        Some(format!(
            "target r·C = {exact} is not an integer; rounded to {target} neurons"
        ))
    } else {
        None
    };
    if criterion == PruneCriterion::Taylor && options.taylor_grads.is_none() {
        return Err(Error::InvalidArgument(
            "taylor criterion requires accumulated gradients (taylor_grads)".into(),
        ));
    }
    if let Some(g) = options.taylor_grads {
        if g.config != model.config {
            return Err(Error::IncompatibleModels(
                "taylor gradient container does not match the model architecture".into(),
            ));
        }
    }

    let per_block: Vec<(MlpWeights<T>, SelectionResult)> = model
        .blocks
        .par_iter()
        .enumerate()
        .map(|(i, block)| -> Result<(MlpWeights<T>, SelectionResult)> {
            let sel = match criterion {
                PruneCriterion::Dgmr => select_dgmr(&block.mlp.w_hidden, target, options.eps_rel)?,
                PruneCriterion::L2 => select_l2(&block.mlp.w_hidden, target)?,
                PruneCriterion::Random => {
                    select_random(m, target, options.seed.wrapping_add(i as u64))?
                }
                PruneCriterion::Taylor => {
                    let grads = options.taylor_grads.expect("checked above");
                    select_taylor(&block.mlp.w_hidden, &grads.blocks[i].mlp.w_hidden, target)?
                }
            };
            let mlp = prune_mlp(&block.mlp, &sel)?;
            Ok((mlp, sel))
        })
        .collect::<Result<_>>()?;

    let mut pruned = model.clone();
    pruned.config.mlp_hidden = target;
    let mut selections = Vec::with_capacity(per_block.len());
    for (block, (mlp, sel)) in pruned.blocks.iter_mut().zip(per_block) {
        block.mlp = mlp;
        selections.push(sel);
    }
    pruned.validate()?;

    let report = PruneReport {
        criterion: criterion.name().to_string(),
        target_ratio: r,
        target_hidden: target,
        rounding_note,
        original_params: model.config.param_count(None),
        pruned_params: pruned.config.param_count(None),
        original_flops: model.config.flops_estimate(None),
        pruned_flops: pruned.config.flops_estimate(None),
        seed: (criterion == PruneCriterion::Random).then_some(options.seed),
        selections: (criterion != PruneCriterion::Random).then_some(selections),
    };
    debug_assert!(report.pruned_params <= report.original_params);
    debug_assert!(report.pruned_flops <= report.original_flops);
    Ok((pruned, report))
}
