//! Evaluation and analysis: kNN classification over class-token embeddings,
//! teacher↔student functional distance, and PCA weight-diversity spectra.
//!
//! The kNN protocol is nearest-neighbor majority vote over cosine
//! similarity (Euclidean available as an option), k = 20 and a 90/10
//! train/eval split by default. Spectra treat each hidden neuron's input
//! weight vector as one observation and report the eigenvalues of the
//! centered covariance in descending order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{check_teacher_student, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{dot, matmul_tn, sym_eig_descending, DenseMatrix, DenseVector};
use crate::model::Model;
use crate::nn::{self, forward, LossTerms};
use crate::pruning::{select_dgmr, DEFAULT_EPS_REL};
use crate::scalar::Scalar;

/// Default neighbor count for the kNN protocol.
pub const DEFAULT_KNN_K: usize = 20;
/// Default fraction of samples assigned to the kNN train split.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;
/// Eigenvalues of the (positive semi-definite) covariance more negative
/// than this indicate a solver failure; anything in `[-1e-9, 0)` is clamped.
pub const SPECTRUM_CLAMP: f64 = -1e-9;

/// Class-token embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    pub vectors: DenseMatrix<T>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !self.vectors.is_finite() {
            return Err(Error::Eval("non-finite embedding value".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.vectors.rows() {
                return Err(Error::Eval(format!(
                    "{} labels for {} embeddings",
                    l.len(),
                    self.vectors.rows()
                )));
            }
        }
        Ok(())
    }

    /// The subset at `indices`, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            vectors: self.vectors.gather_rows(indices)?,
            labels: match &self.labels {
                Some(l) => {
                    let mut out = Vec::with_capacity(indices.len());
                    for &i in indices {
                        out.push(*l.get(i).ok_or(Error::IndexOutOfRange {
                            what: "embedding label",
                            index: i,
                            size: l.len(),
                        })?);
                    }
                    Some(out)
                }
                None => None,
            },
        })
    }
}

/// Similarity used to rank neighbors. Scores are "higher is closer":
/// cosine similarity directly, negated distance for Euclidean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnMetric {
    #[default]
    Cosine,
    Euclidean,
}

impl KnnMetric {
    pub const NAMES: [&'static str; 2] = ["cosine", "euclidean"];

    pub fn name(self) -> &'static str {
        match self {
            KnnMetric::Cosine => "cosine",
            KnnMetric::Euclidean => "euclidean",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "cosine" => Ok(KnnMetric::Cosine),
            "euclidean" => Ok(KnnMetric::Euclidean),
            _ => Err(Error::InvalidArgument(format!(
                "unknown metric `{name}` (expected one of: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    fn score<T: Scalar>(self, a: &[T], b: &[T]) -> f64 {
        match self {
            KnnMetric::Cosine => {
                let num = dot(a, b).to_f64_lossy();
                let den = dot(a, a).to_f64_lossy().sqrt() * dot(b, b).to_f64_lossy().sqrt();
                if den == 0.0 {
                    0.0
                } else {
                    num / den
                }
            }
            KnnMetric::Euclidean => {
                let mut sq = 0.0;
                for (&x, &y) in a.iter().zip(b) {
                    let d = (x - y).to_f64_lossy();
                    sq += d * d;
                }
                -sq.sqrt()
            }
        }
    }
}

/// kNN protocol knobs; [`Default`] is cosine, k = 20, 90/10 split, seed 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnOptions {
    pub k: usize,
    pub metric: KnnMetric,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for KnnOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_KNN_K,
            metric: KnnMetric::default(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed: 0,
        }
    }
}

/// Classifies one query by majority vote among its `k` highest-scoring
/// training embeddings.
///
/// Neighbors are totally ordered by (score descending, index ascending);
/// vote ties fall to the candidate with the larger summed similarity, then
/// to the lowest label.
pub fn knn_classify<T: Scalar>(
    train: &EmbeddingSet<T>,
    query: &DenseVector<T>,
    k: usize,
    metric: KnnMetric,
) -> Result<usize> {
    train.validate()?;
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::Eval("kNN training set has no labels".into()))?;
    let n = train.len();
    if n == 0 {
        return Err(Error::Eval("kNN training set is empty".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Eval(format!(
            "k = {k} out of range for {n} training embeddings"
        )));
    }
    if query.len() != train.vectors.cols() {
        return Err(Error::ShapeMismatch {
            op: "knn_classify",
            left: format!("query of {}", query.len()),
            right: format!("embeddings of {}", train.vectors.cols()),
        });
    }
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|i| (metric.score(train.vectors.row(i), query.as_slice()), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    // (votes, summed similarity) per label over the k nearest.
    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
    for &(score, i) in &scored[..k] {
        let label = labels[i];
        match tally.iter_mut().find(|t| t.0 == label) {
            Some(t) => {
                t.1 += 1;
                t.2 += score;
            }
            None => tally.push((label, 1, score)),
        }
    }
    let best = tally
        .iter()
        .max_by(|a, b| {
            a.1.cmp(&b.1)
                .then(a.2.partial_cmp(&b.2).unwrap())
                .then(b.0.cmp(&a.0))
        })
        .unwrap();
    Ok(best.0)
}

/// Accuracy of kNN classification of every `eval` embedding against `train`.
pub fn knn_eval<T: Scalar>(
    train: &EmbeddingSet<T>,
    eval: &EmbeddingSet<T>,
    k: usize,
    metric: KnnMetric,
) -> Result<f64> {
    eval.validate()?;
    let truth = eval
        .labels
        .as_ref()
        .ok_or_else(|| Error::Eval("kNN eval set has no labels".into()))?;
    if eval.is_empty() {
        return Err(Error::Eval("kNN eval set is empty".into()));
    }
    let hits: usize = (0..eval.len())
        .into_par_iter()
        .map(|i| {
            let query = DenseVector::from_vec(eval.vectors.row(i).to_vec());
            match knn_classify(train, &query, k, metric) {
                Ok(pred) => Ok(usize::from(pred == truth[i])),
                Err(e) => Err(e),
            }
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(hits as f64 / eval.len() as f64)
}

/// Embeds every dataset sample through the model's class-token output,
/// carrying labels along when present.
pub fn embed<T: Scalar>(model: &Model<T>, dataset: &Dataset<T>) -> Result<EmbeddingSet<T>> {
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::Eval("cannot embed an empty dataset".into()));
    }
    let outputs: Vec<DenseVector<T>> = dataset
        .image_slices()
        .par_iter()
        .map(|img| forward(model, &[img]).map(|mut o| o.pop().unwrap().cls))
        .collect::<Result<_>>()?;
    let dim = outputs[0].len();
    let mut vectors = DenseMatrix::zeros(dataset.len(), dim);
    for (i, v) in outputs.iter().enumerate() {
        vectors.row_mut(i).copy_from_slice(v.as_slice());
    }
    Ok(EmbeddingSet {
        vectors,
        labels: dataset.labels.clone(),
    })
}

/// Embeds the dataset, splits it `train_fraction`/(rest) with a seeded
/// shuffle, and scores kNN classification of the held-out split.
pub fn knn_accuracy<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    options: &KnnOptions,
) -> Result<f64> {
    if dataset.labels.is_none() {
        return Err(Error::Eval("kNN accuracy needs a labeled dataset".into()));
    }
    if !(0.0..1.0).contains(&options.train_fraction) {
        return Err(Error::Eval(format!(
            "train fraction {} outside [0, 1)",
            options.train_fraction
        )));
    }
    let embeddings = embed(model, dataset)?;
    let n = embeddings.len();
    let n_train = (options.train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Eval(format!(
            "split leaves an empty side: {n_train} train of {n}"
        )));
    }
    if options.k > n_train {
        return Err(Error::Eval(format!(
            "k = {} exceeds the {n_train}-sample train split",
            options.k
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
    let train = embeddings.gather(&order[..n_train])?;
    let eval = embeddings.gather(&order[n_train..])?;
    knn_eval(&train, &eval, options.k, options.metric)
}

/// Mean class-token and patch-token MSE between two models over a dataset —
/// the distillation objective reused as a metric, with no training.
pub fn functional_mse<T: Scalar>(
    teacher: &Model<T>,
    student: &Model<T>,
    dataset: &Dataset<T>,
) -> Result<(f64, f64)> {
    check_teacher_student(&teacher.config, &student.config)?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::Eval("cannot evaluate on an empty dataset".into()));
    }
    let images = dataset.image_slices();
    let t_out = forward(teacher, &images)?;
    let s_out = forward(student, &images)?;
    let mut acc = nn::PartsAcc::default();
    for (t, s) in t_out.iter().zip(&s_out) {
        let (parts, _, _) = nn::sample_loss_refs(
            s,
            &t.cls,
            &t.patch,
            LossTerms::cls_patch(),
            0.0,
            None,
            None,
            None,
        )?;
        acc.add(&parts);
    }
    let parts = acc.mean(t_out.len());
    Ok((parts.cls, parts.patch))
}

/// Where a spectrum was measured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrumSource {
    pub block: usize,
    pub layer: String,
}

impl std::fmt::Display for SpectrumSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.layer)
    }
}

/// Principal-component variances of a weight matrix, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversitySpectrum<T> {
    pub variances: DenseVector<T>,
    pub source: SpectrumSource,
}

impl<T: Scalar> DiversitySpectrum<T> {
    /// Total variance — the trace of the centered covariance.
    pub fn total(&self) -> f64 {
        self.variances
            .as_slice()
            .iter()
            .map(|v| v.to_f64_lossy())
            .sum()
    }
}

/// PCA of the rows of `w`: center them, form the covariance
/// `(1/(rows−1))·XᵀX`, and return its eigenvalues in descending order.
/// Tiny negative eigenvalues (≥ −1e-9) are clamped to zero.
pub fn diversity_spectrum<T: Scalar>(
    w: &DenseMatrix<T>,
    source: SpectrumSource,
) -> Result<DiversitySpectrum<T>> {
    let (n, d) = w.shape();
    if n < 2 {
        return Err(Error::Eval(format!("PCA needs at least 2 rows, got {n}")));
    }
    if !w.is_finite() {
        return Err(Error::Eval("non-finite weight value".into()));
    }
    let mut centered = w.clone();
    let inv_n = T::val(1.0 / n as f64);
    for j in 0..d {
        let mut mean = T::zero();
        for i in 0..n {
            mean += centered.get(i, j);
        }
        mean *= inv_n;
        for i in 0..n {
            let v = centered.get(i, j) - mean;
            centered.set(i, j, v);
        }
    }
    let mut cov = matmul_tn(&centered, &centered)?;
    cov.scale_in_place(T::val(1.0 / (n - 1) as f64));
    let mut eig = sym_eig_descending(&cov)?;
    for v in eig.as_mut_slice() {
        let f = v.to_f64_lossy();
        if f < 0.0 {
            if f < SPECTRUM_CLAMP {
                return Err(Error::Eval(format!(
                    "covariance eigenvalue {f:e} below the clamp floor"
                )));
            }
            *v = T::zero();
        }
    }
    Ok(DiversitySpectrum {
        variances: eig,
        source,
    })
}

/// Spectrum of one block's MLP hidden weight (rows = hidden neurons).
pub fn model_spectrum<T: Scalar>(model: &Model<T>, block: usize) -> Result<DiversitySpectrum<T>> {
    let b = model.blocks.get(block).ok_or(Error::IndexOutOfRange {
        what: "block",
        index: block,
        size: model.blocks.len(),
    })?;
    diversity_spectrum(
        &b.mlp.w_hidden,
        SpectrumSource {
            block,
            layer: "mlp.hidden.weight".into(),
        },
    )
}

/// Renders a spectrum as CSV with columns `component_index,variance`.
pub fn spectrum_csv<T: Scalar>(spectrum: &DiversitySpectrum<T>) -> String {
    let mut out = String::from("component_index,variance\n");
    for (i, v) in spectrum.variances.as_slice().iter().enumerate() {
        out.push_str(&format!("{},{:e}\n", i, v.to_f64_lossy()));
    }
    out
}

/// One instance of the diversity-dominance experiment: total variance of
/// the selected subset vs. the mean over random same-size subsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominancePair {
    pub selected_total: f64,
    pub random_mean_total: f64,
}

/// Outcome of the seeded dominance experiment across instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub instances: usize,
    pub hits: usize,
    pub pairs: Vec<DominancePair>,
}

impl DominanceReport {
    pub fn hit_rate(&self) -> f64 {
        self.hits as f64 / self.instances as f64
    }
}

/// Tests, across seeded random weight matrices, whether the
/// diversity-guided subset's total PCA variance dominates the mean total
/// variance of uniformly random row subsets of the same size.
///
/// Per instance `i`: draw a standard-normal `rows×cols` matrix from seed
/// `seed + i`, select `subset` rows greedily, and compare against
/// `num_random` random subsets drawn from a second stream. An instance is
/// a hit when selected ≥ random mean.
pub fn diversity_dominance<T: Scalar>(
    rows: usize,
    cols: usize,
    subset: usize,
    instances: usize,
    num_random: usize,
    seed: u64,
) -> Result<DominanceReport> {
    if subset < 2 || subset > rows {
        return Err(Error::InvalidArgument(format!(
            "subset size {subset} out of range for {rows} rows"
        )));
    }
    if instances == 0 || num_random == 0 {
        return Err(Error::InvalidArgument(
            "need at least one instance and one random subset".into(),
        ));
    }
    let source = |kind: &str| SpectrumSource {
        block: 0,
        layer: format!("dominance.{kind}"),
    };
    let mut pairs = Vec::with_capacity(instances);
    let mut hits = 0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let w: DenseMatrix<T> =
            DenseMatrix::from_fn(rows, cols, |_, _| T::standard_normal(&mut rng));
        let selection = select_dgmr(&w, subset, DEFAULT_EPS_REL)?;
        let chosen = w.gather_rows(&selection.selected)?;
        let selected_total = diversity_spectrum(&chosen, source("selected"))?.total();

        let mut sub_rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64) ^ 0x9E37_79B9_7F4A_7C15);
        let mut sum = 0.0;
        let mut indices: Vec<usize> = (0..rows).collect();
        for _ in 0..num_random {
            indices.shuffle(&mut sub_rng);
            let pick = w.gather_rows(&indices[..subset])?;
            sum += diversity_spectrum(&pick, source("random"))?.total();
        }
        let random_mean_total = sum / num_random as f64;
        if selected_total >= random_mean_total {
            hits += 1;
        }
        pairs.push(DominancePair {
            selected_total,
            random_mean_total,
        });
    }
    Ok(DominanceReport {
        instances,
        hits,
        pairs,
    })
}
