//! Independent oracles for the acceptance suite. Everything here is
//! implemented against plain nested vectors and textbook algorithms, on
//! purpose: these are the referees, not reuses of the library under test.

use dgmr::nn::{evaluate_loss, LossSpec};
use dgmr::Model64;

/// Column-pivoted Householder QR pivot order.
///
/// `rows` are the neuron weight vectors; the factorization runs on the
/// matrix whose *columns* are those vectors. At each step the column with
/// the largest trailing-submatrix norm is chosen (strict maximum, first
/// index on ties) and eliminated with a Householder reflection. Returns
/// the first `k` pivot choices as indices into `rows`.
#[allow(clippy::needless_range_loop)] // textbook index form, kept for fidelity
pub fn cpqr_pivot_order(rows: &[Vec<f64>], k: usize) -> Vec<usize> {
    let m = rows.len(); // columns of the working matrix
    let n = rows[0].len(); // rows of the working matrix
    assert!(k <= m && k <= n, "k={k} exceeds rank bound {m}x{n}");
    // a[i][j]: row i, column j — column j is neuron j's vector.
    let mut a = vec![vec![0.0f64; m]; n];
    for (j, row) in rows.iter().enumerate() {
        for i in 0..n {
            a[i][j] = row[i];
        }
    }
    let mut perm: Vec<usize> = (0..m).collect();
    for step in 0..k {
        // Trailing column norms over rows step..n.
        let col_norm_sq =
            |a: &[Vec<f64>], j: usize| -> f64 { (step..n).map(|i| a[i][j] * a[i][j]).sum() };
        let mut pivot = step;
        let mut best = col_norm_sq(&a, step);
        for j in step + 1..m {
            let norm = col_norm_sq(&a, j);
            if norm > best {
                best = norm;
                pivot = j;
            }
        }
        if pivot != step {
            for row in a.iter_mut() {
                row.swap(step, pivot);
            }
            perm.swap(step, pivot);
        }
        // Householder reflection zeroing column `step` below the diagonal.
        let norm = col_norm_sq(&a, step).sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[step][step] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (step..n).map(|i| a[i][step]).collect();
        v[0] -= alpha;
        let v_sq: f64 = v.iter().map(|x| x * x).sum();
        if v_sq == 0.0 {
            continue;
        }
        for j in step..m {
            let proj: f64 = (step..n).map(|i| v[i - step] * a[i][j]).sum();
            let scale = 2.0 * proj / v_sq;
            for i in step..n {
                a[i][j] -= scale * v[i - step];
            }
        }
    }
    perm.truncate(k);
    perm
}

/// Exhaustive kNN classification, mirroring the documented tie rules with
/// independent code: neighbors ordered by (score descending, index
/// ascending); votes broken by summed similarity, then lowest label.
pub fn brute_knn(
    vectors: &[Vec<f64>],
    labels: &[usize],
    query: &[f64],
    k: usize,
    cosine: bool,
) -> usize {
    let score = |a: &[f64]| -> f64 {
        if cosine {
            let num: f64 = a.iter().zip(query).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nq: f64 = query.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nq == 0.0 {
                0.0
            } else {
                num / (na * nq)
            }
        } else {
            -a.iter()
                .zip(query)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        }
    };
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    order.sort_by(|&i, &j| {
        score(&vectors[j])
            .partial_cmp(&score(&vectors[i]))
            .unwrap()
            .then(i.cmp(&j))
    });
    order.truncate(k);
    let classes = labels.iter().max().unwrap() + 1;
    let mut votes = vec![0usize; classes];
    let mut sims = vec![0.0f64; classes];
    for &i in &order {
        votes[labels[i]] += 1;
        sims[labels[i]] += score(&vectors[i]);
    }
    let mut best = None;
    for label in 0..classes {
        if votes[label] == 0 {
            continue;
        }
        best = match best {
            None => Some(label),
            Some(b) if votes[label] > votes[b] => Some(label),
            Some(b) if votes[label] == votes[b] && sims[label] > sims[b] => Some(label),
            keep => keep,
        };
    }
    best.unwrap()
}

/// Central finite differences of a scalar loss over every model parameter.
///
/// Returns one gradient vector per parameter tensor, in the model's tensor
/// order. `h` is the symmetric step.
pub fn finite_difference_grads(
    model: &Model64,
    images: &[&[f64]],
    spec: &LossSpec<'_, f64>,
    h: f64,
) -> Vec<Vec<f64>> {
    let mut work = model.clone();
    let num_tensors = work.param_tensors().len();
    let mut grads = Vec::with_capacity(num_tensors);
    for t in 0..num_tensors {
        let len = work.param_tensors()[t].data.len();
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let original = work.param_tensors()[t].data[i];
            work.param_tensors_mut()[t].data[i] = original + h;
            let up = evaluate_loss(&work, images, spec).unwrap().total;
            work.param_tensors_mut()[t].data[i] = original - h;
            let down = evaluate_loss(&work, images, spec).unwrap().total;
            work.param_tensors_mut()[t].data[i] = original;
            g.push((up - down) / (2.0 * h));
        }
        grads.push(g);
    }
    grads
}

/// Relative disagreement between an analytic tensor gradient and its
/// finite-difference estimate: ‖a − fd‖ / max(‖a‖ + ‖fd‖, floor).
pub fn relative_grad_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}
