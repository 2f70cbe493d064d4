//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS line with its measured numbers. Tolerances are pinned here as
//! constants; every randomized check runs from fixed seeds so the suite is
//! bit-reproducible.

mod support;

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dgmr::distill::{
    adamw_step, gen_synthetic_dataset, run_distillation_steps, DistillConfig, Schedule, TrainState,
};
use dgmr::eval::{
    diversity_dominance, diversity_spectrum, functional_mse, knn_classify, EmbeddingSet, KnnMetric,
    SpectrumSource,
};
use dgmr::io::{
    read_dataset, read_embeddings, read_model, write_dataset, write_embeddings, write_model, Dtype,
};
use dgmr::linalg::{DenseMatrix, DenseVector};
use dgmr::model::{init_model, preset};
use dgmr::nn::{forward, forward_backward, FreezeMask, LossSpec, LossTerms};
use dgmr::pruning::{
    prune_model, select_dgmr, select_dgmr_traced, PruneCriterion, PruneOptions, DEFAULT_EPS_REL,
};
use dgmr::{Error, Model64, Scalar};

// ---- pinned tolerances and budgets ------------------------------------

/// Criterion 1: seeded instances compared against the QR oracle, and the
/// wall-clock budget for all of them.
const QR_INSTANCES: usize = 100;
const QR_TIME_BUDGET_S: f64 = 5.0;
/// Criterion 2: relative pairwise-orthogonality tolerance within a cycle.
const ORTHO_REL_TOL: f64 = 1e-8;
/// Criterion 3: losslessness of full-ratio pruning, max |Δ| per output.
const LOSSLESS_TOL: f64 = 1e-12;
/// Criterion 4: published-arithmetic tolerances (relative for counts,
/// absolute percentage points for reductions).
const PARAMS_REL_TOL: f64 = 0.04;
const FLOPS_REL_TOL: f64 = 0.06;
const REDUCTION_CENTER: f64 = 71.5;
const REDUCTION_TOL_PTS: f64 = 1.5;
const CLOSED_FORM_TOL_PTS: f64 = 0.5;
/// Criterion 5: per-tensor relative gradient error bound, the central
/// finite-difference step, and the wall-clock budget.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FD_STEP: f64 = 1e-5;
const GRAD_SEEDS: [u64; 3] = [11, 12, 13];
const GRAD_TIME_BUDGET_S: f64 = 60.0;
/// Criteria 6/7: training budget per run and the tail averaged as the
/// "final" loss; a seed counts as a win only by these aggregates.
const RECOVERY_SEEDS: u64 = 5;
const RECOVERY_STEPS: usize = 500;
const RECOVERY_TAIL: usize = 50;
const RECOVERY_DATA_N: usize = 64;
const RECOVERY_MIN_WINS: usize = 4;
const RECOVERY_TIME_BUDGET_S: f64 = 900.0;
/// Base learning rate for the recovery experiments. The published 1e-4 is
/// tuned for batch-256 training of billion-parameter models; after the
/// linear batch rule it leaves a 500-step toy run at its initialization,
/// so the comparison would only measure the pruned subnetwork's starting
/// gap. 1e-2 (peak 3.125e-4 at batch 8) lets the budget actually converge,
/// making "final loss" reflect what each selection can recover.
const RECOVERY_BASE_LR: f64 = 1e-2;
/// Criterion 8: schedule endpoint exactness and AdamW step magnitude.
const SCHEDULE_TOL: f64 = 1e-12;
const ADAM_STEP_TOL: f64 = 1e-9;
/// Criterion 9: brute-force kNN agreement set size and neighbor counts.
const KNN_POINTS: usize = 200;
const KNN_QUERIES: usize = 40;
const KNN_KS: [usize; 3] = [1, 5, 20];
/// Criterion 10: spectrum trace identity and the dominance floor.
const TRACE_TOL: f64 = 1e-8;
const DOMINANCE_MIN_RATE: f64 = 0.8;

// ---- helpers ----------------------------------------------------------

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(rows, cols, |_, _| f64::standard_normal(rng))
}

fn rows_of(m: &DenseMatrix<f64>, keep: &[usize]) -> Vec<Vec<f64>> {
    keep.iter().map(|&i| m.row(i).to_vec()).collect()
}

/// Cycle boundaries of a selection: `[0, reset.., len]`.
fn cycle_bounds(resets: &[usize], len: usize) -> Vec<usize> {
    let mut b = Vec::with_capacity(resets.len() + 2);
    b.push(0);
    b.extend_from_slice(resets);
    if *b.last().unwrap() != len {
        b.push(len);
    }
    b
}

fn report_json(preset_name: &str, ratio: f64) -> serde_json::Value {
    let out = Command::new(env!("CARGO_BIN_EXE_dgmr"))
        .args([
            "report",
            "--preset",
            preset_name,
            "--ratio",
            &ratio.to_string(),
        ])
        .output()
        .expect("spawn dgmr report");
    assert!(
        out.status.success(),
        "report failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report JSON")
}

fn within_rel(actual: f64, expected: f64, rel: f64) -> bool {
    (actual - expected).abs() <= rel * expected
}

/// Prints a criterion's PASS line on the real stdout, past libtest's
/// capture, so a plain `cargo test` run shows the measured numbers.
macro_rules! pass_line {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        writeln!(std::io::stdout(), $($arg)*).unwrap();
    }};
}

// ---- criteria ---------------------------------------------------------

#[test]
fn criterion_01_selection_order_matches_cpqr_oracle() {
    let start = Instant::now();
    let mut checked_cycles = 0usize;
    for instance in 0..QR_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + instance as u64);
        // Mostly single-cycle draws; every seventh instance forces a
        // second cycle so reset handling is compared too.
        let multi = instance % 7 == 0;
        let (rows, cols, target) = if multi {
            let cols = rng.gen_range(2..=16);
            let rows = rng.gen_range(cols + 2..=cols + 2 + 32);
            let extra = rng.gen_range(1..=cols.min(rows - cols));
            (rows, cols, cols + extra)
        } else {
            let rows = rng.gen_range(2..=64);
            let cols = rng.gen_range(2..=32);
            let target = rng.gen_range(1..=rows.min(cols));
            (rows, cols, target)
        };
        let w = random_matrix(rows, cols, &mut rng);
        let sel = select_dgmr(&w, target, DEFAULT_EPS_REL).unwrap();
        assert_eq!(sel.selected.len(), target);

        let bounds = cycle_bounds(&sel.resets, target);
        let mut remaining: Vec<usize> = (0..rows).collect();
        for cycle in bounds.windows(2) {
            let (a, b) = (cycle[0], cycle[1]);
            let picks = &sel.selected[a..b];
            let oracle = support::cpqr_pivot_order(&rows_of(&w, &remaining), b - a);
            let expected: Vec<usize> = oracle.iter().map(|&j| remaining[j]).collect();
            assert_eq!(
                picks, expected,
                "instance {instance} ({rows}x{cols}, target {target}), cycle at {a}..{b}"
            );
            remaining.retain(|i| !picks.contains(i));
            checked_cycles += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < QR_TIME_BUDGET_S,
        "oracle comparison took {elapsed:.2}s"
    );
    pass_line!(
        "ACCEPTANCE 01 PASS: selection order equals column-pivoted QR pivots on \
         {QR_INSTANCES}/{QR_INSTANCES} instances ({checked_cycles} cycles) in {elapsed:.2}s"
    );
}

#[test]
fn criterion_02_cycle_residuals_pairwise_orthogonal() {
    let mut worst: f64 = 0.0;
    for instance in 0..QR_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2_000 + instance as u64);
        let rows = rng.gen_range(3..=64);
        let cols = rng.gen_range(2..=32);
        let target = rng.gen_range(2..=rows.min(2 * cols));
        let w = random_matrix(rows, cols, &mut rng);
        let (_, cycles) = select_dgmr_traced(&w, target, DEFAULT_EPS_REL).unwrap();
        for cycle in &cycles {
            for i in 0..cycle.len() {
                for j in 0..i {
                    let a = cycle[i].as_slice();
                    let b = cycle[j].as_slice();
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let rel = dot.abs() / (cycle[i].norm() * cycle[j].norm()).max(1e-300);
                    worst = worst.max(rel);
                    assert!(
                        rel <= ORTHO_REL_TOL,
                        "instance {instance}: residuals {j} and {i} have relative dot {rel:e}"
                    );
                }
            }
        }
    }
    pass_line!(
        "ACCEPTANCE 02 PASS: cycle residuals pairwise orthogonal on \
         {QR_INSTANCES}/{QR_INSTANCES} instances (worst relative dot {worst:.2e})"
    );
}

#[test]
fn criterion_03_full_ratio_prune_is_lossless() {
    let mut worst: f64 = 0.0;
    for preset_name in ["toy-small", "toy-medium"] {
        let cfg = preset(preset_name).unwrap();
        let model: Model64 = init_model(&cfg, 3_000);
        let full_ratio = cfg.mlp_hidden as f64 / cfg.embed_dim as f64;
        let (pruned, report) = prune_model(
            &model,
            PruneCriterion::Dgmr,
            full_ratio,
            &PruneOptions::default(),
        )
        .unwrap();
        assert_eq!(report.pruned_params, report.original_params);
        for batch in 0..10 {
            let ds = gen_synthetic_dataset::<f64>(&cfg, 4, 3_100 + batch, None).unwrap();
            let images = ds.image_slices();
            let a = forward(&model, &images).unwrap();
            let b = forward(&pruned, &images).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.cls.as_slice().iter().zip(y.cls.as_slice()) {
                    worst = worst.max((u - v).abs());
                }
                for (u, v) in x.patch.data().iter().zip(y.patch.data()) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    assert!(
        worst <= LOSSLESS_TOL,
        "full-ratio prune perturbed outputs by {worst:e}"
    );
    pass_line!(
        "ACCEPTANCE 03 PASS: full-ratio pruning lossless on 10 batches of both toys \
         (max |Δ| {worst:.2e} ≤ {LOSSLESS_TOL:e})"
    );
}

#[test]
fn criterion_04_report_reproduces_published_arithmetic() {
    let eva = report_json("eva-clip-E", 1.0);
    let orig_p = eva["original_params"].as_u64().unwrap() as f64;
    let pruned_p = eva["pruned_params"].as_u64().unwrap() as f64;
    let orig_f = eva["original_flops"].as_u64().unwrap() as f64;
    let pruned_f = eva["pruned_flops"].as_u64().unwrap() as f64;
    let red_p = eva["param_reduction_percent"].as_f64().unwrap();
    let red_f = eva["flops_reduction_percent"].as_f64().unwrap();
    assert!(within_rel(orig_p, 4.35e9, PARAMS_REL_TOL), "{orig_p:e}");
    assert!(within_rel(pruned_p, 1.24e9, PARAMS_REL_TOL), "{pruned_p:e}");
    assert!(within_rel(orig_f, 2.23e12, FLOPS_REL_TOL), "{orig_f:e}");
    assert!(within_rel(pruned_f, 0.63e12, FLOPS_REL_TOL), "{pruned_f:e}");
    assert!(
        (red_p - REDUCTION_CENTER).abs() <= REDUCTION_TOL_PTS,
        "{red_p}"
    );
    assert!(
        (red_f - REDUCTION_CENTER).abs() <= REDUCTION_TOL_PTS,
        "{red_f}"
    );

    let g = report_json("openclip-g", 1.0);
    let g_orig = g["original_params"].as_u64().unwrap() as f64;
    let g_pruned = g["pruned_params"].as_u64().unwrap() as f64;
    assert!(within_rel(g_orig, 1.01e9, PARAMS_REL_TOL), "{g_orig:e}");
    assert!(within_rel(g_pruned, 0.48e9, PARAMS_REL_TOL), "{g_pruned:e}");

    // Closed form: MLP parameter share s at expansion ratio ρ gives a
    // model-level reduction of s·(1 − 1/ρ) when pruning to ratio 1.
    let closed = 0.811f64 * (1.0 - 1.0 / 8.57) * 100.0;
    assert!(
        (closed - REDUCTION_CENTER).abs() <= CLOSED_FORM_TOL_PTS,
        "{closed}"
    );

    pass_line!(
        "ACCEPTANCE 04 PASS: EVA-E {:.2}B→{:.2}B params ({red_p:.1}%), \
         {:.2}T→{:.2}T FLOPs ({red_f:.1}%); openclip-g {:.2}B→{:.2}B; closed form {closed:.2}%",
        orig_p / 1e9,
        pruned_p / 1e9,
        orig_f / 1e12,
        pruned_f / 1e12,
        g_orig / 1e9,
        g_pruned / 1e9
    );
}

#[test]
fn criterion_05_analytic_gradients_match_finite_differences() {
    let start = Instant::now();
    let cfg = preset("toy-small").unwrap();
    let mut worst: f64 = 0.0;
    for &seed in &GRAD_SEEDS {
        let model: Model64 = init_model(&cfg, seed);
        let teacher: Model64 = init_model(&cfg, seed + 1_000);
        let ds = gen_synthetic_dataset::<f64>(&cfg, 2, seed + 2_000, None).unwrap();
        let images = ds.image_slices();
        let t_out = forward(&teacher, &images).unwrap();
        let t_cls: Vec<DenseVector<f64>> = t_out.iter().map(|o| o.cls.clone()).collect();
        let t_patch: Vec<DenseMatrix<f64>> = t_out.iter().map(|o| o.patch.clone()).collect();
        let spec = LossSpec {
            teacher_cls: &t_cls,
            teacher_patch: &t_patch,
            terms: LossTerms::cls_patch(),
            lambda_xent: 0.0,
            labels: None,
            head: None,
            freeze: FreezeMask::NONE,
        };
        let analytic = forward_backward(&model, &images, &spec).unwrap().grads;
        let fd = support::finite_difference_grads(&model, &images, &spec, GRAD_FD_STEP);
        for (tensor, fd_tensor) in analytic.param_tensors().iter().zip(&fd) {
            let rel = support::relative_grad_error(tensor.data, fd_tensor);
            worst = worst.max(rel);
            assert!(
                rel < GRAD_REL_TOL,
                "seed {seed}, tensor {}: relative error {rel:e}",
                tensor.name
            );
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < GRAD_TIME_BUDGET_S, "gradcheck took {elapsed:.1}s");
    pass_line!(
        "ACCEPTANCE 05 PASS: analytic gradients within {GRAD_REL_TOL:e} of finite \
         differences for every tensor, {} seeds (worst {worst:.2e}) in {elapsed:.1}s",
        GRAD_SEEDS.len()
    );
}

/// A teacher whose MLP neurons carry the redundancy trained networks
/// exhibit: neurons come in groups that duplicate one feature — a shared
/// hidden direction *and* a shared output column, each copy at its own
/// magnitude plus noise. Magnitude ranking then spends capacity keeping
/// several copies of strong features and drops weak features entirely,
/// while diversity selection keeps one representative per feature; after
/// distillation rescales the kept columns, coverage is what remains. An
/// i.i.d. random teacher has no such structure, and every strategy's
/// student converges to the same loss.
fn redundant_teacher(cfg: &dgmr::model::ModelConfig, seed: u64) -> Model64 {
    let mut model: Model64 = init_model(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1E5);
    let dim = cfg.embed_dim;
    for block in &mut model.blocks {
        let hidden = block.mlp.hidden();
        let row_std = 1.0 / (dim as f64).sqrt();
        let col_std = 1.0 / (hidden as f64).sqrt();
        let pool: Vec<(Vec<f64>, Vec<f64>)> = (0..dim)
            .map(|_| {
                (
                    (0..dim)
                        .map(|_| row_std * f64::standard_normal(&mut rng))
                        .collect(),
                    (0..dim)
                        .map(|_| col_std * f64::standard_normal(&mut rng))
                        .collect(),
                )
            })
            .collect();
        for r in 0..hidden {
            let (direction, column) = &pool[rng.gen_range(0..dim)];
            let row_scale = 0.5 + rng.gen::<f64>();
            let col_scale = 0.5 + rng.gen::<f64>();
            for c in 0..dim {
                let nr = 0.05 * row_std * f64::standard_normal(&mut rng);
                block.mlp.w_hidden.set(r, c, row_scale * direction[c] + nr);
                let nc = 0.05 * col_std * f64::standard_normal(&mut rng);
                block.mlp.w_output.set(c, r, col_scale * column[c] + nc);
            }
        }
    }
    model
}

/// Prunes, distills for the fixed budget, and returns the mean total loss
/// over the final tail of the curve.
fn recovery_run(
    teacher: &Model64,
    criterion: PruneCriterion,
    dataset: &dgmr::Dataset64,
    terms: LossTerms,
    seed: u64,
) -> (Model64, f64) {
    let options = PruneOptions {
        seed,
        ..PruneOptions::default()
    };
    let (student, _) = prune_model(teacher, criterion, 1.0, &options).unwrap();
    let config = DistillConfig {
        loss_terms: terms,
        seed,
        base_lr: RECOVERY_BASE_LR,
        ..DistillConfig::default()
    };
    let (trained, curve) =
        run_distillation_steps(teacher, &student, dataset, &config, RECOVERY_STEPS).unwrap();
    let tail: f64 = curve[RECOVERY_STEPS - RECOVERY_TAIL..]
        .iter()
        .map(|e| e.parts.total)
        .sum::<f64>()
        / RECOVERY_TAIL as f64;
    (trained, tail)
}

#[test]
fn criterion_06_dgmr_recovers_better_than_baselines() {
    let start = Instant::now();
    let cfg = preset("toy-medium").unwrap();
    let mut dgmr_losses = Vec::new();
    let mut l2_losses = Vec::new();
    let mut random_losses = Vec::new();
    for seed in 0..RECOVERY_SEEDS {
        let teacher = redundant_teacher(&cfg, 100 + seed);
        let ds = gen_synthetic_dataset::<f64>(&cfg, RECOVERY_DATA_N, 200 + seed, None).unwrap();
        let terms = LossTerms::cls_patch();
        let (_, dgmr) = recovery_run(&teacher, PruneCriterion::Dgmr, &ds, terms, 300 + seed);
        let (_, l2) = recovery_run(&teacher, PruneCriterion::L2, &ds, terms, 300 + seed);
        let (_, random) = recovery_run(&teacher, PruneCriterion::Random, &ds, terms, 300 + seed);
        dgmr_losses.push(dgmr);
        l2_losses.push(l2);
        random_losses.push(random);
    }
    let wins_vs_random = dgmr_losses
        .iter()
        .zip(&random_losses)
        .filter(|(d, r)| d <= r)
        .count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (dgmr_mean, l2_mean, random_mean) =
        (mean(&dgmr_losses), mean(&l2_losses), mean(&random_losses));
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        wins_vs_random >= RECOVERY_MIN_WINS,
        "selection beat random pruning in only {wins_vs_random}/{RECOVERY_SEEDS} seeds \
         ({dgmr_losses:?} vs {random_losses:?})"
    );
    assert!(
        dgmr_mean <= l2_mean,
        "mean loss {dgmr_mean:.4e} above the ℓ2 baseline {l2_mean:.4e}"
    );
    assert!(
        elapsed < RECOVERY_TIME_BUDGET_S,
        "recovery comparison took {elapsed:.0}s"
    );
    pass_line!(
        "ACCEPTANCE 06 PASS: diversity selection beat random in {wins_vs_random}/{RECOVERY_SEEDS} \
         seeds and ℓ2 on mean ({dgmr_mean:.3e} vs ℓ2 {l2_mean:.3e}, random {random_mean:.3e}) \
         in {elapsed:.0}s"
    );
}

#[test]
fn criterion_07_cls_patch_loss_beats_single_term_training() {
    let cfg = preset("toy-medium").unwrap();
    let both_terms = LossTerms::cls_patch();
    let cls_only = LossTerms {
        cls: true,
        patch: false,
        xent: false,
    };
    let patch_only = LossTerms {
        cls: false,
        patch: true,
        xent: false,
    };
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..RECOVERY_SEEDS {
        let teacher: Model64 = init_model(&cfg, 400 + seed);
        let ds = gen_synthetic_dataset::<f64>(&cfg, RECOVERY_DATA_N, 500 + seed, None).unwrap();
        let combined = |terms: LossTerms| {
            let (trained, _) = recovery_run(&teacher, PruneCriterion::Dgmr, &ds, terms, 600 + seed);
            let (cls, patch) = functional_mse(&teacher, &trained, &ds).unwrap();
            cls + patch
        };
        let both = combined(both_terms);
        let cls = combined(cls_only);
        let patch = combined(patch_only);
        if both <= cls && both <= patch {
            wins += 1;
        }
        rows.push((both, cls, patch));
    }
    assert!(
        wins >= RECOVERY_MIN_WINS,
        "cls+patch won only {wins}/{RECOVERY_SEEDS}: {rows:?}"
    );
    pass_line!(
        "ACCEPTANCE 07 PASS: cls+patch training gave the lowest combined functional MSE \
         in {wins}/{RECOVERY_SEEDS} seeds"
    );
}

#[test]
fn criterion_08_schedule_and_optimizer_exactness() {
    // Schedule endpoints.
    let s = Schedule::new(1e-4, 1e-6, 256, 40, 400).unwrap();
    assert!((s.lr_at(40) - s.peak_lr).abs() <= SCHEDULE_TOL);
    assert!((s.lr_at(400) - s.min_lr).abs() <= SCHEDULE_TOL);

    // First AdamW step: with unit gradients everywhere, bias correction
    // makes each coordinate the scalar case m̂ = v̂ = 1, so |Δw| = lr/(1+ε).
    let cfg = preset("toy-small").unwrap();
    let mut model: Model64 = init_model(&cfg, 8_000);
    let before = model.clone();
    let mut grads = model.zeros_like();
    for t in grads.param_tensors_mut() {
        t.data.fill(1.0);
    }
    let dcfg = DistillConfig::default();
    let schedule = Schedule::new(1e-2, 0.0, 256, 0, 10).unwrap();
    let lr = schedule.lr_at(1);
    let mut state = TrainState::new(&model, schedule, &dcfg);
    adamw_step(&mut state, &mut model, &grads, FreezeMask::NONE).unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in model.param_tensors().iter().zip(before.param_tensors()) {
        for (x, y) in a.data.iter().zip(b.data) {
            worst = worst.max(((y - x).abs() - lr).abs());
        }
    }
    assert!(worst <= ADAM_STEP_TOL, "first-step deviation {worst:e}");

    // Zero gradients with zero decay must be an exact no-op.
    let mut frozen = before.clone();
    let zeros = frozen.zeros_like();
    let mut state2 = TrainState::new(&frozen, schedule, &dcfg);
    adamw_step(&mut state2, &mut frozen, &zeros, FreezeMask::NONE).unwrap();
    assert_eq!(frozen, before);

    pass_line!(
        "ACCEPTANCE 08 PASS: schedule endpoints exact to {SCHEDULE_TOL:e}, AdamW first step \
         within {ADAM_STEP_TOL:e} of lr (worst {worst:.2e}), zero-grad step is a no-op"
    );
}

#[test]
fn criterion_09_knn_matches_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9_000);
    let dim = 16;
    let classes = 5;
    let vectors: Vec<Vec<f64>> = (0..KNN_POINTS)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..KNN_POINTS).map(|_| rng.gen_range(0..classes)).collect();
    let set = EmbeddingSet {
        vectors: DenseMatrix::from_rows(&vectors).unwrap(),
        labels: Some(labels.clone()),
    };
    let mut checked = 0;
    for metric in [KnnMetric::Cosine, KnnMetric::Euclidean] {
        for _ in 0..KNN_QUERIES {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for k in KNN_KS {
                let fast =
                    knn_classify(&set, &DenseVector::from_vec(q.clone()), k, metric).unwrap();
                let brute =
                    support::brute_knn(&vectors, &labels, &q, k, metric == KnnMetric::Cosine);
                assert_eq!(fast, brute, "k={k}, {metric:?}, query {q:?}");
                checked += 1;
            }
        }
    }
    pass_line!(
        "ACCEPTANCE 09 PASS: kNN equals brute force on {checked} (query, k, metric) \
         combinations over {KNN_POINTS}-point sets"
    );
}

#[test]
fn criterion_10_spectrum_trace_identity_and_dominance() {
    // Trace identity on seeded random matrices.
    let mut worst: f64 = 0.0;
    for instance in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + instance);
        let rows = rng.gen_range(4..=64);
        let cols = rng.gen_range(2..=32);
        let w = random_matrix(rows, cols, &mut rng);
        let spectrum = diversity_spectrum(
            &w,
            SpectrumSource {
                block: 0,
                layer: "acceptance".into(),
            },
        )
        .unwrap();
        let mut trace = 0.0;
        for j in 0..cols {
            let mean: f64 = (0..rows).map(|i| w.get(i, j)).sum::<f64>() / rows as f64;
            trace +=
                (0..rows).map(|i| (w.get(i, j) - mean).powi(2)).sum::<f64>() / (rows - 1) as f64;
        }
        let gap = (spectrum.total() - trace).abs();
        worst = worst.max(gap);
        assert!(gap <= TRACE_TOL, "instance {instance}: trace gap {gap:e}");
    }

    // Seeded dominance of diversity-selected subsets over random ones.
    let report = diversity_dominance::<f64>(64, 32, 16, 10, 20, 0).unwrap();
    assert!(
        report.hit_rate() >= DOMINANCE_MIN_RATE,
        "dominance held on only {}/{} instances",
        report.hits,
        report.instances
    );
    pass_line!(
        "ACCEPTANCE 10 PASS: trace identity within {TRACE_TOL:e} (worst {worst:.2e}); \
         selected-subset variance dominated random subsets on {}/{} instances",
        report.hits,
        report.instances
    );
}

#[test]
fn criterion_11_container_round_trips_and_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("toy-small").unwrap();
    let model: Model64 = init_model(&cfg, 11_000);

    // Round trips, bit-exact.
    let model_path = dir.path().join("model.dgmr");
    write_model(&model_path, &model).unwrap();
    assert_eq!(read_model(&model_path).unwrap(), model);

    let ds = gen_synthetic_dataset::<f64>(&cfg, 8, 11_001, None).unwrap();
    for (i, dtype) in [Dtype::F32, Dtype::F64].into_iter().enumerate() {
        let p = dir.path().join(format!("data{i}.dgmr"));
        write_dataset(&p, &ds, dtype).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), ds);
    }

    let set = dgmr::eval::embed(&model, &ds).unwrap();
    let emb_path = dir.path().join("emb.dgmr");
    write_embeddings(&emb_path, &set).unwrap();
    assert_eq!(read_embeddings(&emb_path).unwrap(), set);

    // Corruptions, each with its specific rejection.
    let original = std::fs::read(&model_path).unwrap();
    let corrupt = dir.path().join("corrupt.dgmr");

    let mut bad_magic = original.clone();
    bad_magic[0] = b'X';
    std::fs::write(&corrupt, &bad_magic).unwrap();
    assert!(matches!(read_model(&corrupt), Err(Error::BadMagic { .. })));

    let mut bad_version = original.clone();
    bad_version[4..8].copy_from_slice(&9u32.to_le_bytes());
    std::fs::write(&corrupt, &bad_version).unwrap();
    assert!(matches!(
        read_model(&corrupt),
        Err(Error::UnsupportedVersion { found: 9, .. })
    ));

    let mut truncated = original.clone();
    truncated.truncate(original.len() - 64);
    std::fs::write(&corrupt, &truncated).unwrap();
    assert!(matches!(read_model(&corrupt), Err(Error::Tensor { .. })));

    let mut nan = original;
    let len = nan.len();
    nan[len - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    std::fs::write(&corrupt, &nan).unwrap();
    assert!(matches!(read_model(&corrupt), Err(Error::Tensor { .. })));

    pass_line!(
        "ACCEPTANCE 11 PASS: model/dataset/embeddings round-trip bit-exactly; bad magic, \
         bad version, truncation, and NaN payloads rejected with specific errors"
    );
}
