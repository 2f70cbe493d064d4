//! `dgmr` — diversity-guided MLP reduction experiments from the shell.
//!
//! Subcommands: `gen` (seeded model/dataset creation), `prune` (structural
//! MLP pruning), `distill` (teacher→student recovery training), `eval`
//! (kNN accuracy + functional distance), `diversity` (PCA weight spectra),
//! and `report` (parameter/FLOPs arithmetic for the published presets).
//!
//! Every invocation is deterministic given its flags; a `RunManifest` JSON
//! is written next to each output artifact. Exit codes: 0 success, 2 for
//! usage or validation problems, 1 for runtime failures. `DGMR_THREADS`
//! caps internal parallelism.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dgmr::distill::{
    gen_synthetic_dataset, loss_curve_csv, run_distillation, DistillConfig, Labeler,
};
use dgmr::eval::{
    diversity_dominance, functional_mse, knn_accuracy, model_spectrum, KnnMetric, KnnOptions,
};
use dgmr::io::{read_dataset, read_model, write_dataset, write_model, Dtype};
use dgmr::model::{init_model, preset, ModelConfig};
use dgmr::nn::LossTerms;
use dgmr::pruning::{prune_model, PruneCriterion, PruneOptions};
use dgmr::{Error, Model64};

#[derive(Parser)]
#[command(
    name = "dgmr",
    version,
    about = "Diversity-guided MLP reduction: prune transformer MLP blocks and recover them by distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a seeded model and/or synthetic dataset
    Gen(GenArgs),
    /// Prune a model's MLP blocks to a target expansion ratio
    Prune(PruneArgs),
    /// Distill a pruned student against its teacher
    Distill(DistillArgs),
    /// Score teacher and student: kNN accuracy and functional distance
    Eval(EvalArgs),
    /// PCA variance spectrum of one block's MLP hidden weights
    Diversity(DiversityArgs),
    /// Parameter/FLOPs arithmetic for a preset at a pruning ratio
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// Architecture preset name
    #[arg(long)]
    preset: String,
    /// Seed for weights, pixels, and labels
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the initialized model container here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a synthetic dataset container here
    #[arg(long)]
    data_out: Option<PathBuf>,
    /// Number of dataset samples
    #[arg(long, default_value_t = 128)]
    data_n: usize,
    /// Label the dataset with this many classes via the generated model
    #[arg(long)]
    classes: Option<usize>,
    /// Store dataset pixels as f64 instead of f32
    #[arg(long, default_value_t = false)]
    data_f64: bool,
}

#[derive(Args, Serialize)]
struct PruneArgs {
    /// Input model container
    #[arg(long)]
    model: PathBuf,
    /// Selection criterion: dgmr, l2, random, or taylor
    #[arg(long, default_value = "dgmr")]
    criterion: String,
    /// Target expansion ratio r; the pruned hidden width is round(r·C)
    #[arg(long)]
    ratio: f64,
    /// Seed for the random criterion and the taylor probe batch
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model container
    #[arg(long)]
    out: PathBuf,
    /// Write the prune report JSON here (stdout when omitted)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DistillArgs {
    /// Teacher model container
    #[arg(long)]
    teacher: PathBuf,
    /// Student model container
    #[arg(long)]
    student: PathBuf,
    /// Training dataset container
    #[arg(long)]
    data: PathBuf,
    /// Whole passes over the dataset
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Comma-separated loss terms from {cls, patch, xent}
    #[arg(long, default_value = "cls,patch")]
    loss: String,
    /// Weight of the xent term when enabled
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Base learning rate; the peak is base_lr x batch / 256
    #[arg(long, default_value_t = 1e-4)]
    base_lr: f64,
    /// Batch size
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Seed for batch shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output (trained student) model container
    #[arg(long)]
    out: PathBuf,
    /// Loss-curve CSV path (defaults to <out>.loss.csv)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Teacher model container
    #[arg(long)]
    teacher: PathBuf,
    /// Student model container
    #[arg(long)]
    student: PathBuf,
    /// Labeled dataset container
    #[arg(long)]
    data: PathBuf,
    /// Neighbor count for kNN classification
    #[arg(long, default_value_t = 20)]
    knn_k: usize,
    /// Similarity metric: cosine or euclidean
    #[arg(long, default_value = "cosine")]
    metric: String,
    /// Seed for the train/eval split
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the evaluation JSON here as well as stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DiversityArgs {
    /// Model container to analyze
    #[arg(long)]
    model: PathBuf,
    /// Block index
    #[arg(long, default_value_t = 0)]
    block: usize,
    /// Spectrum CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run the seeded selection-vs-random dominance experiment
    #[arg(long, default_value_t = false)]
    dominance: bool,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Architecture preset name
    #[arg(long)]
    preset: String,
    /// Target expansion ratio r
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
}

/// Record of one invocation, written next to each output artifact.
/// Re-running the subcommand with these flags reproduces the artifact
/// bit-exactly (the manifest itself carries the wall-clock duration and so
/// differs between runs).
#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    flags: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    toolkit_version: &'a str,
    duration_seconds: f64,
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn write_manifests(
    subcommand: &str,
    flags: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
    started: Instant,
) -> dgmr::Result<()> {
    let manifest = RunManifest {
        subcommand,
        flags,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        toolkit_version: env!("CARGO_PKG_VERSION"),
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    for out in outputs {
        let path = manifest_path(out);
        std::fs::write(&path, &json).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn parse_loss_terms(spec: &str) -> dgmr::Result<LossTerms> {
    let mut terms = LossTerms {
        cls: false,
        patch: false,
        xent: false,
    };
    for part in spec.split(',') {
        match part.trim() {
            "cls" => terms.cls = true,
            "patch" => terms.patch = true,
            "xent" => terms.xent = true,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown loss term `{other}` (expected cls, patch, or xent)"
                )))
            }
        }
    }
    terms.validate()?;
    Ok(terms)
}

fn cmd_gen(args: &GenArgs) -> dgmr::Result<()> {
    let started = Instant::now();
    if args.out.is_none() && args.data_out.is_none() {
        return Err(Error::InvalidArgument(
            "nothing to generate: pass --out and/or --data-out".into(),
        ));
    }
    if args.classes.is_some() && args.data_out.is_none() {
        return Err(Error::InvalidArgument(
            "--classes only makes sense with --data-out".into(),
        ));
    }
    let config = preset(&args.preset)?;
    let model: Model64 = init_model(&config, args.seed);
    let mut outputs: Vec<&Path> = Vec::new();
    if let Some(out) = &args.out {
        write_model(out, &model)?;
        println!(
            "wrote {} ({} parameters, seed {})",
            out.display(),
            model.param_count(),
            args.seed
        );
        outputs.push(out);
    }
    if let Some(data_out) = &args.data_out {
        let labeler = args.classes.map(|k| Labeler {
            teacher: &model,
            num_classes: k,
        });
        let dataset = gen_synthetic_dataset(&config, args.data_n, args.seed, labeler)?;
        let dtype = if args.data_f64 {
            Dtype::F64
        } else {
            Dtype::F32
        };
        write_dataset(data_out, &dataset, dtype)?;
        println!(
            "wrote {} ({} samples of 3x{}x{}{})",
            data_out.display(),
            dataset.n,
            config.image_size,
            config.image_size,
            match args.classes {
                Some(k) => format!(", {k} classes"),
                None => String::new(),
            }
        );
        outputs.push(data_out);
    }
    write_manifests("gen", serde_json::to_value(args)?, &[], &outputs, started)
}

/// Gradient probe for the Taylor criterion: accumulated |∂L/∂w| of the
/// class+patch objective against zero targets over a seeded batch, which
/// ranks neurons by how much their removal perturbs the output.
fn taylor_probe(model: &Model64, seed: u64) -> dgmr::Result<Model64> {
    use dgmr::linalg::{DenseMatrix, DenseVector};
    use dgmr::nn::{forward_backward, FreezeMask, LossSpec};
    let n = 8;
    let dataset = gen_synthetic_dataset(&model.config, n, seed, None)?;
    let images = dataset.image_slices();
    let zeros_cls = vec![DenseVector::<f64>::zeros(model.config.embed_dim); n];
    let zeros_patch =
        vec![DenseMatrix::<f64>::zeros(model.config.num_patches(), model.config.embed_dim); n];
    let spec = LossSpec {
        teacher_cls: &zeros_cls,
        teacher_patch: &zeros_patch,
        terms: LossTerms::cls_patch(),
        lambda_xent: 0.0,
        labels: None,
        head: None,
        freeze: FreezeMask::NONE,
    };
    let result = forward_backward(model, &images, &spec)?;
    Ok(result.grads)
}

fn cmd_prune(args: &PruneArgs) -> dgmr::Result<()> {
    let started = Instant::now();
    let criterion = PruneCriterion::from_name(&args.criterion)?;
    let model = read_model(&args.model)?;
    let probe;
    let mut options = PruneOptions {
        seed: args.seed,
        ..PruneOptions::default()
    };
    if criterion == PruneCriterion::Taylor {
        probe = taylor_probe(&model, args.seed)?;
        options.taylor_grads = Some(&probe);
    }
    let (pruned, report) = prune_model(&model, criterion, args.ratio, &options)?;
    write_model(&args.out, &pruned)?;
    let report_json = serde_json::to_string_pretty(&report)?;
    println!(
        "pruned {} -> {} ({} -> {} parameters, hidden {} -> {})",
        args.model.display(),
        args.out.display(),
        report.original_params,
        report.pruned_params,
        model.config.mlp_hidden,
        pruned.config.mlp_hidden,
    );
    let mut outputs: Vec<&Path> = vec![&args.out];
    match &args.report {
        Some(path) => {
            std::fs::write(path, &report_json).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            outputs.push(path);
        }
        None => println!("{report_json}"),
    }
    write_manifests(
        "prune",
        serde_json::to_value(args)?,
        &[&args.model],
        &outputs,
        started,
    )
}

fn cmd_distill(args: &DistillArgs) -> dgmr::Result<()> {
    let started = Instant::now();
    let terms = parse_loss_terms(&args.loss)?;
    let teacher = read_model(&args.teacher)?;
    let student = read_model(&args.student)?;
    let dataset = read_dataset(&args.data)?;
    let config = DistillConfig {
        loss_terms: terms,
        lambda_xent: args.lambda,
        batch_size: args.batch,
        seed: args.seed,
        base_lr: args.base_lr,
        ..DistillConfig::default()
    };
    let (trained, curve) = run_distillation(&teacher, &student, &dataset, &config, args.epochs)?;
    write_model(&args.out, &trained)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".loss.csv");
        args.out.with_file_name(name)
    });
    std::fs::write(&log_path, loss_curve_csv(&curve)).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let last = curve.last().expect("at least one training step");
    println!(
        "distilled for {} steps; final loss {:.6e} (log: {})",
        curve.len(),
        last.parts.total,
        log_path.display()
    );
    write_manifests(
        "distill",
        serde_json::to_value(args)?,
        &[&args.teacher, &args.student, &args.data],
        &[&args.out, &log_path],
        started,
    )
}

#[derive(Serialize)]
struct EvalReport {
    knn_k: usize,
    metric: &'static str,
    seed: u64,
    teacher_knn_accuracy: f64,
    student_knn_accuracy: f64,
    cls_mse: f64,
    patch_mse: f64,
}

fn cmd_eval(args: &EvalArgs) -> dgmr::Result<()> {
    let started = Instant::now();
    let metric = KnnMetric::from_name(&args.metric)?;
    let teacher = read_model(&args.teacher)?;
    let student = read_model(&args.student)?;
    let dataset = read_dataset(&args.data)?;
    if dataset.labels.is_none() {
        return Err(Error::Eval(
            "kNN evaluation needs a labeled dataset (generate one with gen --classes)".into(),
        ));
    }
    let (cls_mse, patch_mse) = functional_mse(&teacher, &student, &dataset)?;
    let options = KnnOptions {
        k: args.knn_k,
        metric,
        seed: args.seed,
        ..KnnOptions::default()
    };
    let report = EvalReport {
        knn_k: args.knn_k,
        metric: metric.name(),
        seed: args.seed,
        teacher_knn_accuracy: knn_accuracy(&teacher, &dataset, &options)?,
        student_knn_accuracy: knn_accuracy(&student, &dataset, &options)?,
        cls_mse,
        patch_mse,
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &args.out {
        std::fs::write(out, &json).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        write_manifests(
            "eval",
            serde_json::to_value(args)?,
            &[&args.teacher, &args.student, &args.data],
            &[out],
            started,
        )?;
    }
    Ok(())
}

fn cmd_diversity(args: &DiversityArgs) -> dgmr::Result<()> {
    let started = Instant::now();
    let model = read_model(&args.model)?;
    let spectrum = model_spectrum(&model, args.block)?;
    // The covariance has min(M, N) components that can carry variance;
    // report exactly those.
    let block = &model.blocks[args.block].mlp;
    let keep = block.hidden().min(block.dim());
    let mut csv = String::from("component_index,variance\n");
    for (i, v) in spectrum.variances.as_slice().iter().take(keep).enumerate() {
        csv.push_str(&format!("{i},{v:e}\n"));
    }
    match &args.out {
        Some(out) => {
            std::fs::write(out, &csv).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            println!(
                "wrote spectrum of {} ({keep} components, total variance {:.6e})",
                spectrum.source,
                spectrum.total()
            );
            write_manifests(
                "diversity",
                serde_json::to_value(args)?,
                &[&args.model],
                &[out],
                started,
            )?;
        }
        None => print!("{csv}"),
    }
    if args.dominance {
        let report = diversity_dominance::<f64>(64, 32, 16, 10, 20, 0)?;
        println!(
            "selection dominance: {}/{} instances ({}%)",
            report.hits,
            report.instances,
            (100.0 * report.hit_rate()).round()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ArchReport {
    preset: String,
    ratio: f64,
    config: ModelConfig,
    pruned_hidden: u64,
    original_params: u64,
    pruned_params: u64,
    param_reduction_percent: f64,
    original_flops: u64,
    pruned_flops: u64,
    flops_reduction_percent: f64,
}

fn cmd_report(args: &ReportArgs) -> dgmr::Result<()> {
    let config = preset(&args.preset)?;
    let max_ratio = config.mlp_hidden as f64 / config.embed_dim as f64;
    if args.ratio <= 0.0 || args.ratio > max_ratio {
        return Err(Error::InvalidArgument(format!(
            "ratio {} out of range (0, {max_ratio:.4}] for {}",
            args.ratio, args.preset
        )));
    }
    let original_params = config.param_count(None);
    let pruned_params = config.param_count(Some(args.ratio));
    let original_flops = config.flops_estimate(None);
    let pruned_flops = config.flops_estimate(Some(args.ratio));
    let reduction = |orig: u64, pruned: u64| 100.0 * (1.0 - pruned as f64 / orig as f64);
    let report = ArchReport {
        preset: args.preset.clone(),
        ratio: args.ratio,
        pruned_hidden: (args.ratio * config.embed_dim as f64).round() as u64,
        config,
        original_params,
        pruned_params,
        param_reduction_percent: reduction(original_params, pruned_params),
        original_flops,
        pruned_flops,
        flops_reduction_percent: reduction(original_flops, pruned_flops),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// 2 for problems a corrected invocation would fix, 1 for runtime failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::UnknownPreset { .. }
        | Error::TargetOutOfRange { .. }
        | Error::InvalidArgument(_)
        | Error::InvalidConfig(_)
        | Error::IncompatibleModels(_)
        | Error::Eval(_) => 2,
        _ => 1,
    }
}

fn init_threads() -> Result<(), String> {
    match std::env::var("DGMR_THREADS") {
        Ok(raw) => {
            let n: usize =
                raw.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
                    format!("DGMR_THREADS must be a positive integer, got `{raw}`")
                })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| format!("thread pool: {e}"))
        }
        Err(_) => Ok(()),
    }
}

fn main() -> ExitCode {
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Prune(args) => cmd_prune(args),
        Command::Distill(args) => cmd_distill(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Diversity(args) => cmd_diversity(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
