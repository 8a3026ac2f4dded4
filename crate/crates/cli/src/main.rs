//! `tenconv`: train, evaluate, attack and audit tensor networks.
//!
//! Tables go to stdout, artifacts to files in the run directory. Exit codes:
//! 0 success, 2 configuration or spec error, 3 data error, 4 numeric failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tenconv::adversarial::{sweep, transfer_attack, AttackConfig, RobustnessCurve};
use tenconv::autodiff::CheckOptions;
use tenconv::data::{data_root, Dataset, LabeledImageSet, Split};
use tenconv::exec;
use tenconv::models::{audit_params, builtin, load_model, save_model, Model, ModelSpec};
use tenconv::training::{evaluate, model_grad_check, train_with_callback, TrainConfig};
use tenconv::{Error, Real};

use config::{build_info, FileConfig, Resolved};

#[derive(Parser)]
#[command(name = "tenconv", version, about = "Tensor-valued neuron networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with early stopping on the test split.
    Train(TrainArgs),
    /// Accuracy and loss of a checkpoint.
    Eval(EvalArgs),
    /// White-box FGSM robustness curve of a checkpoint.
    Attack(AttackArgs),
    /// FGSM examples crafted on one checkpoint, scored on another.
    Transfer(TransferArgs),
    /// Per-layer trainable-parameter counts.
    Audit(AuditArgs),
    /// Compare backprop gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (defaults to $TENCONV_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Worker threads; 1 keeps every run bitwise reproducible.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ModelChoice {
    /// Builtin model name.
    #[arg(long, conflicts_with = "spec")]
    model: Option<String>,
    /// Model spec JSON file.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    choice: ModelChoice,
    #[arg(long)]
    dataset: Option<String>,
    /// Train on a seeded subset of this many images.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    lr: Option<Real>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "model-ckpt", alias = "ckpt")]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    /// Write eval.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "model-ckpt", alias = "ckpt")]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    /// Comma-separated ascending epsilons.
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<Real>>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint the perturbations are computed on.
    #[arg(long)]
    source: PathBuf,
    /// Checkpoint that is scored.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<Real>>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    choice: ModelChoice,
    /// Reference count such as 0.39M or 22.2K.
    #[arg(long)]
    expect: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    choice: ModelChoice,
    #[arg(long, default_value_t = 1e-4)]
    tol: Real,
    #[arg(long, default_value_t = 1e-5)]
    step: Real,
    /// Coordinates sampled across all parameter tensors.
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with its exit code.
struct Fail {
    code: u8,
    message: String,
}

type CliResult<T> = Result<T, Fail>;

impl Fail {
    fn config(message: impl Into<String>) -> Self {
        Fail {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::IncompatibleSpec(_)
            | Error::ClassCountMismatch { .. }
            | Error::BadGeometry(_)
            | Error::Rank(_)
            | Error::ShapeMismatch(_) => 2,
            Error::Io(_)
            | Error::Format(_)
            | Error::DataEmpty
            | Error::LabelOutOfRange { .. }
            | Error::EmptyInput(_)
            | Error::OutOfBounds(_) => 3,
            Error::Numeric(_) | Error::DivisionByZero { .. } | Error::NotScalarLoss(_) | Error::BatchTooSmall => 4,
        };
        Fail {
            code,
            message: e.to_string(),
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Fail {
    Fail {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve_spec(model: Option<&str>, spec: Option<&Path>) -> CliResult<ModelSpec> {
    match (model, spec) {
        (_, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
            if text.trim().is_empty() {
                return Err(Fail::config(format!("{}: empty spec file", path.display())));
            }
            let spec = ModelSpec::from_json(&text)?;
            spec.trace()?;
            Ok(spec)
        }
        (Some(name), None) => Ok(builtin(name)?),
        (None, None) => Err(Fail::config("pass --model NAME or --spec FILE")),
    }
}

/// Checkpoint problems are configuration errors whatever their cause.
fn load_ckpt(path: &Path) -> CliResult<Model> {
    load_model(path).map_err(|e| Fail::config(format!("{}: {e}", path.display())))
}

fn parse_dataset(name: &str) -> CliResult<Dataset> {
    Ok(name.parse::<Dataset>()?)
}

fn load_split(
    dataset: Dataset,
    data_dir: Option<&Path>,
    split: Split,
    model: &Model,
) -> CliResult<LabeledImageSet> {
    let root = data_root(data_dir);
    let set = dataset.load(root.as_deref(), split, model.image_dims(), model.classes())?;
    let dims = set.image_dims();
    if dims != model.image_dims() {
        return Err(Fail::config(format!(
            "model expects images {:?}, dataset has {dims:?}",
            model.image_dims()
        )));
    }
    Ok(set)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_fail(path, e))
}

fn write_snapshot<T: Serialize>(dir: &Path, command: &str, resolved: &T) -> CliResult<()> {
    #[derive(Serialize)]
    struct Snapshot<'a, T> {
        command: &'a str,
        config: &'a T,
        build: config::BuildInfo,
    }
    let snap = Snapshot {
        command,
        config: resolved,
        build: build_info(),
    };
    let text = serde_json::to_string_pretty(&snap).expect("snapshot serializes");
    write_file(&dir.join("config.json"), &text)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let r = Resolved::train(&file, &a.common, &a)?;
    exec::configure_threads(r.threads);
    let spec = resolve_spec(r.model.as_deref(), r.spec.as_deref())?;
    let mut model = Model::build(&spec, r.train.seed)?;
    let dataset = parse_dataset(&r.dataset)?;
    let data_dir = r.data_dir.as_deref();
    let mut train_set = load_split(dataset, data_dir, Split::Train, &model)?;
    let val_set = load_split(dataset, data_dir, Split::Test, &model)?;
    if let Some(n) = r.subset {
        train_set = train_set.subset(n, r.train.seed)?;
    }
    r.train.validate()?;

    create_dir(&r.out)?;
    write_snapshot(&r.out, "train", &r)?;
    println!(
        "{}: {} parameters, {} train / {} validation images",
        spec.name,
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    println!("{:>5} {:>12} {:>12} {:>8}", "epoch", "train_loss", "val_loss", "val_acc");
    let report = train_with_callback(&mut model, &train_set, &val_set, &r.train, |e| {
        println!("{:>5} {:>12.6} {:>12.6} {:>7.2}%", e.epoch, e.train_loss, e.val_loss, 100.0 * e.val_acc);
    })?;
    save_model(&model, r.out.join("best.tcnn"))?;
    write_file(&r.out.join("report.json"), &report.to_json())?;
    write_file(&r.out.join("report.csv"), &report.to_csv())?;
    println!(
        "best epoch {}: val loss {:.6}, accuracy {:.2}%{}",
        report.best_epoch,
        report.best_val_loss,
        100.0 * report.best_val_acc,
        if report.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let threads = a.common.threads.or(file.threads).unwrap_or(1);
    exec::configure_threads(threads);
    let model = load_ckpt(&a.ckpt)?;
    let dataset = parse_dataset(&a.dataset.or(file.dataset).unwrap_or_else(|| "mnist".into()))?;
    let data_dir = a.common.data_dir.or(file.data_dir);
    let set = load_split(dataset, data_dir.as_deref(), Split::Test, &model)?;
    let batch = a.batch.or(file.eval_batch_size).unwrap_or(TrainConfig::default().eval_batch_size);
    let e = evaluate(&model, &set, batch)?;
    println!(
        "{}: accuracy {:.2}% ({}/{}), loss {:.6}",
        model.spec().name,
        100.0 * e.accuracy,
        e.correct,
        e.total,
        e.loss
    );
    if let Some(out) = a.out {
        create_dir(&out)?;
        write_file(&out.join("eval.json"), &serde_json::to_string_pretty(&e).expect("serializes"))?;
    }
    Ok(())
}

fn attack_config(eps: Option<Vec<Real>>, batch: Option<usize>, file: &FileConfig) -> CliResult<AttackConfig> {
    let default = AttackConfig::default();
    let cfg = AttackConfig {
        epsilons: eps.or_else(|| file.epsilons.clone()).unwrap_or(default.epsilons),
        batch_size: batch.or(file.attack_batch_size).unwrap_or(default.batch_size),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_curve(curve: &RobustnessCurve) {
    match &curve.source {
        Some(src) => println!("{} attacked with FGSM from {src}", curve.model),
        None => println!("{} under white-box FGSM", curve.model),
    }
    println!("{:>8} {:>9}", "epsilon", "accuracy");
    for p in &curve.points {
        println!("{:>8.3} {:>8.2}%", p.epsilon, 100.0 * p.accuracy);
    }
}

fn write_curve(out: &Path, curve: &RobustnessCurve) -> CliResult<()> {
    write_file(&out.join("robustness.csv"), &curve.to_csv())?;
    write_file(&out.join("robustness.json"), &curve.to_json())
}

#[derive(Serialize)]
struct AttackSnapshot<'a> {
    checkpoints: Vec<&'a Path>,
    dataset: &'a str,
    data_dir: Option<&'a Path>,
    threads: usize,
    attack: &'a AttackConfig,
}

fn cmd_attack(a: AttackArgs) -> CliResult<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let threads = a.common.threads.or(file.threads).unwrap_or(1);
    exec::configure_threads(threads);
    let cfg = attack_config(a.eps, a.batch, &file)?;
    let model = load_ckpt(&a.ckpt)?;
    let dataset_name = a.dataset.or(file.dataset.clone()).unwrap_or_else(|| "mnist".into());
    let dataset = parse_dataset(&dataset_name)?;
    let data_dir = a.common.data_dir.or(file.data_dir.clone());
    let set = load_split(dataset, data_dir.as_deref(), Split::Test, &model)?;
    let out = a.out.or(file.out.clone()).unwrap_or_else(|| PathBuf::from("attack"));
    create_dir(&out)?;
    write_snapshot(
        &out,
        "attack",
        &AttackSnapshot {
            checkpoints: vec![&a.ckpt],
            dataset: &dataset_name,
            data_dir: data_dir.as_deref(),
            threads,
            attack: &cfg,
        },
    )?;
    let curve = sweep(&model, &set, &cfg)?;
    print_curve(&curve);
    write_curve(&out, &curve)
}

fn cmd_transfer(a: TransferArgs) -> CliResult<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let threads = a.common.threads.or(file.threads).unwrap_or(1);
    exec::configure_threads(threads);
    let cfg = attack_config(a.eps, a.batch, &file)?;
    let source = load_ckpt(&a.source)?;
    let target = load_ckpt(&a.target)?;
    if source.image_dims() != target.image_dims() {
        return Err(Fail::config(format!(
            "source takes images {:?}, target takes {:?}",
            source.image_dims(),
            target.image_dims()
        )));
    }
    let dataset_name = a.dataset.or(file.dataset.clone()).unwrap_or_else(|| "mnist".into());
    let dataset = parse_dataset(&dataset_name)?;
    let data_dir = a.common.data_dir.or(file.data_dir.clone());
    let set = load_split(dataset, data_dir.as_deref(), Split::Test, &target)?;
    let out = a.out.or(file.out.clone()).unwrap_or_else(|| PathBuf::from("transfer"));
    create_dir(&out)?;
    write_snapshot(
        &out,
        "transfer",
        &AttackSnapshot {
            checkpoints: vec![&a.source, &a.target],
            dataset: &dataset_name,
            data_dir: data_dir.as_deref(),
            threads,
            attack: &cfg,
        },
    )?;
    let curve = transfer_attack(&source, &target, &set, &cfg)?;
    print_curve(&curve);
    write_curve(&out, &curve)
}

/// "0.39M" → 390000, "22.2K" → 22200, plain numbers as given.
fn parse_count(text: &str) -> CliResult<f64> {
    let t = text.trim();
    let (num, scale) = match t.chars().last() {
        Some('M' | 'm') => (&t[..t.len() - 1], 1e6),
        Some('K' | 'k') => (&t[..t.len() - 1], 1e3),
        _ => (t, 1.0),
    };
    num.parse::<f64>()
        .map(|v| v * scale)
        .map_err(|_| Fail::config(format!("cannot read parameter count '{text}'")))
}

fn cmd_audit(a: AuditArgs) -> CliResult<()> {
    let spec = resolve_spec(a.choice.model.as_deref(), a.choice.spec.as_deref())?;
    let mut audit = audit_params(&spec)?;
    if let Some(e) = &a.expect {
        audit.paper = Some(parse_count(e)?);
    }
    println!("{}", audit.render());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    exec::configure_threads(a.common.threads.or(file.threads).unwrap_or(1));
    let spec = resolve_spec(a.choice.model.as_deref(), a.choice.spec.as_deref())?;
    let model = Model::build(&spec, a.seed)?;
    if a.batch < 2 {
        return Err(Fail::config("gradcheck needs a batch of at least 2 for batch statistics"));
    }
    let data = Dataset::Synthetic.load(None, Split::Test, model.image_dims(), model.classes())?;
    let (images, labels) = data.select(&(0..a.batch.min(data.len())).collect::<Vec<_>>())?;
    let opts = CheckOptions {
        step: a.step,
        tolerance: a.tol,
        max_coordinates: a.coords,
        seed: a.seed,
    };
    let report = model_grad_check(&model, &images, &labels, &opts)?;
    println!("{:<28} {:>8} {:>9} {:>12}", "parameter", "checked", "excluded", "max_rel_err");
    for p in &report.params {
        println!("{:<28} {:>8} {:>9} {:>12.3e}", p.name, p.checked, p.excluded, p.max_rel_error);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: max relative error {:.3e} (tolerance {:.1e}), {} coordinates excluded at kinks",
        report.max_rel_error(),
        report.tolerance,
        report.excluded()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Fail {
            code: 4,
            message: format!("gradient check failed for {}", spec.name),
        })
    }
}
