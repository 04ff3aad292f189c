//! Command implementations.
//!
//! Every setting resolves as flag → config-file key → built-in default.
//! Configuration mistakes are usage errors (exit 2); anything that goes
//! wrong with data or training is a runtime error (exit 1).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context as _;

use multires_core::consistency::{attention_weights_value, AttentionParams, Reduce, SmaxConfig};
use multires_core::data::{build_correspondence, Instance, MultiResDataset};
use multires_core::io::{format_f64, load_dataset, save_dataset};
use multires_core::model::{Classifier, ModelKind, DEFAULT_INIT_SCALE};
use multires_core::synth::{generate_synthetic, SynthConfig};
use multires_core::train::{
    cross_validate_lambda, default_lambda_grid, default_model_specs, save_run,
    subsample_fine_labeled, train, Method, TrainConfig, TrainResult, DEFAULT_EPOCHS,
    DEFAULT_HIDDEN_DIM, DEFAULT_LEARNING_RATE,
};

use crate::cli::{
    Cli, Command, CompareArgs, ExportAttentionArgs, GenerateArgs, MethodArg, ModelArg,
    ModelComplexityArgs, ReduceArg, SweepLabelsArgs, TrainArgs, TrainFlags,
};
use crate::fileconf::{self, FileConfig};
use crate::tables::{fmt_acc, mean_std, render_csv, render_text};

const DEFAULT_FOLDS: usize = 3;

const ALL_METHODS: [MethodArg; 6] = [
    MethodArg::OnlyFine,
    MethodArg::SsrManifold,
    MethodArg::Propagate,
    MethodArg::Augment,
    MethodArg::MultiResMil,
    MethodArg::MultiResAttention,
];

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config file → exit 2.
    Usage(String),
    /// Data or training failure → exit 1.
    Runtime(anyhow::Error),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Shorthand for mapping library errors into runtime CLI errors.
trait Rt<T> {
    fn rt(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Rt<T> for Result<T, E> {
    fn rt(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = fileconf::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(args) => cmd_generate(args, &file),
        Command::Train(args) => cmd_train(args, &file),
        Command::Compare(args) => cmd_compare(args, &file),
        Command::SweepLabels(args) => cmd_sweep_labels(args, &file),
        Command::ModelComplexity(args) => cmd_model_complexity(args, &file),
        Command::ExportAttention(args) => cmd_export_attention(args, &file),
    }
}

// ── Setting resolution ──────────────────────────────────────────────────

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn pick_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| usage(format!("--{flag} is required (flag or config file)")))
}

fn parse_value_enum<T: clap::ValueEnum>(s: &str, key: &str) -> Result<T, CliError> {
    T::from_str(s, false).map_err(|_| usage(format!("config file: invalid {key} value `{s}`")))
}

/// Training settings shared by every command that runs the trainer.
#[derive(Clone)]
struct Settings {
    /// Fixed λ when given; None lets report commands cross-validate.
    lambda: Option<Vec<f64>>,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    smax: SmaxConfig,
    reduce: Reduce,
    model: ModelKind,
    hidden_dim: usize,
    folds: usize,
}

fn resolve_settings(flags: &TrainFlags, file: &FileConfig) -> Result<Settings, CliError> {
    let lambda = pick_opt(flags.lambda.clone(), file.lambda.clone());
    if let Some(values) = &lambda {
        if values.is_empty() {
            return Err(usage("--lambda needs at least one value"));
        }
        if let Some(bad) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(usage(format!("lambda must be nonnegative, got {bad}")));
        }
    }
    let lr = pick(flags.lr, file.lr, DEFAULT_LEARNING_RATE);
    if !(lr > 0.0) {
        return Err(usage(format!("learning rate must be positive, got {lr}")));
    }
    let epochs = pick(flags.epochs, file.epochs, DEFAULT_EPOCHS);
    if epochs == 0 {
        return Err(usage("epochs must be at least 1"));
    }
    let smax_base = pick(flags.smax_base, file.smax_base, std::f64::consts::E);
    let smax = SmaxConfig::new(smax_base).map_err(|e| usage(e.to_string()))?;
    let reduce = match (flags.consistency_reduce, file.consistency_reduce.as_deref()) {
        (Some(r), _) => r.to_reduce(),
        (None, Some(s)) => parse_value_enum::<ReduceArg>(s, "consistency_reduce")?.to_reduce(),
        (None, None) => Reduce::Mean,
    };
    let model = match (flags.model, file.model.as_deref()) {
        (Some(m), _) => m.to_kind(),
        (None, Some(s)) => parse_value_enum::<ModelArg>(s, "model")?.to_kind(),
        (None, None) => ModelKind::Mlp1,
    };
    let hidden_dim = pick(flags.hidden_dim, file.hidden_dim, DEFAULT_HIDDEN_DIM);
    if hidden_dim == 0 {
        return Err(usage("hidden-dim must be at least 1"));
    }
    let folds = pick(flags.folds, file.folds, DEFAULT_FOLDS);
    if folds < 2 {
        return Err(usage("folds must be at least 2"));
    }
    Ok(Settings {
        lambda,
        lr,
        epochs,
        batch_size: pick(flags.batch_size, file.batch_size, 0),
        smax,
        reduce,
        model,
        hidden_dim,
        folds,
    })
}

fn resolve_methods(
    flag: Option<Vec<MethodArg>>,
    file: &FileConfig,
    default: &[MethodArg],
) -> Result<Vec<Method>, CliError> {
    let args: Vec<MethodArg> = if let Some(given) = flag {
        given
    } else if let Some(joined) = file.method.as_deref() {
        joined
            .split(',')
            .map(|part| parse_value_enum::<MethodArg>(part.trim(), "method"))
            .collect::<Result<_, _>>()?
    } else {
        default.to_vec()
    };
    if args.is_empty() {
        return Err(usage("--method needs at least one method"));
    }
    Ok(args.into_iter().map(MethodArg::to_method).collect())
}

fn resolve_seeds(flag: Option<Vec<u64>>, file: &FileConfig) -> Result<Vec<u64>, CliError> {
    let seeds = pick(flag, file.seeds.clone(), vec![0]);
    if seeds.is_empty() {
        return Err(usage("--seeds needs at least one seed"));
    }
    Ok(seeds)
}

fn single_seed(flag: Option<Vec<u64>>, file: &FileConfig, cmd: &str) -> Result<u64, CliError> {
    let seeds = resolve_seeds(flag, file)?;
    if seeds.len() != 1 {
        return Err(usage(format!(
            "{cmd} takes exactly one seed, got {}",
            seeds.len()
        )));
    }
    Ok(seeds[0])
}

fn build_config(
    dataset: &MultiResDataset,
    method: Method,
    s: &Settings,
    seed: u64,
) -> TrainConfig {
    let mut cfg = TrainConfig::for_dataset(method, dataset);
    cfg.model_specs = default_model_specs(dataset, s.model, s.hidden_dim, DEFAULT_INIT_SCALE);
    if let Some(lambda) = &s.lambda {
        cfg.lambda = lambda.clone();
    }
    cfg.lr = s.lr;
    cfg.epochs = s.epochs;
    cfg.batch_size = s.batch_size;
    cfg.seed = seed;
    cfg.smax = s.smax;
    cfg.consistency_reduce = s.reduce;
    cfg
}

/// One report-grade run: λ comes from the settings when fixed, otherwise
/// from cross-validating the default grid.
fn run_one(
    dataset: &MultiResDataset,
    method: Method,
    s: &Settings,
    seed: u64,
) -> Result<TrainResult, CliError> {
    let mut cfg = build_config(dataset, method, s, seed);
    if method.uses_lambda() && s.lambda.is_none() {
        let grid = default_lambda_grid(dataset.num_coarse());
        let report = cross_validate_lambda(dataset, &cfg, &grid, s.folds).rt()?;
        cfg.lambda = report.best;
    }
    train(dataset, &cfg).rt()
}

/// Report-command failures must name the run that failed.
fn with_run_context(err: CliError, method: Method, seed: u64) -> CliError {
    match err {
        CliError::Runtime(e) => CliError::Runtime(e.context(format!(
            "method {} seed {seed} failed",
            method.name()
        ))),
        other => other,
    }
}

/// Print the text table and, when an output directory is given, write
/// `<stem>.txt` and `<stem>.csv` built from the same cells.
fn emit_report(
    out: Option<&Path>,
    stem: &str,
    headers: &[&str],
    rows: &[Vec<String>],
) -> Result<(), CliError> {
    let text = render_text(headers, rows);
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .rt()?;
        let write = |name: String, body: &str| -> Result<(), CliError> {
            let path = dir.join(name);
            std::fs::write(&path, body)
                .with_context(|| format!("writing {}", path.display()))
                .rt()
        };
        write(format!("{stem}.txt"), &text)?;
        write(format!("{stem}.csv"), &render_csv(headers, rows))?;
    }
    Ok(())
}

// ── Commands ────────────────────────────────────────────────────────────

fn cmd_generate(args: GenerateArgs, file: &FileConfig) -> Result<(), CliError> {
    let out = require(pick_opt(args.out, file.out.clone()), "out")?;
    let seed = single_seed(args.seeds, file, "generate")?;
    let mut cfg = SynthConfig::default();
    if let Some(v) = pick_opt(args.grid_side, file.grid_side) {
        cfg.grid_side = v;
    }
    if let Some(v) = pick_opt(args.ratio, file.ratio) {
        cfg.ratio = v;
    }
    if let Some(v) = pick_opt(args.fine_dim, file.fine_dim) {
        cfg.fine_dim = v;
    }
    if let Some(v) = pick_opt(args.coarse_dim, file.coarse_dim) {
        cfg.coarse_dim = v;
    }
    if let Some(v) = pick_opt(args.class_sep, file.class_sep) {
        cfg.class_sep = v;
    }
    if let Some(v) = pick_opt(args.noise, file.noise) {
        cfg.noise = v;
    }
    if let Some(v) = pick_opt(args.label_channel_noise, file.label_channel_noise) {
        cfg.label_channel_noise = v;
    }
    if let Some(v) = pick_opt(args.coarse_labeled, file.coarse_labeled) {
        cfg.n_coarse_labeled = v;
    }
    if let Some(v) = pick_opt(args.fine_labeled, file.fine_labeled) {
        cfg.n_fine_labeled = v;
    }
    if let Some(v) = pick_opt(args.rho_min, file.rho_min) {
        cfg.rho_min = v;
    }
    if let Some(v) = pick_opt(args.positive_cell_prob, file.positive_cell_prob) {
        cfg.positive_cell_prob = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let synth = generate_synthetic(&cfg, seed).rt()?;
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .rt()?;
    save_dataset(&out, &synth.dataset).rt()?;
    println!("wrote dataset to {}", out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let data_dir = require(pick_opt(args.data_dir, file.data_dir.clone()), "data-dir")?;
    let out = require(pick_opt(args.out, file.out.clone()), "out")?;
    let method = match (args.method, file.method.as_deref()) {
        (Some(m), _) => m.to_method(),
        (None, Some(s)) => parse_value_enum::<MethodArg>(s, "method")?.to_method(),
        (None, None) => return Err(usage("--method is required (flag or config file)")),
    };
    let seed = single_seed(args.seeds, file, "train")?;
    let settings = resolve_settings(&args.train, file)?;

    let dataset = load_dataset(&data_dir).rt()?;
    // one training, fixed λ (default 1); report commands do the λ search
    let cfg = build_config(&dataset, method, &settings, seed);
    let result = train(&dataset, &cfg).rt()?;
    save_run(&out, &result).rt()?;
    println!(
        "method {} seed {seed}: fine-test accuracy {}",
        method.name(),
        fmt_acc(result.fine_test_accuracy)
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs, file: &FileConfig) -> Result<(), CliError> {
    let data_dir = require(pick_opt(args.data_dir, file.data_dir.clone()), "data-dir")?;
    let out = pick_opt(args.out, file.out.clone());
    let methods = resolve_methods(args.method, file, &ALL_METHODS)?;
    let seeds = resolve_seeds(args.seeds, file)?;
    let settings = resolve_settings(&args.train, file)?;
    let dataset = load_dataset(&data_dir).rt()?;

    let mut summary: Vec<(String, f64, f64)> = Vec::with_capacity(methods.len());
    for &method in &methods {
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let result = run_one(&dataset, method, &settings, seed)
                .map_err(|e| with_run_context(e, method, seed))?;
            accs.push(result.fine_test_accuracy);
        }
        let (mean, std) = mean_std(&accs);
        summary.push((method.name().to_string(), mean, std));
    }
    summary.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("accuracies are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|(name, mean, std)| vec![name.clone(), fmt_acc(*mean), fmt_acc(*std)])
        .collect();
    emit_report(
        out.as_deref(),
        "compare",
        &["method", "mean_accuracy", "std_accuracy"],
        &rows,
    )
}

fn cmd_sweep_labels(args: SweepLabelsArgs, file: &FileConfig) -> Result<(), CliError> {
    let data_dir = require(pick_opt(args.data_dir, file.data_dir.clone()), "data-dir")?;
    let out = pick_opt(args.out, file.out.clone());
    let budgets = require(pick_opt(args.budgets, file.budgets.clone()), "budgets")?;
    if budgets.is_empty() {
        return Err(usage("--budgets needs at least one value"));
    }
    let methods = resolve_methods(
        args.method,
        file,
        &[MethodArg::MultiResAttention, MethodArg::OnlyFine],
    )?;
    let seeds = resolve_seeds(args.seeds, file)?;
    let settings = resolve_settings(&args.train, file)?;
    let dataset = load_dataset(&data_dir).rt()?;

    let mut accs = vec![vec![Vec::new(); methods.len()]; budgets.len()];
    for (bi, &budget) in budgets.iter().enumerate() {
        for &seed in &seeds {
            let budget_dataset = subsample_fine_labeled(&dataset, budget, seed).rt()?;
            for (mi, &method) in methods.iter().enumerate() {
                let result = run_one(&budget_dataset, method, &settings, seed)
                    .map_err(|e| with_run_context(e, method, seed))?;
                accs[bi][mi].push(result.fine_test_accuracy);
            }
        }
    }
    let mut rows = Vec::with_capacity(budgets.len() * methods.len());
    for (bi, &budget) in budgets.iter().enumerate() {
        for (mi, &method) in methods.iter().enumerate() {
            let (mean, std) = mean_std(&accs[bi][mi]);
            rows.push(vec![
                budget.to_string(),
                method.name().to_string(),
                fmt_acc(mean),
                fmt_acc(std),
            ]);
        }
    }
    emit_report(
        out.as_deref(),
        "sweep",
        &["budget", "method", "mean_accuracy", "std_accuracy"],
        &rows,
    )
}

fn cmd_model_complexity(args: ModelComplexityArgs, file: &FileConfig) -> Result<(), CliError> {
    let data_dir = require(pick_opt(args.data_dir, file.data_dir.clone()), "data-dir")?;
    let out = pick_opt(args.out, file.out.clone());
    let seeds = resolve_seeds(args.seeds, file)?;
    let settings = resolve_settings(&args.train, file)?;
    let dataset = load_dataset(&data_dir).rt()?;

    let grid = [
        (ModelKind::LogReg, Method::OnlyFine),
        (ModelKind::LogReg, Method::MultiResAttention),
        (ModelKind::Mlp1, Method::OnlyFine),
        (ModelKind::Mlp1, Method::MultiResAttention),
    ];
    let mut rows = Vec::with_capacity(grid.len());
    for (kind, method) in grid {
        let mut cell_settings = settings.clone();
        cell_settings.model = kind;
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let result = run_one(&dataset, method, &cell_settings, seed)
                .map_err(|e| with_run_context(e, method, seed))?;
            accs.push(result.fine_test_accuracy);
        }
        let (mean, _) = mean_std(&accs);
        rows.push(vec![
            kind.name().to_string(),
            method.name().to_string(),
            fmt_acc(mean),
        ]);
    }
    emit_report(
        out.as_deref(),
        "complexity",
        &["model", "method", "mean_accuracy"],
        &rows,
    )
}

fn cmd_export_attention(args: ExportAttentionArgs, file: &FileConfig) -> Result<(), CliError> {
    let run_dir = require(pick_opt(args.checkpoint, file.checkpoint.clone()), "checkpoint")?;
    let data_dir = require(pick_opt(args.data_dir, file.data_dir.clone()), "data-dir")?;
    let out: PathBuf = require(pick_opt(args.out, file.out.clone()), "out")?;

    let dataset = load_dataset(&data_dir).rt()?;
    let fine = Classifier::load_checkpoint(&run_dir.join("fine.model")).rt()?;
    if !run_dir.join("attention1.att").exists() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "{} has no attention parameters (attention1.att missing); \
             export needs a run trained with multires-attention",
            run_dir.display()
        )));
    }

    let mut body = String::from("coarse_id,fine_id");
    for l in 0..dataset.location_dim {
        write!(body, ",loc{l}").unwrap();
    }
    body.push_str(",attention_weight\n");

    for (k, layer) in dataset.coarse.iter().enumerate() {
        let coarse_model =
            Classifier::load_checkpoint(&run_dir.join(format!("coarse{}.model", k + 1))).rt()?;
        let att =
            AttentionParams::load_checkpoint(&run_dir.join(format!("attention{}.att", k + 1)))
                .rt()?;
        let corr = build_correspondence(layer, &dataset.fine).rt()?;
        let by_id: BTreeMap<usize, &Instance> =
            dataset.fine.unlabeled.iter().map(|i| (i.id, i)).collect();
        for inst in &layer.unlabeled {
            let members: Vec<&Instance> = corr
                .group(inst.id)
                .unwrap_or(&[])
                .iter()
                .filter_map(|fid| by_id.get(fid).copied())
                .collect();
            if members.is_empty() {
                continue;
            }
            let h_coarse = coarse_model.hidden_value(&inst.features);
            let h_fine: Vec<Vec<f64>> =
                members.iter().map(|m| fine.hidden_value(&m.features)).collect();
            let weights = attention_weights_value(&h_fine, &h_coarse, &att);
            for (member, weight) in members.iter().zip(&weights) {
                write!(body, "{},{}", inst.id, member.id).unwrap();
                for loc in &member.location {
                    write!(body, ",{}", format_f64(*loc)).unwrap();
                }
                writeln!(body, ",{}", format_f64(*weight)).unwrap();
            }
        }
    }

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .rt()?;
        }
    }
    std::fs::write(&out, &body)
        .with_context(|| format!("writing {}", out.display()))
        .rt()?;
    println!("wrote attention weights to {}", out.display());
    Ok(())
}
