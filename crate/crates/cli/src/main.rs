//! `laxcat` command-line driver: synthetic data, training, evaluation,
//! explanation heatmaps, baselines and grid search.
//!
//! Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use laxcat::baselines::{knn_dtw_classify, lr_predict, lr_train, DtwCost, DtwOptions, LrConfig};
use laxcat::dataset::{generate_synthetic, stratified_split, MtsDataset};
use laxcat::eval::{aam, evaluate, export_heatmap, EvalReport, OverlapRule};
use laxcat::model::{Ablation, LaxcatModel};
use laxcat::numerics::{mean, sample_std, Matrix};
use laxcat::trainer::{grid_search, train, Grids, Selection};
use serde::Serialize;

use config::RunConfig;

/// A problem with the invocation rather than with the data.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Parser)]
#[command(name = "laxcat", version, about = "Explainable multivariate time-series classification")]
struct Cli {
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true, env = "LAXCAT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the square-wave benchmark dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON run config; its `synth` section supplies defaults
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Noise standard deviation
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        len_min: Option<usize>,
        #[arg(long)]
        len_max: Option<usize>,
        #[arg(long)]
        mag_min: Option<f64>,
        #[arg(long)]
        mag_max: Option<f64>,
    },
    /// Train with repeated stratified splits and write the best model
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model checkpoint to write
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        ablate: Option<Ablation>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        selection: Option<SelectionArg>,
        /// Sum gradients in a fixed order
        #[arg(long)]
        deterministic: bool,
    },
    /// Accuracy, confusion matrix and AAM of a saved model
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Split seed, as recorded per run in a training report
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, value_enum, default_value_t = RuleArg::AnyPoint)]
        overlap: RuleArg,
    },
    /// Write the joint-attention heatmap of one instance
    Explain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: usize,
        /// CSV path; the JSON sidecar is written next to it
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a reference classifier on the training splits
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Neighbours for dtw1nn voting
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        squared: bool,
        #[arg(long)]
        znormalize: bool,
        /// L2 penalty for lr
        #[arg(long)]
        l2: Option<f64>,
        /// Training epochs for lr
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Exhaustive hyperparameter search
    Gridsearch {
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSON object with `filters`, `kernel_lens`, `hidden`, `reg_alpha` lists
        #[arg(long)]
        grids: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Checkpoint of the best configuration
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Accuracy,
    Loss,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    AnyPoint,
    HalfWindow,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Method {
    Dtw1nn,
    Lr,
}

/// Report wrapper; wall-clock figures live only under `timing`.
#[derive(Serialize)]
struct Output<'a, T: Serialize> {
    command: &'static str,
    result: &'a T,
    timing: Timing,
}

#[derive(Serialize)]
struct Timing {
    total_seconds: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    run_seconds: Vec<f64>,
}

fn write_report<T: Serialize>(
    path: &Path,
    command: &'static str,
    result: &T,
    started: Instant,
    run_seconds: Vec<f64>,
) -> Result<()> {
    let out = Output {
        command,
        result,
        timing: Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            run_seconds,
        },
    };
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing report {}", path.display()))
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.or_else(|| fallback.clone()) {
        Some(p) => Ok(p),
        None => usage(format!("--{name} is required (or set paths.{name} in the config)")),
    }
}

fn load_data(path: &Path) -> Result<MtsDataset> {
    Ok(MtsDataset::load(path)?)
}

/// Surfaces argument errors from configuration checks as usage errors.
fn as_usage(r: laxcat::Result<()>) -> Result<()> {
    match r {
        Err(laxcat::Error::Argument(m)) => usage(m),
        other => Ok(other?),
    }
}

fn cmd_synth(
    out: PathBuf,
    config: Option<PathBuf>,
    n: Option<usize>,
    seed: Option<u64>,
    noise: Option<f64>,
    lens: (Option<usize>, Option<usize>),
    mags: (Option<f64>, Option<f64>),
) -> Result<()> {
    let mut params = RunConfig::load(config.as_deref())?.synth;
    params.n = n.unwrap_or(params.n);
    params.seed = seed.unwrap_or(params.seed);
    params.noise_sigma = noise.unwrap_or(params.noise_sigma);
    params.len_min = lens.0.unwrap_or(params.len_min);
    params.len_max = lens.1.unwrap_or(params.len_max);
    params.mag_min = mags.0.unwrap_or(params.mag_min);
    params.mag_max = mags.1.unwrap_or(params.mag_max);
    as_usage(params.validate())?;
    let ds = generate_synthetic(&params)?;
    ds.save(&out)?;
    let counts = ds.class_counts();
    println!(
        "wrote {}: n={} negative={} positive={}",
        out.display(),
        ds.len(),
        counts[0],
        counts[1]
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
    ablate: Option<Ablation>,
    repeats: Option<usize>,
    seed: Option<u64>,
    selection: Option<SelectionArg>,
    deterministic: bool,
) -> Result<()> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(config.as_deref())?;
    cfg.override_seed(seed);
    if let Some(a) = ablate {
        cfg.model.ablation = a;
    }
    if let Some(r) = repeats {
        cfg.protocol.repeats = r;
    }
    if let Some(s) = selection {
        cfg.protocol.selection = match s {
            SelectionArg::Accuracy => Selection::ValAccuracy,
            SelectionArg::Loss => Selection::ValLoss,
        };
    }
    if deterministic {
        cfg.protocol.deterministic = true;
    }
    let data = required(data, &cfg.paths.data, "data")?;
    let out = required(out, &cfg.paths.model, "model")?;
    let report_path = required(report, &cfg.paths.report, "report")?;
    as_usage(cfg.protocol.validate())?;

    let ds = load_data(&data)?;
    let model_cfg = cfg.model.for_shape(ds.p, ds.t_len, ds.class_count);
    as_usage(model_cfg.validate())?;
    let (model, report) = train(&ds, &model_cfg, &cfg.protocol)?;
    model.save(&out)?;
    let run_seconds = report.wall_seconds();
    write_report(&report_path, "train", &report, started, run_seconds)?;
    println!(
        "{}: test accuracy {:.2} +/- {:.2} over {} repeats",
        report.ablation,
        report.mean_test_accuracy,
        report.std_test_accuracy,
        report.runs.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    split: SplitArg,
    split_seed: u64,
    indices: usize,
    report: EvalReport,
}

fn cmd_eval(
    data: PathBuf,
    model: PathBuf,
    report: PathBuf,
    split: SplitArg,
    split_seed: u64,
    overlap: RuleArg,
) -> Result<()> {
    let started = Instant::now();
    let ds = load_data(&data)?;
    let model = LaxcatModel::load(&model)?;
    let indices = if split == SplitArg::All {
        (0..ds.len()).collect()
    } else {
        let fractions = laxcat::trainer::TrainProtocol::default().fractions;
        let s = stratified_split(&ds, fractions, split_seed)?;
        match split {
            SplitArg::Train => s.train,
            SplitArg::Val => s.val,
            _ => s.test,
        }
    };
    let rule = match overlap {
        RuleArg::AnyPoint => OverlapRule::AnyPoint,
        RuleArg::HalfWindow => OverlapRule::HalfWindow,
    };
    let result = EvalOutput {
        split,
        split_seed,
        indices: indices.len(),
        report: evaluate(&model, &ds, &indices, rule)?,
    };
    write_report(&report, "eval", &result, started, Vec::new())?;
    println!("accuracy {:.2} on {} instances", result.report.accuracy, result.indices);
    if let Some(a) = result.report.mean_aam {
        println!("mean AAM {a:.2}");
    }
    Ok(())
}

fn cmd_explain(data: PathBuf, model: PathBuf, index: usize, out: PathBuf) -> Result<()> {
    let ds = load_data(&data)?;
    if index >= ds.len() {
        return Err(anyhow!("index {index} out of range for {} instances", ds.len()));
    }
    let model = LaxcatModel::load(&model)?;
    let explanation = model.explain(&ds.instances[index])?;
    export_heatmap(&explanation, &out)?;
    let (v, t) = explanation.argmax_cell();
    let (start, end) = explanation.layout.window(t);
    println!(
        "instance {index}: strongest cell is variable {} over [{start}, {end})",
        v + 1
    );
    if let Some(mask) = &ds.masks[index] {
        println!("AAM {:.2}", aam(&explanation, mask, OverlapRule::AnyPoint)?);
    }
    Ok(())
}

#[derive(Serialize)]
struct BaselineRun {
    repeat: usize,
    split_seed: u64,
    test: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_l2_norm: Option<f64>,
}

#[derive(Serialize)]
struct BaselineReport {
    method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    dtw: Option<DtwOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<LrConfig>,
    runs: Vec<BaselineRun>,
    test_accuracies: Vec<f64>,
    mean_test_accuracy: f64,
    std_test_accuracy: f64,
}

#[allow(clippy::too_many_arguments)]
fn cmd_baseline(
    data: PathBuf,
    method: Method,
    report: PathBuf,
    config: Option<PathBuf>,
    repeats: Option<usize>,
    seed: Option<u64>,
    k: usize,
    dtw_flags: (bool, bool),
    lr_flags: (Option<f64>, Option<usize>),
) -> Result<()> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(config.as_deref())?;
    cfg.override_seed(seed);
    if let Some(r) = repeats {
        cfg.protocol.repeats = r;
    }
    as_usage(cfg.protocol.validate())?;
    if k == 0 {
        return usage("--k must be at least 1");
    }
    let dtw = DtwOptions {
        cost: if dtw_flags.0 {
            DtwCost::Squared
        } else {
            DtwCost::Absolute
        },
        znormalize: dtw_flags.1,
    };
    let mut lr = LrConfig {
        seed: cfg.protocol.seed,
        ..LrConfig::default()
    };
    lr.l2 = lr_flags.0.unwrap_or(lr.l2);
    lr.epochs = lr_flags.1.unwrap_or(lr.epochs);

    let ds = load_data(&data)?;
    let mut runs = Vec::new();
    let mut run_seconds = Vec::new();
    for repeat in 0..cfg.protocol.repeats {
        let t0 = Instant::now();
        let split_seed = cfg.protocol.split_seed(repeat);
        let split = stratified_split(&ds, cfg.protocol.fractions, split_seed)?;
        let labels: Vec<usize> = split.test.iter().map(|&i| ds.labels[i]).collect();
        let (preds, weight_l2_norm) = match method {
            Method::Dtw1nn => {
                let train: Vec<&Matrix> = split.train.iter().map(|&i| &ds.instances[i]).collect();
                let train_y: Vec<usize> = split.train.iter().map(|&i| ds.labels[i]).collect();
                let queries: Vec<&Matrix> = split.test.iter().map(|&i| &ds.instances[i]).collect();
                (knn_dtw_classify(&train, &train_y, &queries, k, dtw)?, None)
            }
            Method::Lr => {
                let model = lr_train(&ds, &split.train, &lr)?;
                (lr_predict(&model, &ds, &split.test)?, Some(model.weight_norm()))
            }
        };
        runs.push(BaselineRun {
            repeat,
            split_seed,
            test: EvalReport::from_predictions(&preds, &labels, ds.class_count)?,
            weight_l2_norm,
        });
        run_seconds.push(t0.elapsed().as_secs_f64());
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
    let result = BaselineReport {
        method,
        dtw: (method == Method::Dtw1nn).then_some(dtw),
        k: (method == Method::Dtw1nn).then_some(k),
        lr: (method == Method::Lr).then_some(lr),
        mean_test_accuracy: mean(&accs),
        std_test_accuracy: sample_std(&accs),
        test_accuracies: accs,
        runs,
    };
    write_report(&report, "baseline", &result, started, run_seconds)?;
    println!(
        "test accuracy {:.2} +/- {:.2}",
        result.mean_test_accuracy, result.std_test_accuracy
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gridsearch(
    data: Option<PathBuf>,
    grids: Option<PathBuf>,
    config: Option<PathBuf>,
    report: Option<PathBuf>,
    out: Option<PathBuf>,
    repeats: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(config.as_deref())?;
    cfg.override_seed(seed);
    if let Some(r) = repeats {
        cfg.protocol.repeats = r;
    }
    as_usage(cfg.protocol.validate())?;
    let grids: Grids = match grids {
        None => Grids::default(),
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .with_context(|| format!("reading grids {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| Usage(format!("invalid grids {}: {e}", p.display())))?
        }
    };
    let data = required(data, &cfg.paths.data, "data")?;
    let report_path = required(report, &cfg.paths.report, "report")?;
    let ds = load_data(&data)?;
    let base = cfg.model.for_shape(ds.p, ds.t_len, ds.class_count);
    as_usage(base.validate())?;
    let (model, result) = grid_search(&ds, &base, &grids, &cfg.protocol)?;
    if let Some(out) = out.or(cfg.paths.model) {
        model.save(&out)?;
    }
    write_report(&report_path, "gridsearch", &result, started, Vec::new())?;
    let best = &result.rows[result.best];
    println!(
        "best of {}: filters={} kernel_len={} hidden={} reg_alpha={} (val {:.2}, test {:.2})",
        result.rows.len(),
        best.filters,
        best.kernel_len,
        best.hidden,
        best.reg_alpha,
        best.mean_val_accuracy,
        best.mean_test_accuracy
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth {
            out,
            config,
            n,
            seed,
            noise,
            len_min,
            len_max,
            mag_min,
            mag_max,
        } => cmd_synth(out, config, n, seed, noise, (len_min, len_max), (mag_min, mag_max)),
        Command::Train {
            data,
            config,
            out,
            report,
            ablate,
            repeats,
            seed,
            selection,
            deterministic,
        } => cmd_train(data, config, out, report, ablate, repeats, seed, selection, deterministic),
        Command::Eval {
            data,
            model,
            report,
            split,
            split_seed,
            overlap,
        } => cmd_eval(data, model, report, split, split_seed, overlap),
        Command::Explain {
            data,
            model,
            index,
            out,
        } => cmd_explain(data, model, index, out),
        Command::Baseline {
            data,
            method,
            report,
            config,
            repeats,
            seed,
            k,
            squared,
            znormalize,
            l2,
            epochs,
        } => cmd_baseline(
            data,
            method,
            report,
            config,
            repeats,
            seed,
            k,
            (squared, znormalize),
            (l2, epochs),
        ),
        Command::Gridsearch {
            data,
            grids,
            config,
            report,
            out,
            repeats,
            seed,
        } => cmd_gridsearch(data, grids, config, report, out, repeats, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
