//! Command-line interface: generate synthetic datasets, train and
//! evaluate models, explain single decisions, and report attention cost.

use anyhow::{ensure, Context};
use clap::{Args, Parser, Subcommand};
use fwt_core::data::{
    load_dir, load_series, parse_delimited, write_dataset, zscore, SynthSpec,
};
use fwt_core::explain::{explain_series, top_k_landmarks, write_relevancy};
use fwt_core::harness::{
    evaluate, flop_model, measure_forward, parse_run_config, train, write_metrics, TrainConfig,
};
use fwt_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "fwt",
    version,
    about = "Fused-window transformer for multivariate time-series classification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic dataset with planted events.
    Synth(SynthArgs),
    /// Train a model on a dataset directory (train/ and val/ splits).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Explain one classification; writes a relevancy map.
    Explain(ExplainArgs),
    /// Report analytic attention cost, optionally with measured times.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory (creates train/, val/, events.csv).
    #[arg(long)]
    out: PathBuf,
    /// Training samples to generate.
    #[arg(long, default_value_t = 800)]
    train: usize,
    /// Validation samples to generate.
    #[arg(long, default_value_t = 200)]
    val: usize,
    /// Series length.
    #[arg(long, default_value_t = 60)]
    t: usize,
    /// Channels per time point.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Event onset times.
    #[arg(long, value_delimiter = ',', default_values_t = [15usize, 38])]
    onsets: Vec<usize>,
    /// Event duration in time points.
    #[arg(long, default_value_t = 4)]
    duration: usize,
    /// Event response magnitude.
    #[arg(long, default_value_t = 1.25)]
    amplitude: f64,
    /// White-noise standard deviation.
    #[arg(long, default_value_t = 0.45)]
    noise: f64,
    /// Causal moving-average width (1 disables smoothing).
    #[arg(long, default_value_t = 3)]
    smooth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing train/ and val/.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch log as CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Flat key=value config file (model and training keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config keys, e.g. --set epochs=5 --set model_dim=16.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Split subdirectory to evaluate; "." evaluates --data itself.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct ExplainArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Series to explain (.fwts, or delimited text).
    #[arg(long)]
    input: PathBuf,
    /// Relevancy map output file.
    #[arg(long)]
    out: PathBuf,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    class: Option<usize>,
    /// How many top time points to print.
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Skip per-channel standardization of the input.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Series lengths to report.
    #[arg(long, value_delimiter = ',', default_values_t = [150usize, 300, 600, 1200])]
    t: Vec<usize>,
    /// Flat key=value config file (model keys apply).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config keys.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Also measure forward-pass wall-clock.
    #[arg(long)]
    measure: bool,
    /// Repetitions per measured length (best is reported).
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth(a) => run_synth(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Explain(a) => run_explain(a),
        Cmd::Bench(a) => run_bench(a),
    }
}

/// Config file text (if any) plus --set overrides, parsed over defaults.
fn load_run_config(
    config: &Option<PathBuf>,
    sets: &[String],
) -> anyhow::Result<(ModelConfig, TrainConfig)> {
    let mut text = String::new();
    if let Some(path) = config {
        text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        text.push('\n');
    }
    for s in sets {
        ensure!(s.contains('='), "--set expects KEY=VALUE, got '{}'", s);
        text.push_str(s);
        text.push('\n');
    }
    Ok(parse_run_config(&text)?)
}

fn run_synth(a: SynthArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        t: a.t,
        n: a.channels,
        num_classes: a.classes,
        onsets: a.onsets,
        duration: a.duration,
        amplitude: a.amplitude,
        noise: a.noise,
        smooth_width: a.smooth,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    write_dataset(&a.out, &spec, a.train, a.val, &mut rng)
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!(
        "wrote {} train + {} val samples to {} (T={} N={} classes={})",
        a.train,
        a.val,
        a.out.display(),
        spec.t,
        spec.n,
        spec.num_classes
    );
    let events: Vec<String> = spec
        .events()
        .iter()
        .map(|(o, d)| format!("{}+{}", o, d))
        .collect();
    println!("planted events (onset+duration): {}", events.join(" "));
    Ok(())
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let (cfg, tc) = load_run_config(&a.config, &a.sets)?;
    let train_set = load_dir(&a.data.join("train"))
        .with_context(|| format!("loading {}/train", a.data.display()))?;
    let val_set = load_dir(&a.data.join("val"))
        .with_context(|| format!("loading {}/val", a.data.display()))?;
    println!(
        "training on {} samples, validating on {} (epochs={} batch={} seed={})",
        train_set.len(),
        val_set.len(),
        tc.epochs,
        tc.batch_size,
        tc.seed
    );
    let (model, rows) = train(&train_set, &val_set, &cfg, &tc)?;
    for r in &rows {
        println!(
            "epoch {:>3}  lr {:.5e}  loss {:.5e}  ce {:.5e}  cwr {:.5e}  val_acc {:.5e}  val_auroc {:.5e}",
            r.epoch, r.lr, r.train_loss, r.ce, r.cwr, r.val_acc, r.val_auroc
        );
    }
    if let Some(path) = &a.metrics {
        write_metrics(path, &rows)?;
        println!("wrote metrics to {}", path.display());
    }
    save_checkpoint(&a.out, &model)
        .with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    println!("wrote checkpoint to {}", a.out.display());
    if let Some(last) = rows.last() {
        println!(
            "final: val_acc {:.5e}  val_auroc {:.5e}",
            last.val_acc, last.val_auroc
        );
    }
    Ok(())
}

fn split_dir(data: &Path, split: &str) -> PathBuf {
    if split == "." {
        data.to_path_buf()
    } else {
        data.join(split)
    }
}

fn run_eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.model)
        .with_context(|| format!("loading checkpoint {}", a.model.display()))?;
    let dir = split_dir(&a.data, &a.split);
    let data = load_dir(&dir).with_context(|| format!("loading {}", dir.display()))?;
    let report = evaluate(&model, &data)?;
    println!(
        "n={} accuracy={:.5e} auroc={:.5e}",
        report.n, report.accuracy, report.auroc
    );
    Ok(())
}

fn run_explain(a: ExplainArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.model)
        .with_context(|| format!("loading checkpoint {}", a.model.display()))?;
    let is_binary = a
        .input
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("fwts"));
    let values = if is_binary {
        load_series(&a.input)
            .with_context(|| format!("loading {}", a.input.display()))?
            .values
    } else {
        let text = std::fs::read_to_string(&a.input)
            .with_context(|| format!("reading {}", a.input.display()))?;
        parse_delimited(&text)?
    };
    let values = if a.raw { values } else { zscore(&values)? };
    let expl = explain_series(&model, &values, a.class)?;
    let logits: Vec<String> = expl.logits.iter().map(|v| format!("{:.5e}", v)).collect();
    println!("explained class {} (logits: {})", expl.class, logits.join(" "));
    let top = top_k_landmarks(&expl.importance, a.top.min(expl.importance.len()))?;
    for &t in &top {
        println!("t={} importance={:.5e}", t, expl.importance[t]);
    }
    write_relevancy(&a.out, &expl, model.cfg.blocks())?;
    println!("wrote relevancy map to {}", a.out.display());
    Ok(())
}

fn run_bench(a: BenchArgs) -> anyhow::Result<()> {
    let (cfg, _) = load_run_config(&a.config, &a.sets)?;
    ensure!(!a.t.is_empty(), "need at least one series length");
    if a.measure {
        println!("t,f,window,stride,qk_macs,total_macs,ratio_vs_prev,seconds");
    } else {
        println!("t,f,window,stride,qk_macs,total_macs,ratio_vs_prev");
    }
    let mut prev: Option<u64> = None;
    for &t in &a.t {
        let r = flop_model(&cfg, t)?;
        let ratio = match prev {
            Some(p) => format!("{:.4}", r.total as f64 / p as f64),
            None => "-".to_string(),
        };
        prev = Some(r.total);
        if a.measure {
            let secs = measure_forward(&cfg, t, a.reps)?;
            println!(
                "{},{},{},{},{},{},{},{:.5e}",
                r.t, r.f, r.window, r.stride, r.qk, r.total, ratio, secs
            );
        } else {
            println!(
                "{},{},{},{},{},{},{}",
                r.t, r.f, r.window, r.stride, r.qk, r.total, ratio
            );
        }
    }
    Ok(())
}
