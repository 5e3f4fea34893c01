use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use staterect::error::{Error, Result};
use staterect::eval;
use staterect::experiment::{self, Ablation, ExperimentSpec};
use staterect::fsutil::{read_to_string, write_atomic};
use staterect::math::RngStream;
use staterect::model::Checkpoint;
use staterect::synth::{self, GenConfig, Imbalance};
use staterect::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "staterect", version, about = "Weakly supervised feature learning on state-distorted data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic train/test pair.
    Gen(GenArgs),
    /// Train an embedding head and surrogate bank.
    Train(TrainArgs),
    /// Evaluate cross-state retrieval on a labeled set.
    Eval(EvalArgs),
    /// Run an experiment grid over variants and seeds.
    Sweep(SweepArgs),
    /// Print a named experiment preset as JSON.
    Preset { name: String },
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for train.jsonl, test.jsonl and true_states.json.
    #[arg(long)]
    out: PathBuf,
    /// Generator config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long)]
    test_ids: Option<usize>,
    /// Number of states (single state kind).
    #[arg(long, conflicts_with = "state_kinds")]
    states: Option<usize>,
    /// Comma-separated state counts per kind, e.g. 4,3.
    #[arg(long, value_delimiter = ',')]
    state_kinds: Option<Vec<usize>>,
    #[arg(long)]
    per_pair: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Fraction of train state labels to corrupt.
    #[arg(long)]
    label_noise: Option<f64>,
    /// Fraction of identities restricted to `--imbalance-states` states.
    #[arg(long, requires = "imbalance_states")]
    imbalance: Option<f64>,
    #[arg(long, requires = "imbalance")]
    imbalance_states: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training set (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Training config (JSON); missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint.json, history.csv, diagnostics.jsonl,
    /// churn.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long = "k")]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "raw_features", conflicts_with = "raw_features")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the input features directly, without a head.
    #[arg(long)]
    raw_features: bool,
    /// Labeled evaluation set (JSONL).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    /// Also write embedded features as CSV.
    #[arg(long)]
    export_features: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment spec (JSON).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated seeds, replacing the spec's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Aggregated CSV (one row per variant).
    #[arg(long)]
    out: PathBuf,
    /// Optional per-run CSV.
    #[arg(long)]
    runs: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<GenConfig>(&read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => experiment::default_gen(),
    };
    if let Some(v) = a.ids {
        cfg.n_identities = v;
    }
    if let Some(v) = a.test_ids {
        cfg.n_test_identities = v;
    }
    if let Some(v) = a.states {
        cfg.state_kinds = vec![v];
    }
    if let Some(v) = a.state_kinds {
        cfg.state_kinds = v;
    }
    if let Some(v) = a.per_pair {
        cfg.images_per_pair = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.label_noise {
        cfg.label_noise_frac = v;
    }
    if let (Some(fraction), Some(states)) = (a.imbalance, a.imbalance_states) {
        cfg.imbalance = Some(Imbalance { fraction, states });
    }
    let g = synth::generate(&cfg, &RngStream::new(a.seed, 0))?;
    create_dir(&a.out)?;
    synth::write_dataset(&g.train, &a.out.join("train.jsonl"))?;
    synth::write_dataset(&g.test, &a.out.join("test.jsonl"))?;
    let truth = serde_json::to_string(&g.true_train_states).expect("serializes");
    write_atomic(&a.out.join("true_states.json"), truth.as_bytes())?;
    println!(
        "train: {} examples, {} identities; test: {} examples, {} identities; states: {}; corrupted: {:.4}",
        g.train.len(),
        g.train.identities().len(),
        g.test.len(),
        g.test.identities().len(),
        g.train.n_states,
        g.corrupted_fraction()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json(&read_to_string(p)?)?,
        None => experiment::default_train(),
    };
    if let Some(ab) = a.ablation {
        if ab == Ablation::Pretrained {
            return Err(Error::Config(
                "the pretrained baseline has nothing to train; use eval --raw-features".into(),
            ));
        }
        ab.apply(&mut cfg);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    cfg.validate()?;
    let ds = synth::read_dataset(&a.data)?;
    let out = trainer::train(&ds, &cfg)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("config.json"), cfg.to_json().as_bytes())?;
    write_atomic(&a.out.join("history.csv"), out.history.to_csv().as_bytes())?;
    write_atomic(
        &a.out.join("diagnostics.jsonl"),
        out.history.diagnostics_jsonl().as_bytes(),
    )?;
    write_atomic(&a.out.join("churn.csv"), out.history.churn_csv().as_bytes())?;
    let digest = Checkpoint::new(&out.head, &out.bank, Some(&out.buffer)).save(&a.out.join("checkpoint.json"))?;
    println!(
        "trained {} iterations; active K {} of {}; fallbacks {}; checkpoint sha256 {digest}",
        out.history.iterations.len(),
        out.bank.active_k(),
        out.bank.k(),
        out.history.total_fallbacks()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = synth::read_dataset(&a.data)?;
    let head = match &a.checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.into_parts()?.0),
        None => None,
    };
    let report = match &head {
        Some(h) => eval::evaluate(h, &ds, &a.ks)?,
        None => eval::evaluate_raw(&ds, &a.ks)?,
    };
    create_dir(&a.out)?;
    write_atomic(&a.out.join("report.json"), report.to_json().as_bytes())?;
    let csv = format!("{}\n{}\n", report.csv_header(), report.csv_row());
    write_atomic(&a.out.join("report.csv"), csv.as_bytes())?;
    if let Some(path) = &a.export_features {
        let h = head.unwrap_or_else(|| staterect::model::EmbeddingHead::identity(ds.dim));
        eval::export_features(&h, &ds, path)?;
    }
    let ranks: Vec<String> = report.rank.iter().map(|(k, v)| format!("rank-{k} {v:.4}")).collect();
    println!("{}; mAP {:.4}", ranks.join(", "), report.map);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut spec = match (&a.spec, &a.preset) {
        (Some(p), _) => ExperimentSpec::from_json(&read_to_string(p)?)?,
        (None, Some(name)) => experiment::preset(name)?,
        (None, None) => unreachable!("clap enforces one of --spec/--preset"),
    };
    if let Some(s) = a.seeds {
        spec.seeds = s;
    }
    let results = experiment::sweep(&spec, experiment::thread_cap())?;
    write_atomic(&a.out, experiment::aggregate_csv(&spec, &results).as_bytes())?;
    if let Some(p) = &a.runs {
        write_atomic(p, experiment::runs_csv(&spec, &results).as_bytes())?;
    }
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    for r in results.iter().filter(|r| r.error.is_some()) {
        eprintln!("run {} seed {} failed: {}", r.variant, r.seed, r.error.as_deref().unwrap_or(""));
    }
    println!("{} runs, {failed} failed", results.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Preset { name } => experiment::preset(&name).map(|s| println!("{}", s.to_json())),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
