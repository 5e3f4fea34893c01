//! Experiment specs, presets, ablation variants, and seeded sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::math::RngStream;
use crate::synth::{self, decompose_state, Dataset, GenConfig, Imbalance, RandomTransforms, Rotation, TransformSpec};
use crate::trainer::{self, RectifierSpec, TrainConfig, TrainOutput};
use crate::wdbr::RectifierConfig;
use crate::wfdr;

pub const THREADS_ENV: &str = "STATERECT_THREADS";

/// Worker cap from `STATERECT_THREADS`, defaulting to the machine's
/// parallelism.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// No rectification, no drift term.
    Basic,
    WdbrOnly,
    WfdrOnly,
    /// Both components with the hard rectifier at the configured threshold.
    FullHard,
    /// Both components with a soft rectifier (`a = 5`) at the configured
    /// threshold.
    FullSoft,
    /// Both components as configured.
    Full,
    /// No training at all: retrieval on the raw input features.
    Pretrained,
}

pub const SOFT_STRENGTH: f64 = 5.0;

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown ablation {s:?}")))
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let thresholds = |spec: &RectifierSpec| match spec {
            RectifierSpec::Shared(c) => vec![c.b],
            RectifierSpec::PerKind(v) => v.iter().map(|c| c.b).collect(),
        };
        let with = |bs: Vec<f64>, f: fn(f64) -> RectifierConfig| {
            if bs.len() == 1 {
                RectifierSpec::Shared(f(bs[0]))
            } else {
                RectifierSpec::PerKind(bs.into_iter().map(f).collect())
            }
        };
        match self {
            Ablation::Basic | Ablation::Pretrained => {
                cfg.enable_wdbr = false;
                cfg.enable_wfdr = false;
            }
            Ablation::WdbrOnly => {
                cfg.enable_wdbr = true;
                cfg.enable_wfdr = false;
            }
            Ablation::WfdrOnly => {
                cfg.enable_wdbr = false;
                cfg.enable_wfdr = true;
            }
            Ablation::FullHard => {
                cfg.enable_wdbr = true;
                cfg.enable_wfdr = true;
                cfg.rectifier = with(thresholds(&cfg.rectifier), RectifierConfig::hard);
            }
            Ablation::FullSoft => {
                cfg.enable_wdbr = true;
                cfg.enable_wfdr = true;
                cfg.rectifier = with(thresholds(&cfg.rectifier), |b| {
                    RectifierConfig::soft(SOFT_STRENGTH, b)
                });
            }
            Ablation::Full => {
                cfg.enable_wdbr = true;
                cfg.enable_wfdr = true;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub ablation: Option<Ablation>,
    /// Partial generator config merged over the base one.
    #[serde(default)]
    pub gen: Option<Value>,
    /// Partial training config merged over the base one.
    #[serde(default)]
    pub train: Option<Value>,
    /// Train on a single state kind (0-based) of a multi-kind dataset.
    #[serde(default)]
    pub train_kind: Option<usize>,
}

impl Variant {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ablation: None,
            gen: None,
            train: None,
            train_kind: None,
        }
    }

    pub fn ablation(name: &str, a: Ablation) -> Self {
        Self {
            ablation: Some(a),
            ..Self::named(name)
        }
    }

    pub fn with_train(mut self, v: Value) -> Self {
        self.train = Some(v);
        self
    }

    pub fn with_gen(mut self, v: Value) -> Self {
        self.gen = Some(v);
        self
    }
}

fn default_ks() -> Vec<usize> {
    vec![1, 5, 10]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub gen: GenConfig,
    /// Fixed datasets; when set, `gen` is ignored.
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("experiment has no variants".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment has no seeds".into()));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate variant name {:?}", w[0])));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a nonempty list of positive ranks".into()));
        }
        if let Some(d) = &self.data {
            for p in [&d.train, &d.test] {
                if !p.exists() {
                    return Err(Error::Config(format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Generator and training configs for one variant and seed.
    pub fn resolve(&self, variant: &Variant, seed: u64) -> Result<(GenConfig, TrainConfig)> {
        let gen: GenConfig = merged(&self.gen, variant.gen.as_ref())?;
        let mut train: TrainConfig = merged(&self.train, variant.train.as_ref())?;
        if let Some(a) = variant.ablation {
            a.apply(&mut train);
        }
        train.seed = seed;
        if let Some(q) = variant.train_kind {
            let kinds = train.state_kinds.take().unwrap_or_else(|| gen.state_kinds.clone());
            if q >= kinds.len() {
                return Err(Error::Config(format!("train_kind {q} out of range")));
            }
            if let RectifierSpec::PerKind(v) = &train.rectifier {
                train.rectifier = RectifierSpec::Shared(v[q]);
            }
        }
        train.validate()?;
        Ok((gen, train))
    }
}

/// Recursively overlays `patch` onto the serialized `base`.
fn merged<T: Serialize + serde::de::DeserializeOwned>(base: &T, patch: Option<&Value>) -> Result<T> {
    let Some(patch) = patch else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("serializes"))
            .expect("round trips"));
    };
    let mut v = serde_json::to_value(base).expect("serializes");
    merge_value(&mut v, patch);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("bad override: {e}")))
}

fn merge_value(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, pv) in p {
                match b.get_mut(k) {
                    Some(bv) => merge_value(bv, pv),
                    None => {
                        b.insert(k.clone(), pv.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Relabels every example with its state of kind `q` alone.
pub fn project_states(ds: &Dataset, kinds: &[usize], q: usize) -> Dataset {
    let mut out = ds.clone();
    for e in &mut out.examples {
        e.state = decompose_state(e.state, kinds)[q];
    }
    out.n_states = kinds[q];
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    /// Drift distance of the embedded test set.
    pub test_drift: Option<f64>,
    pub active_k: Option<usize>,
    pub fallbacks: usize,
    pub nullified_hits: usize,
    pub error: Option<String>,
}

impl RunResult {
    pub fn rank1(&self) -> f64 {
        self.report.as_ref().map_or(f64::NAN, EvalReport::rank1)
    }
}

/// Everything a single run produces, for callers that need more than the
/// summary.
pub struct RunArtifacts {
    pub train: Dataset,
    pub test: Dataset,
    pub output: Option<TrainOutput>,
    pub report: EvalReport,
    pub test_drift: f64,
}

fn load_data(spec: &ExperimentSpec, gen: &GenConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match &spec.data {
        Some(d) => Ok((synth::read_dataset(&d.train)?, synth::read_dataset(&d.test)?)),
        None => {
            let g = synth::generate(gen, &RngStream::new(seed, 0))?;
            Ok((g.train, g.test))
        }
    }
}

pub fn run_single(spec: &ExperimentSpec, variant: &Variant, seed: u64) -> Result<RunArtifacts> {
    let (gen, cfg) = spec.resolve(variant, seed)?;
    let (train, test) = load_data(spec, &gen, seed)?;
    if variant.ablation == Some(Ablation::Pretrained) {
        let report = eval::evaluate_raw(&test, &spec.ks)?;
        let raw: Vec<Vec<f64>> = test.examples.iter().map(|e| e.features.clone()).collect();
        let test_drift = wfdr::drift_distance(&raw, &test.states())?;
        return Ok(RunArtifacts {
            train,
            test,
            output: None,
            report,
            test_drift,
        });
    }
    let fit_on = match variant.train_kind {
        Some(q) => project_states(&train, &gen.state_kinds, q),
        None => train.clone(),
    };
    let out = trainer::train(&fit_on, &cfg)?;
    let report = eval::evaluate(&out.head, &test, &spec.ks)?;
    let xs = out
        .head
        .embed_all(test.examples.iter().map(|e| e.features.as_slice()))?;
    let test_drift = wfdr::drift_distance(&xs, &test.states())?;
    Ok(RunArtifacts {
        train,
        test,
        output: Some(out),
        report,
        test_drift,
    })
}

fn summarize(variant: &Variant, seed: u64, r: Result<RunArtifacts>) -> RunResult {
    match r {
        Ok(a) => RunResult {
            variant: variant.name.clone(),
            seed,
            active_k: a.output.as_ref().map(|o| o.bank.active_k()),
            fallbacks: a.output.as_ref().map_or(0, |o| o.history.total_fallbacks()),
            nullified_hits: a.output.as_ref().map_or(0, |o| o.history.total_nullified_hits()),
            report: Some(a.report),
            test_drift: Some(a.test_drift),
            error: None,
        },
        Err(e) => RunResult {
            variant: variant.name.clone(),
            seed,
            report: None,
            test_drift: None,
            active_k: None,
            fallbacks: 0,
            nullified_hits: 0,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every (variant, seed) pair, at most `threads` at a time. Failures
/// are recorded per run; results come back in variant-major order.
pub fn sweep(spec: &ExperimentSpec, threads: usize) -> Result<Vec<RunResult>> {
    spec.validate()?;
    let jobs: Vec<(&Variant, u64)> = spec
        .variants
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&(v, s)| summarize(v, s, run_single(spec, v, s)))
            .collect()
    }))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per variant with mean and sample standard deviation over the
/// successful seeds.
pub fn aggregate_csv(spec: &ExperimentSpec, results: &[RunResult]) -> String {
    let mut out = String::from("variant,runs,failed");
    for k in &spec.ks {
        let _ = write!(out, ",rank{k}_mean,rank{k}_std");
    }
    out.push_str(",mAP_mean,mAP_std,drift_mean,drift_std,active_K_mean,active_K_std\n");
    for v in &spec.variants {
        let rows: Vec<&RunResult> = results.iter().filter(|r| r.variant == v.name).collect();
        let ok: Vec<&RunResult> = rows.iter().copied().filter(|r| r.report.is_some()).collect();
        let _ = write!(out, "{},{},{}", v.name, rows.len(), rows.len() - ok.len());
        let col = |f: &dyn Fn(&RunResult) -> Option<f64>| -> (f64, f64) {
            mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
        };
        for k in &spec.ks {
            let (m, s) = col(&|r| r.report.as_ref().and_then(|x| x.rank.get(k).copied()));
            let _ = write!(out, ",{m},{s}");
        }
        let (m, s) = col(&|r| r.report.as_ref().map(|x| x.map));
        let _ = write!(out, ",{m},{s}");
        let (m, s) = col(&|r| r.test_drift);
        let _ = write!(out, ",{m},{s}");
        let (m, s) = col(&|r| r.active_k.map(|k| k as f64));
        let _ = writeln!(out, ",{m},{s}");
    }
    out
}

/// One row per run.
pub fn runs_csv(spec: &ExperimentSpec, results: &[RunResult]) -> String {
    let mut out = String::from("variant,seed");
    for k in &spec.ks {
        let _ = write!(out, ",rank{k}");
    }
    out.push_str(",mAP,drift,active_K,fallbacks,error\n");
    for r in results {
        let _ = write!(out, "{},{}", r.variant, r.seed);
        for k in &spec.ks {
            let v = r.report.as_ref().and_then(|x| x.rank.get(k).copied());
            let _ = write!(out, ",{}", v.map_or(String::new(), |v| v.to_string()));
        }
        let opt = |v: Option<String>| v.unwrap_or_default();
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            opt(r.report.as_ref().map(|x| x.map.to_string())),
            opt(r.test_drift.map(|d| d.to_string())),
            opt(r.active_k.map(|k| k.to_string())),
            r.fallbacks,
            opt(r.error.as_ref().map(|e| format!("{:?}", e.replace(',', ";")))),
        );
    }
    out
}

/// Per-variant rank-1 values keyed by seed.
pub fn rank1_by_seed(results: &[RunResult], variant: &str) -> BTreeMap<u64, f64> {
    results
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| (r.seed, r.rank1()))
        .collect()
}

pub const PRESETS: [&str; 5] = ["default", "threshold", "imbalanced", "noisy", "multi-kind"];

/// Hard thresholds compared by the `threshold` preset.
pub const THRESHOLDS: [f64; 4] = [0.5, 0.7, 0.9, 0.95];

/// Generator settings shared by every preset.
pub fn default_gen() -> GenConfig {
    GenConfig {
        n_identities: 200,
        n_test_identities: 100,
        state_kinds: vec![4],
        images_per_pair: 5,
        dim: 32,
        transforms: TransformSpec::Random(RandomTransforms {
            rotation: Rotation::Partial(0.5),
            offset_norm: [1.0, 1.5],
            gain: [0.2, 1.0],
        }),
        noise_sigma: 0.05,
        imbalance: None,
        label_noise_frac: 0.0,
    }
}

pub fn default_train() -> TrainConfig {
    TrainConfig {
        k: 400,
        lr: 0.02,
        ..TrainConfig::default()
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Named experiment presets. Each comes with the variants it is meant to
/// compare.
pub fn preset(name: &str) -> Result<ExperimentSpec> {
    let base = ExperimentSpec {
        gen: default_gen(),
        data: None,
        train: default_train(),
        ks: default_ks(),
        variants: vec![],
        seeds: DEFAULT_SEEDS.to_vec(),
    };
    let spec = match name {
        "default" => ExperimentSpec {
            variants: vec![
                Variant::ablation("pretrained", Ablation::Pretrained),
                Variant::ablation("basic", Ablation::Basic),
                Variant::ablation("full-hard", Ablation::FullHard),
                soft_variant(),
            ],
            ..base
        },
        "threshold" => ExperimentSpec {
            variants: THRESHOLDS
                .iter()
                .map(|b| {
                    Variant::ablation(&format!("hard-b{b}"), Ablation::FullHard)
                        .with_train(serde_json::json!({ "rectifier": { "a": "inf", "b": b } }))
                })
                .collect(),
            ..base
        },
        "imbalanced" => ExperimentSpec {
            gen: GenConfig {
                imbalance: Some(Imbalance {
                    fraction: 0.5,
                    states: 2,
                }),
                ..base.gen.clone()
            },
            variants: vec![
                Variant::ablation("full-hard", Ablation::FullHard),
                soft_variant(),
            ],
            ..base
        },
        "noisy" => ExperimentSpec {
            variants: [0.0, 0.2, 0.4, 0.8]
                .iter()
                .map(|q| {
                    Variant::ablation(&format!("noise-{q}"), Ablation::FullHard)
                        .with_gen(serde_json::json!({ "label_noise_frac": q }))
                })
                .collect(),
            ..base
        },
        "multi-kind" => {
            let kinds = vec![4, 3];
            ExperimentSpec {
                gen: GenConfig {
                    state_kinds: kinds.clone(),
                    images_per_pair: 2,
                    // Gains and offsets compose across kinds, so each kind
                    // gets a narrower range to keep the composite close to
                    // the single-kind preset.
                    transforms: TransformSpec::Random(RandomTransforms {
                        rotation: Rotation::Partial(0.5),
                        offset_norm: [0.75, 1.25],
                        gain: [0.5, 1.0],
                    }),
                    ..base.gen.clone()
                },
                train: TrainConfig {
                    state_kinds: Some(kinds),
                    ..base.train.clone()
                },
                variants: vec![
                    Variant::ablation("product", Ablation::FullHard),
                    Variant {
                        train_kind: Some(0),
                        ..Variant::ablation("first-kind", Ablation::FullHard)
                    },
                ],
                ..base
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {PRESETS:?}"
            )))
        }
    };
    Ok(spec)
}

/// Soft rectifier compared against the hard one: same threshold, finite
/// strength.
pub fn soft_variant() -> Variant {
    Variant::ablation("full-soft", Ablation::FullSoft)
}
