//! The weakly supervised training loop: k-means initialization, rectified
//! pseudo-labeling, surrogate + drift loss, SGD, and periodic rectifier
//! refresh.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{self, DEFAULT_MAX_ITERS};
use crate::math::{self, Purpose, RngStream};
use crate::model::{self, EmbeddingHead, SurrogateBank, DEFAULT_SCALE};
use crate::optim::Sgd;
use crate::synth::{decompose_state, Dataset};
use crate::wdbr::{self, MpiStats, RectifierConfig, RefreshDiagnostic, R_HISTOGRAM_BINS};
use crate::wfdr::{self, DriftBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Every state with at least two training examples contributes at least
    /// two examples to each batch.
    #[default]
    Stratified,
    /// Plain per-epoch shuffling.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpiWindow {
    /// Assignments made during the last `T` batches.
    #[default]
    Recent,
    /// A fresh assignment pass over the whole training set at each refresh.
    FullPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RectifierSpec {
    Shared(RectifierConfig),
    PerKind(Vec<RectifierConfig>),
}

impl RectifierSpec {
    fn resolve(&self, n_kinds: usize) -> Result<Vec<RectifierConfig>> {
        match self {
            RectifierSpec::Shared(c) => Ok(vec![*c; n_kinds]),
            RectifierSpec::PerKind(v) if v.len() == n_kinds => Ok(v.clone()),
            RectifierSpec::PerKind(v) => Err(Error::Config(format!(
                "{} rectifiers given for {n_kinds} state kinds",
                v.len()
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            RectifierSpec::Shared(c) => c.validate(),
            RectifierSpec::PerKind(v) if v.is_empty() => {
                Err(Error::Config("empty rectifier list".into()))
            }
            RectifierSpec::PerKind(v) => v.iter().try_for_each(RectifierConfig::validate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f64,
    pub rectifier: RectifierSpec,
    #[serde(rename = "T")]
    pub t: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub enable_wdbr: bool,
    pub enable_wfdr: bool,
    pub scale: f64,
    /// Output dimension; defaults to the input dimension.
    pub embed_dim: Option<usize>,
    /// Width of an optional tanh layer in front of the projection.
    pub hidden: Option<usize>,
    pub sampler: Sampler,
    pub mpi_window: MpiWindow,
    /// Mixed-radix split of the dataset's state label into several state
    /// kinds; `None` treats the label as a single kind.
    pub state_kinds: Option<Vec<usize>>,
    /// Drift buffer momentum; defaults to `batch_size / N`.
    pub buffer_alpha: Option<f64>,
    pub kmeans_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 200,
            lambda: 10.0,
            rectifier: RectifierSpec::Shared(RectifierConfig::hard(0.95)),
            t: 40,
            batch_size: 128,
            iterations: 800,
            lr: 0.05,
            lr_milestones: vec![500, 700],
            lr_decay: 10.0,
            momentum: 0.9,
            weight_decay: 0.005,
            seed: 0,
            enable_wdbr: true,
            enable_wfdr: true,
            scale: DEFAULT_SCALE,
            embed_dim: None,
            hidden: None,
            sampler: Sampler::Stratified,
            mpi_window: MpiWindow::Recent,
            state_kinds: None,
            buffer_alpha: None,
            kmeans_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.t == 0 {
            return bad("T must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_milestones must be strictly increasing");
        }
        if !(self.lr_decay >= 1.0 && self.lr_decay.is_finite()) {
            return bad("lr_decay must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be positive");
        }
        if self.embed_dim == Some(0) || self.hidden == Some(0) {
            return bad("layer widths must be positive");
        }
        if let Some(a) = self.buffer_alpha {
            if !(a > 0.0 && a <= 1.0) {
                return bad("buffer_alpha must be in (0, 1]");
            }
        }
        if let Some(kinds) = &self.state_kinds {
            if kinds.is_empty() || kinds.contains(&0) {
                return bad("state_kinds entries must be positive");
            }
        }
        self.rectifier.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Piecewise-constant schedule: `lr / decay^m` where `m` counts milestones
/// already reached.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| iteration >= m).count();
    cfg.lr / cfg.lr_decay.powi(passed as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub l_surr: f64,
    pub l_drift: f64,
    pub lr: f64,
    pub active_k: usize,
    /// Batch examples assigned by the plain fallback because every class was
    /// nullified.
    pub fallbacks: usize,
    /// Batch examples assigned to a class with `p = 0`; always zero when the
    /// rectified rule is in use.
    pub nullified_hits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefreshRecord {
    pub iter: usize,
    pub active_k: usize,
    pub r_histogram: Vec<u64>,
    /// One table per state kind, as accumulated before the reset.
    pub stats: Vec<MpiStats>,
    /// Fraction of examples seen in this window, and seen before, whose
    /// class changed since their previous assignment.
    pub churn: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub iterations: Vec<IterRecord>,
    pub refreshes: Vec<RefreshRecord>,
}

pub const HISTORY_HEADER: &str = "iter,L_surr,L_drift,lr,active_K,fallbacks";

impl TrainHistory {
    pub fn total_fallbacks(&self) -> usize {
        self.iterations.iter().map(|r| r.fallbacks).sum()
    }

    pub fn total_nullified_hits(&self) -> usize {
        self.iterations.iter().map(|r| r.nullified_hits).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.iterations {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter, r.l_surr, r.l_drift, r.lr, r.active_k, r.fallbacks
            );
        }
        out
    }

    pub fn diagnostics_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.refreshes {
            let d = RefreshDiagnostic {
                iter: r.iter,
                active_k: r.active_k,
                r_histogram: r.r_histogram.clone(),
            };
            out.push_str(&serde_json::to_string(&d).expect("diagnostic serializes"));
            out.push('\n');
        }
        out
    }

    pub fn churn_csv(&self) -> String {
        let mut out = String::from("iter,churn\n");
        for r in &self.refreshes {
            let _ = writeln!(out, "{},{}", r.iter, r.churn);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub head: EmbeddingHead,
    pub bank: SurrogateBank,
    pub buffer: DriftBuffer,
    pub history: TrainHistory,
}

/// Draws batches of dataset indices.
#[derive(Debug, Clone)]
struct BatchSampler {
    rng: RngStream,
    /// One pool per stratum; a single pool in uniform mode.
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    quotas: Vec<usize>,
}

impl BatchSampler {
    fn new(states: &[usize], batch: usize, mode: Sampler, mut rng: RngStream) -> Self {
        let n = states.len();
        let (pools, quotas) = match mode {
            Sampler::Uniform => (vec![(0..n).collect::<Vec<_>>()], vec![batch]),
            Sampler::Stratified => {
                let mut by_state: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
                for (i, &s) in states.iter().enumerate() {
                    by_state.entry(s).or_default().push(i);
                }
                let pools: Vec<Vec<usize>> = by_state.into_values().collect();
                let quotas = stratified_quotas(&pools.iter().map(Vec::len).collect::<Vec<_>>(), batch);
                (pools, quotas)
            }
        };
        let mut pools = pools;
        for p in &mut pools {
            rng.shuffle(p);
        }
        let cursors = vec![0; pools.len()];
        Self {
            rng,
            pools,
            cursors,
            quotas,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.quotas.iter().sum());
        for s in 0..self.pools.len() {
            for _ in 0..self.quotas[s] {
                if self.cursors[s] == self.pools[s].len() {
                    self.rng.shuffle(&mut self.pools[s]);
                    self.cursors[s] = 0;
                }
                out.push(self.pools[s][self.cursors[s]]);
                self.cursors[s] += 1;
            }
        }
        out
    }
}

/// Proportional allocation of `batch` slots over strata of the given sizes,
/// with at least two slots for every stratum that has two or more members
/// (when the batch is large enough) and largest-remainder rounding.
fn stratified_quotas(sizes: &[usize], batch: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let batch = batch.min(total);
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| batch as f64 * s as f64 / total as f64)
        .collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    for (qi, &s) in q.iter_mut().zip(sizes) {
        if s >= 2 {
            *qi = (*qi).max(2);
        }
        *qi = (*qi).min(s);
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    while q.iter().sum::<usize>() < batch {
        let Some(&s) = order.iter().find(|&&s| q[s] < sizes[s]) else {
            break;
        };
        q[s] += 1;
        order.rotate_left(1);
    }
    while q.iter().sum::<usize>() > batch {
        let s = (0..q.len()).max_by_key(|&s| (q[s], std::cmp::Reverse(s))).unwrap();
        if q[s] == 0 {
            break;
        }
        q[s] -= 1;
    }
    q
}

/// Per-example state index for every kind (1-based), kind-major.
fn kind_states(ds: &Dataset, kinds: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::with_capacity(ds.len()); kinds.len()];
    for e in &ds.examples {
        for (q, s) in decompose_state(e.state, kinds).into_iter().enumerate() {
            out[q].push(s);
        }
    }
    out
}

fn refresh_p(bank: &mut SurrogateBank, stats: &[MpiStats], rects: &[RectifierConfig]) -> Result<()> {
    let r: Vec<Vec<f64>> = stats.iter().map(MpiStats::mpi).collect();
    for k in 0..bank.k() {
        let per_kind: Vec<f64> = r.iter().map(|rq| rq[k]).collect();
        bank.p[k] = wdbr::multi_state_rectifier(&per_kind, rects)?;
    }
    Ok(())
}

/// Builds the initial head for a dataset of input dimension `dim`.
pub fn initial_head(dim: usize, cfg: &TrainConfig, rng: &RngStream) -> EmbeddingHead {
    let out = cfg.embed_dim.unwrap_or(dim);
    let mut r = rng.derive(Purpose::HeadInit);
    match cfg.hidden {
        Some(width) => EmbeddingHead::with_hidden(dim, width, out, &mut r),
        None if out == dim => EmbeddingHead::identity(dim),
        None => EmbeddingHead::random(dim, out, &mut r),
    }
}

/// Runs the full training procedure. Every random choice derives from
/// `cfg.seed`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    ds.validate()?;
    if ds.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let kinds = cfg.state_kinds.clone().unwrap_or_else(|| vec![ds.n_states]);
    if kinds.iter().product::<usize>() != ds.n_states {
        return Err(Error::Config(format!(
            "state_kinds {kinds:?} do not multiply to {} states",
            ds.n_states
        )));
    }
    let rects = cfg.rectifier.resolve(kinds.len())?;
    let root = RngStream::new(cfg.seed, 0);
    let n = ds.len();
    let inputs: Vec<&[f64]> = ds.examples.iter().map(|e| e.features.as_slice()).collect();
    let kstates = kind_states(ds, &kinds);

    let mut head = initial_head(ds.dim, cfg, &root);
    let initial = head.embed_all(inputs.iter().copied())?;
    let mut km_rng = root.derive(Purpose::KMeans);
    let mut bank = kmeans::kmeans_init(&initial, cfg.k, cfg.scale, cfg.kmeans_iters, &mut km_rng)?;
    let alpha = cfg
        .buffer_alpha
        .unwrap_or_else(|| (cfg.batch_size as f64 / n as f64).min(1.0));
    let mut buffer = DriftBuffer::from_features(&initial, alpha)?;
    drop(initial);

    let mut history = TrainHistory::default();
    let mut sampler = BatchSampler::new(
        &ds.examples.iter().map(|e| e.state).collect::<Vec<_>>(),
        cfg.batch_size,
        cfg.sampler,
        root.derive(Purpose::Batching),
    );
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut window: Vec<MpiStats> = kinds.iter().map(|&j| MpiStats::new(cfg.k, j)).collect();
    let mut last_class = vec![usize::MAX; n];
    let (mut churn_seen, mut churn_changed) = (0usize, 0usize);

    for it in 0..=cfg.iterations {
        if it > 0 && it % cfg.t == 0 && cfg.enable_wdbr {
            if cfg.mpi_window == MpiWindow::FullPass {
                for w in &mut window {
                    w.reset();
                }
                let all = head.embed_all(inputs.iter().copied())?;
                let classes: Vec<usize> = all.iter().map(|x| wdbr::rectified_assign(&bank, x).class).collect();
                for (w, st) in window.iter_mut().zip(&kstates) {
                    w.accumulate(&classes, st)?;
                }
            }
            refresh_p(&mut bank, &window, &rects)?;
            history.refreshes.push(RefreshRecord {
                iter: it,
                active_k: bank.active_k(),
                r_histogram: wdbr::r_histogram(&window[0], R_HISTOGRAM_BINS),
                stats: window.clone(),
                churn: if churn_seen > 0 {
                    churn_changed as f64 / churn_seen as f64
                } else {
                    0.0
                },
            });
            for w in &mut window {
                w.reset();
            }
            churn_seen = 0;
            churn_changed = 0;
        }
        if it == cfg.iterations {
            break;
        }

        let batch = sampler.next_batch();
        let fwds = batch
            .iter()
            .map(|&i| head.forward(inputs[i]))
            .collect::<Result<Vec<_>>>()?;
        let xs: Vec<Vec<f64>> = fwds.iter().map(|f| f.x.clone()).collect();

        let mut fallbacks = 0;
        let mut nullified_hits = 0;
        let classes: Vec<usize> = xs
            .iter()
            .map(|x| {
                if cfg.enable_wdbr {
                    let a = wdbr::rectified_assign(&bank, x);
                    fallbacks += a.fallback as usize;
                    nullified_hits += (!a.fallback && bank.p[a.class] == 0.0) as usize;
                    a.class
                } else {
                    let c = wdbr::plain_assign(&bank, x);
                    nullified_hits += (bank.p[c] == 0.0) as usize;
                    c
                }
            })
            .collect();

        let surr = model::surrogate_loss_features(&bank, &xs, &classes)?;
        let mut grad_x = surr.grad_x;
        let mut l_drift = 0.0;
        if cfg.enable_wfdr {
            for st in &kstates {
                let bstates: Vec<usize> = batch.iter().map(|&i| st[i]).collect();
                let stats = wfdr::batch_state_stats(&xs, &bstates)?;
                let drift = wfdr::drift_loss_grads(&stats, &buffer, &xs);
                l_drift += drift.loss;
                if cfg.lambda > 0.0 {
                    for (g, dg) in grad_x.iter_mut().zip(&drift.grad_x) {
                        math::axpy(cfg.lambda, dg, g);
                    }
                }
            }
        }
        let total = surr.loss + cfg.lambda * l_drift;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iter: it });
        }

        let mut grads = head.zero_grads();
        for ((&i, f), g) in batch.iter().zip(&fwds).zip(&grad_x) {
            head.backward(inputs[i], f, g, 1.0, &mut grads);
        }
        let lr = lr_at(it, cfg);
        let mut mu_flat = bank.mu_flat();
        {
            let mut params = head.param_slices_mut();
            params.push(&mut mu_flat);
            let mut gs: Vec<&[f64]> = vec![&grads.w, &grads.b];
            if head_has_hidden(&grads) {
                gs.push(&grads.hidden_w);
                gs.push(&grads.hidden_b);
            }
            gs.push(&surr.grad_mu);
            opt.step(params, gs, lr);
        }
        bank.set_mu_flat(&mu_flat);
        bank.renormalize()?;

        let (bm, bs) = wfdr::moments(xs.iter().map(Vec::as_slice), bank.dim());
        buffer.update(&bm, &bs)?;

        if cfg.mpi_window == MpiWindow::Recent {
            for (w, st) in window.iter_mut().zip(&kstates) {
                let bstates: Vec<usize> = batch.iter().map(|&i| st[i]).collect();
                w.accumulate(&classes, &bstates)?;
            }
        }
        for (&i, &c) in batch.iter().zip(&classes) {
            if last_class[i] != usize::MAX {
                churn_seen += 1;
                churn_changed += (last_class[i] != c) as usize;
            }
            last_class[i] = c;
        }

        history.iterations.push(IterRecord {
            iter: it,
            l_surr: surr.loss,
            l_drift,
            lr,
            active_k: bank.active_k(),
            fallbacks,
            nullified_hits,
        });
    }

    Ok(TrainOutput {
        head,
        bank,
        buffer,
        history,
    })
}

fn head_has_hidden(g: &model::HeadGrads) -> bool {
    !g.hidden_w.is_empty()
}
