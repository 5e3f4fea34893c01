//! Synthetic identities observed under nuisance states.
//!
//! Every identity has a latent prototype on the unit sphere. An observation in
//! state `j` is `gain_j * (A_j c + t_j) + noise`: a rotation, a state-wide
//! offset that drags the whole state sub-population in one direction, and a
//! gain that suppresses the signal relative to the noise floor. With several
//! state kinds (pose x illumination, say) the per-kind maps are composed in
//! kind order and the combined state index is mixed radix, first kind most
//! significant.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::math::{all_finite, Purpose, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    /// 1-based state label.
    pub state: usize,
    pub identity: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub dim: usize,
    pub n_states: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn states(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.state).collect()
    }

    pub fn identities(&self) -> BTreeSet<u64> {
        self.examples.iter().filter_map(|e| e.identity).collect()
    }

    /// Checks per-record invariants: dimension, finiteness and state range.
    pub fn validate(&self) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.features.len() != self.dim {
                return Err(Error::Invalid(format!(
                    "example {i}: {} features, dataset dimension is {}",
                    ex.features.len(),
                    self.dim
                )));
            }
            if !all_finite(&ex.features) {
                return Err(Error::Invalid(format!("example {i}: non-finite feature")));
            }
            if ex.state == 0 || ex.state > self.n_states {
                return Err(Error::IndexOutOfRange {
                    what: "state",
                    value: ex.state,
                    max: self.n_states,
                });
            }
        }
        Ok(())
    }

    /// True when every state in `1..=J` occurs at least once.
    pub fn covers_all_states(&self) -> bool {
        let mut seen = vec![false; self.n_states];
        for ex in &self.examples {
            seen[ex.state - 1] = true;
        }
        seen.iter().all(|&s| s)
    }
}

/// How the per-state linear maps are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    Identity,
    /// Orthogonal factor of a Gaussian matrix (Haar distributed).
    Haar,
    /// Orthogonal factor of `I + s G / sqrt(D)`: small `s` stays near identity.
    Partial(f64),
}

/// Fully explicit map for one state of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTransform {
    /// Row-major `D x D`; `None` is the identity.
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    pub offset: Vec<f64>,
    pub gain: f64,
}

impl StateTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: None,
            offset: vec![0.0; dim],
            gain: 1.0,
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = match &self.matrix {
            Some(m) => m.iter().map(|row| crate::math::dot(row, v)).collect(),
            None => v.to_vec(),
        };
        for (o, t) in out.iter_mut().zip(&self.offset) {
            *o = self.gain * (*o + t);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTransforms {
    pub rotation: Rotation,
    /// Offset norms are drawn uniformly from this range.
    pub offset_norm: [f64; 2],
    /// Gains are spread evenly over this range, lowest gain on state 1.
    pub gain: [f64; 2],
}

impl Default for RandomTransforms {
    fn default() -> Self {
        Self {
            rotation: Rotation::Haar,
            offset_norm: [0.0, 0.5],
            gain: [0.2, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSpec {
    Random(RandomTransforms),
    /// One list per state kind, one entry per state of that kind.
    Explicit(Vec<Vec<StateTransform>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Imbalance {
    /// Fraction of identities (per split) that are restricted.
    pub fraction: f64,
    /// Number of states a restricted identity appears in.
    pub states: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_identities: usize,
    pub n_test_identities: usize,
    /// States per kind; the dataset's `J` is their product.
    pub state_kinds: Vec<usize>,
    pub images_per_pair: usize,
    pub dim: usize,
    pub transforms: TransformSpec,
    pub noise_sigma: f64,
    #[serde(default)]
    pub imbalance: Option<Imbalance>,
    #[serde(default)]
    pub label_noise_frac: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_identities: 200,
            n_test_identities: 100,
            state_kinds: vec![4],
            images_per_pair: 5,
            dim: 32,
            transforms: TransformSpec::Random(RandomTransforms::default()),
            noise_sigma: 0.1,
            imbalance: None,
            label_noise_frac: 0.0,
        }
    }
}

impl GenConfig {
    pub fn n_states(&self) -> usize {
        self.state_kinds.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_identities == 0 {
            return bad("n_identities must be positive".into());
        }
        if self.dim == 0 || self.images_per_pair == 0 {
            return bad("dim and images_per_pair must be positive".into());
        }
        if self.state_kinds.is_empty() || self.state_kinds.contains(&0) {
            return bad("state_kinds must be a nonempty list of positive counts".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise_frac) {
            return bad("label_noise_frac must lie in [0, 1]".into());
        }
        let j = self.n_states();
        if self.label_noise_frac > 0.0 && j < 2 {
            return bad("label noise needs at least two states".into());
        }
        if let Some(imb) = &self.imbalance {
            if !(0.0..=1.0).contains(&imb.fraction) {
                return bad("imbalance.fraction must lie in [0, 1]".into());
            }
            if imb.states < 2 || imb.states > j {
                return bad(format!(
                    "imbalance.states must be in 2..={j} so every identity keeps a cross-state pair"
                ));
            }
        }
        match &self.transforms {
            TransformSpec::Random(r) => {
                let [olo, ohi] = r.offset_norm;
                let [glo, ghi] = r.gain;
                if !(olo >= 0.0 && olo <= ohi && ohi.is_finite()) {
                    return bad("offset_norm must be a range within [0, inf)".into());
                }
                if !(glo > 0.0 && glo <= ghi && ghi.is_finite()) {
                    return bad("gain must be a positive range".into());
                }
                if let Rotation::Partial(s) = r.rotation {
                    if !(s >= 0.0 && s.is_finite()) {
                        return bad("partial rotation strength must be finite and >= 0".into());
                    }
                }
            }
            TransformSpec::Explicit(kinds) => {
                if kinds.len() != self.state_kinds.len() {
                    return bad("explicit transforms need one list per state kind".into());
                }
                for (kind, (list, &n)) in kinds.iter().zip(&self.state_kinds).enumerate() {
                    if list.len() != n {
                        return bad(format!("kind {kind}: expected {n} transforms"));
                    }
                    for t in list {
                        if t.offset.len() != self.dim || !(t.gain > 0.0) {
                            return bad(format!("kind {kind}: bad offset length or gain"));
                        }
                        if let Some(m) = &t.matrix {
                            if m.len() != self.dim || m.iter().any(|r| r.len() != self.dim) {
                                return bad(format!("kind {kind}: matrix must be D x D"));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves the per-kind transforms, drawing random ones from `rng`.
    pub fn resolve_transforms(&self, rng: &mut RngStream) -> Vec<Vec<StateTransform>> {
        match &self.transforms {
            TransformSpec::Explicit(k) => k.clone(),
            TransformSpec::Random(r) => self
                .state_kinds
                .iter()
                .map(|&n| {
                    (0..n)
                        .map(|s| {
                            let matrix = random_orthogonal(self.dim, r.rotation, rng);
                            let dir = rng.unit_vector(self.dim);
                            let len = rng.uniform_range(r.offset_norm[0], r.offset_norm[1]);
                            let gain = if n == 1 {
                                r.gain[1]
                            } else {
                                r.gain[0] + (r.gain[1] - r.gain[0]) * s as f64 / (n - 1) as f64
                            };
                            StateTransform {
                                matrix,
                                offset: dir.iter().map(|x| x * len).collect(),
                                gain,
                            }
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

fn random_orthogonal(dim: usize, rotation: Rotation, rng: &mut RngStream) -> Option<Vec<Vec<f64>>> {
    let scale = match rotation {
        Rotation::Identity => return None,
        Rotation::Haar => None,
        Rotation::Partial(s) => Some(s / (dim as f64).sqrt()),
    };
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.normal());
    let m = match scale {
        None => g,
        Some(s) => DMatrix::identity(dim, dim) + g * s,
    };
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix so Q is unique (and Haar when the input is Gaussian).
    for c in 0..dim {
        if r[(c, c)] < 0.0 {
            for row in 0..dim {
                q[(row, c)] = -q[(row, c)];
            }
        }
    }
    Some((0..dim).map(|i| (0..dim).map(|j| q[(i, j)]).collect()).collect())
}

/// Splits a 1-based combined state into 1-based per-kind states.
pub fn decompose_state(state: usize, kinds: &[usize]) -> Vec<usize> {
    let mut rem = state - 1;
    let mut out = vec![0; kinds.len()];
    for (slot, &n) in out.iter_mut().zip(kinds).rev() {
        *slot = rem % n + 1;
        rem /= n;
    }
    out
}

pub fn compose_state(parts: &[usize], kinds: &[usize]) -> usize {
    parts
        .iter()
        .zip(kinds)
        .fold(0, |acc, (&p, &n)| acc * n + (p - 1))
        + 1
}

/// Train and test splits plus the uncorrupted train state labels.
#[derive(Debug, Clone)]
pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    pub true_train_states: Vec<usize>,
}

impl Generated {
    pub fn corrupted_fraction(&self) -> f64 {
        if self.train.is_empty() {
            return 0.0;
        }
        let wrong = self
            .train
            .examples
            .iter()
            .zip(&self.true_train_states)
            .filter(|(e, &s)| e.state != s)
            .count();
        wrong as f64 / self.train.len() as f64
    }
}

pub fn generate(cfg: &GenConfig, rng: &RngStream) -> Result<Generated> {
    cfg.validate()?;
    let j = cfg.n_states();
    let transforms = cfg.resolve_transforms(&mut rng.derive(Purpose::Transforms));
    let mut protos = rng.derive(Purpose::Prototypes);
    let mut noise = rng.derive(Purpose::Noise);
    let mut imb_rng = rng.derive(Purpose::Imbalance);

    let mut make = |ids: std::ops::Range<u64>, split: Split| {
        let allowed = allowed_states(ids.end - ids.start, j, cfg.imbalance.as_ref(), &mut imb_rng);
        let mut examples = Vec::new();
        for (id, states) in ids.zip(allowed) {
            let c = protos.unit_vector(cfg.dim);
            for s in states {
                let parts = decompose_state(s, &cfg.state_kinds);
                let mut clean = c.clone();
                for (kind, &p) in parts.iter().enumerate() {
                    clean = transforms[kind][p - 1].apply(&clean);
                }
                for _ in 0..cfg.images_per_pair {
                    let features = clean
                        .iter()
                        .map(|x| x + cfg.noise_sigma * noise.normal())
                        .collect();
                    examples.push(Example {
                        features,
                        state: s,
                        identity: Some(id),
                    });
                }
            }
        }
        Dataset {
            examples,
            dim: cfg.dim,
            n_states: j,
            split,
        }
    };

    let p = cfg.n_identities as u64;
    let mut train = make(0..p, Split::Train);
    let test = make(p..p + cfg.n_test_identities as u64, Split::Test);
    let true_train_states = train.states();
    if cfg.label_noise_frac > 0.0 {
        corrupt_states(&mut train, cfg.label_noise_frac, &mut rng.derive(Purpose::LabelNoise));
    }
    if !train.covers_all_states() {
        return Err(Error::Config(
            "generated training split does not cover every state".into(),
        ));
    }
    Ok(Generated {
        train,
        test,
        true_train_states,
    })
}

fn allowed_states(
    n_ids: u64,
    j: usize,
    imbalance: Option<&Imbalance>,
    rng: &mut RngStream,
) -> Vec<Vec<usize>> {
    let n = n_ids as usize;
    let mut restricted = vec![false; n];
    if let Some(imb) = imbalance {
        let count = (imb.fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for &i in order.iter().take(count) {
            restricted[i] = true;
        }
    }
    restricted
        .into_iter()
        .map(|r| {
            let mut all: Vec<usize> = (1..=j).collect();
            if r {
                let k = imbalance.map(|i| i.states).unwrap_or(j);
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
            }
            all
        })
        .collect()
}

/// Resets `round(q * n_j)` labels of every state `j` to a uniformly drawn
/// wrong state, so corruption is spread evenly over the states.
fn corrupt_states(ds: &mut Dataset, q: f64, rng: &mut RngStream) {
    let j = ds.n_states;
    let mut by_state = vec![Vec::new(); j];
    for (i, e) in ds.examples.iter().enumerate() {
        by_state[e.state - 1].push(i);
    }
    for (state, mut idx) in (1..=j).zip(by_state) {
        rng.shuffle(&mut idx);
        let count = (q * idx.len() as f64).round() as usize;
        for &i in idx.iter().take(count) {
            let mut wrong = rng.below(j - 1) + 1;
            if wrong >= state {
                wrong += 1;
            }
            ds.examples[i].state = wrong;
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "J")]
    n_states: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    features: Vec<f64>,
    state: usize,
    identity: Option<u64>,
}

pub const DATASET_VERSION: u32 = 1;

pub fn dataset_to_string(ds: &Dataset) -> Result<String> {
    ds.validate()?;
    let header = Header {
        version: DATASET_VERSION,
        dim: ds.dim,
        n_states: ds.n_states,
        split: ds.split,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for ex in &ds.examples {
        let rec = Record {
            features: ex.features.clone(),
            state: ex.state,
            identity: ex.identity,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let text = dataset_to_string(ds)?;
    fsutil::write_atomic(path, text.as_bytes())
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let fmt_err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| fmt_err(1, "missing header line".into()))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| fmt_err(1, format!("bad header: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(fmt_err(1, format!("unsupported version {}", header.version)));
    }
    if header.dim == 0 || header.n_states == 0 {
        return Err(fmt_err(1, "D and J must be positive".into()));
    }
    let mut examples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let rec: Record =
            serde_json::from_str(line).map_err(|e| fmt_err(lineno, e.to_string()))?;
        if rec.features.len() != header.dim {
            return Err(fmt_err(
                lineno,
                format!("expected {} features, got {}", header.dim, rec.features.len()),
            ));
        }
        if rec.state == 0 || rec.state > header.n_states {
            return Err(fmt_err(
                lineno,
                format!("state {} outside 1..={}", rec.state, header.n_states),
            ));
        }
        examples.push(Example {
            features: rec.features,
            state: rec.state,
            identity: rec.identity,
        });
    }
    Ok(Dataset {
        examples,
        dim: header.dim,
        n_states: header.n_states,
        split: header.split,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fsutil::read_to_string(path)?;
    parse_dataset(&text, path)
}
