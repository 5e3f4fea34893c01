//! Embedding head, surrogate classifier bank and the surrogate classification
//! loss.
//!
//! The head maps an input `u` to `x = normalize(W h + b)`, where `h = u` or
//! `h = tanh(W1 u + b1)` when a hidden layer is present. Surrogate classes are
//! unit vectors `mu_k`; logits are `scale * x . mu_k`. Surrogate class indices
//! are 0-based throughout the crate.
//!
//! Gradients are exact: the backward pass through the normalization uses the
//! full Jacobian `(I - x x^T) / ||z||`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::math::{self, dot, l2_normalize_in_place, RngStream};
use crate::wfdr::DriftBuffer;

pub const DEFAULT_SCALE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub width: usize,
    /// Row-major `width x input_dim`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Row-major `embed_dim x (hidden width or input_dim)`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub hidden: Option<HiddenLayer>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Option<Vec<f64>>,
    pub pre_norm: f64,
    pub x: Vec<f64>,
}

/// Gradient buffers laid out like [`EmbeddingHead`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub hidden_w: Vec<f64>,
    pub hidden_b: Vec<f64>,
}

impl HeadGrads {
    pub fn flat(&self) -> Vec<f64> {
        [&self.w[..], &self.b, &self.hidden_w, &self.hidden_b].concat()
    }

    pub fn scale(&mut self, s: f64) {
        for g in [&mut self.w, &mut self.b, &mut self.hidden_w, &mut self.hidden_b] {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn matvec(m: &[f64], cols: usize, v: &[f64], bias: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols)
        .zip(bias)
        .map(|(row, b)| dot(row, v) + b)
        .collect()
}

impl EmbeddingHead {
    /// `W = I`, `b = 0`: the embedding is the normalized input.
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self {
            input_dim: dim,
            embed_dim: dim,
            w,
            b: vec![0.0; dim],
            hidden: None,
        }
    }

    /// Random affine head (Gaussian, variance `1/input_dim`).
    pub fn random(input_dim: usize, embed_dim: usize, rng: &mut RngStream) -> Self {
        let s = 1.0 / (input_dim as f64).sqrt();
        Self {
            input_dim,
            embed_dim,
            w: (0..embed_dim * input_dim).map(|_| s * rng.normal()).collect(),
            b: (0..embed_dim).map(|_| 0.1 * rng.normal()).collect(),
            hidden: None,
        }
    }

    /// Head with one tanh hidden layer. When `width == input_dim == embed_dim`
    /// the layers start close to the identity so the initial embedding is
    /// still roughly the normalized input.
    pub fn with_hidden(
        input_dim: usize,
        width: usize,
        embed_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        let square = width == input_dim && width == embed_dim;
        let gain = 0.5;
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (width as f64).sqrt();
        let hw = (0..width * input_dim)
            .map(|i| {
                let diag = square && i / input_dim == i % input_dim;
                if square {
                    (if diag { gain } else { 0.0 }) + 0.01 * s1 * rng.normal()
                } else {
                    s1 * rng.normal()
                }
            })
            .collect();
        let w = (0..embed_dim * width)
            .map(|i| {
                let diag = square && i / width == i % width;
                if square {
                    (if diag { 1.0 / gain } else { 0.0 }) + 0.01 * s2 * rng.normal()
                } else {
                    s2 * rng.normal()
                }
            })
            .collect();
        Self {
            input_dim,
            embed_dim,
            w,
            b: vec![0.0; embed_dim],
            hidden: Some(HiddenLayer {
                width,
                w: hw,
                b: vec![0.0; width],
            }),
        }
    }

    fn inner_dim(&self) -> usize {
        self.hidden.as_ref().map_or(self.input_dim, |h| h.width)
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len() + self.hidden.as_ref().map_or(0, |h| h.w.len() + h.b.len())
    }

    pub fn zero_grads(&self) -> HeadGrads {
        let (hw, hb) = self
            .hidden
            .as_ref()
            .map_or((0, 0), |h| (h.w.len(), h.b.len()));
        HeadGrads {
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
            hidden_w: vec![0.0; hw],
            hidden_b: vec![0.0; hb],
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
        if let Some(h) = &self.hidden {
            out.extend_from_slice(&h.w);
            out.extend_from_slice(&h.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let (w, rest) = flat.split_at(self.w.len());
        let (b, rest) = rest.split_at(self.b.len());
        self.w.copy_from_slice(w);
        self.b.copy_from_slice(b);
        if let Some(h) = &mut self.hidden {
            let (hw, hb) = rest.split_at(h.w.len());
            h.w.copy_from_slice(hw);
            h.b.copy_from_slice(hb);
        }
    }

    /// Mutable parameter tensors in the same order as [`HeadGrads`] fields.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.w, &mut self.b];
        if let Some(h) = &mut self.hidden {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }

    pub fn forward(&self, u: &[f64]) -> Result<Forward> {
        if u.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                got: u.len(),
            });
        }
        let hidden = self.hidden.as_ref().map(|h| {
            let mut a = matvec(&h.w, self.input_dim, u, &h.b);
            a.iter_mut().for_each(|v| *v = v.tanh());
            a
        });
        let inner = hidden.as_deref().unwrap_or(u);
        let mut x = matvec(&self.w, self.inner_dim(), inner, &self.b);
        let pre_norm = l2_normalize_in_place(&mut x)?;
        Ok(Forward {
            hidden,
            pre_norm,
            x,
        })
    }

    pub fn embed(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.forward(u).map(|f| f.x)
    }

    pub fn embed_all<'a, I>(&self, inputs: I) -> Result<Vec<Vec<f64>>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        inputs.into_iter().map(|u| self.embed(u)).collect()
    }

    /// Accumulates `weight * dL/dtheta` into `grads`, given `dL/dx` for one
    /// example.
    pub fn backward(
        &self,
        u: &[f64],
        fwd: &Forward,
        grad_x: &[f64],
        weight: f64,
        grads: &mut HeadGrads,
    ) {
        // dz = (I - x x^T) g / ||z||
        let proj = dot(&fwd.x, grad_x);
        let dz: Vec<f64> = grad_x
            .iter()
            .zip(&fwd.x)
            .map(|(g, x)| weight * (g - proj * x) / fwd.pre_norm)
            .collect();
        let inner_dim = self.inner_dim();
        let inner = fwd.hidden.as_deref().unwrap_or(u);
        for (row, &dzi) in grads.w.chunks_exact_mut(inner_dim).zip(&dz) {
            math::axpy(dzi, inner, row);
        }
        for (gb, dzi) in grads.b.iter_mut().zip(&dz) {
            *gb += dzi;
        }
        if let (Some(h), Some(act)) = (&self.hidden, &fwd.hidden) {
            let mut da = vec![0.0; h.width];
            for (row, &dzi) in self.w.chunks_exact(inner_dim).zip(&dz) {
                math::axpy(dzi, row, &mut da);
            }
            for (d, a) in da.iter_mut().zip(act) {
                *d *= 1.0 - a * a;
            }
            for (row, &dai) in grads.hidden_w.chunks_exact_mut(self.input_dim).zip(&da) {
                math::axpy(dai, u, row);
            }
            for (gb, dai) in grads.hidden_b.iter_mut().zip(&da) {
                *gb += dai;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateBank {
    pub mu: Vec<Vec<f64>>,
    pub scale: f64,
    /// Rectifier value per class, in `[0, 1]`.
    pub p: Vec<f64>,
}

impl SurrogateBank {
    /// Normalizes every centroid and sets all rectifiers to 1.
    pub fn new(centroids: Vec<Vec<f64>>, scale: f64) -> Result<Self> {
        let mut mu = centroids;
        for m in &mut mu {
            l2_normalize_in_place(m)?;
        }
        let k = mu.len();
        Ok(Self {
            mu,
            scale,
            p: vec![1.0; k],
        })
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.mu.iter().map(|m| self.scale * dot(x, m)).collect()
    }

    pub fn active_k(&self) -> usize {
        self.p.iter().filter(|&&p| p > 0.0).count()
    }

    /// Projects every centroid back onto the sphere.
    pub fn renormalize(&mut self) -> Result<()> {
        for m in &mut self.mu {
            l2_normalize_in_place(m)?;
        }
        Ok(())
    }

    pub fn mu_flat(&self) -> Vec<f64> {
        self.mu.concat()
    }

    pub fn set_mu_flat(&mut self, flat: &[f64]) {
        let d = self.dim();
        for (m, chunk) in self.mu.iter_mut().zip(flat.chunks_exact(d)) {
            m.copy_from_slice(chunk);
        }
    }
}

/// Loss and gradients of the surrogate classification objective with respect
/// to the embedded features and the centroids.
#[derive(Debug, Clone)]
pub struct FeatureLoss {
    pub loss: f64,
    /// One `dL/dx` per example.
    pub grad_x: Vec<Vec<f64>>,
    /// `K x d`, row-major.
    pub grad_mu: Vec<f64>,
}

/// `lse - logits[y]`, computed so that it stays strictly positive when `y`
/// wins by a wide margin and the difference would round to zero.
fn neg_log_softmax(logits: &[f64], y: usize, lse: f64) -> f64 {
    if math::argmax(logits) != y {
        return lse - logits[y];
    }
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(_, l)| (l - logits[y]).exp())
        .sum();
    rest.ln_1p()
}

/// Batch-averaged softmax cross-entropy of scaled cosine logits.
pub fn surrogate_loss_features(
    bank: &SurrogateBank,
    xs: &[Vec<f64>],
    assignments: &[usize],
) -> Result<FeatureLoss> {
    let k = bank.k();
    let d = bank.dim();
    if xs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if xs.len() != assignments.len() {
        return Err(Error::DimMismatch {
            expected: xs.len(),
            got: assignments.len(),
        });
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::AssignmentOutOfRange { value: bad, k });
    }
    let inv_n = 1.0 / xs.len() as f64;
    let mut loss = 0.0;
    let mut grad_mu = vec![0.0; k * d];
    let mut grad_x = Vec::with_capacity(xs.len());
    for (x, &y) in xs.iter().zip(assignments) {
        let logits = bank.logits(x);
        let lse = math::log_sum_exp(&logits);
        loss += neg_log_softmax(&logits, y, lse);
        let mut gx = vec![0.0; d];
        for (c, (m, gm)) in bank.mu.iter().zip(grad_mu.chunks_exact_mut(d)).enumerate() {
            let delta = (logits[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
            let coef = bank.scale * delta;
            math::axpy(coef, m, &mut gx);
            math::axpy(coef * inv_n, x, gm);
        }
        gx.iter_mut().for_each(|g| *g *= inv_n);
        grad_x.push(gx);
    }
    Ok(FeatureLoss {
        loss: loss * inv_n,
        grad_x,
        grad_mu,
    })
}

#[derive(Debug, Clone)]
pub struct SurrogateGrads {
    pub loss: f64,
    pub grad_head: HeadGrads,
    pub grad_mu: Vec<f64>,
}

/// Surrogate loss of a batch of raw inputs with gradients for head and bank.
pub fn surrogate_loss_grads(
    head: &EmbeddingHead,
    bank: &SurrogateBank,
    inputs: &[&[f64]],
    assignments: &[usize],
) -> Result<SurrogateGrads> {
    let fwds = inputs
        .iter()
        .map(|u| head.forward(u))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<Vec<f64>> = fwds.iter().map(|f| f.x.clone()).collect();
    let fl = surrogate_loss_features(bank, &xs, assignments)?;
    let mut grad_head = head.zero_grads();
    for ((u, f), g) in inputs.iter().zip(&fwds).zip(&fl.grad_x) {
        head.backward(u, f, g, 1.0, &mut grad_head);
    }
    Ok(SurrogateGrads {
        loss: fl.loss,
        grad_head,
        grad_mu: fl.grad_mu,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenRecord {
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// On-disk form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(rename = "D")]
    pub input_dim: usize,
    #[serde(rename = "d")]
    pub embed_dim: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub scale: f64,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub hidden: Option<HiddenRecord>,
    pub mu: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    #[serde(default)]
    pub buffer: Option<DriftBuffer>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(head: &EmbeddingHead, bank: &SurrogateBank, buffer: Option<&DriftBuffer>) -> Self {
        let rows = |m: &[f64], cols: usize| m.chunks_exact(cols).map(<[f64]>::to_vec).collect();
        Self {
            version: CHECKPOINT_VERSION,
            input_dim: head.input_dim,
            embed_dim: head.embed_dim,
            k: bank.k(),
            scale: bank.scale,
            w: rows(&head.w, head.inner_dim()),
            b: head.b.clone(),
            hidden: head.hidden.as_ref().map(|h| HiddenRecord {
                w: rows(&h.w, head.input_dim),
                b: h.b.clone(),
            }),
            mu: bank.mu.clone(),
            p: bank.p.clone(),
            buffer: buffer.cloned(),
        }
    }

    pub fn into_parts(self) -> Result<(EmbeddingHead, SurrogateBank, Option<DriftBuffer>)> {
        let bad = |m: &str| Err(Error::Invalid(format!("checkpoint: {m}")));
        if self.version != CHECKPOINT_VERSION {
            return bad("unsupported version");
        }
        let inner = self.hidden.as_ref().map_or(self.input_dim, |h| h.b.len());
        if self.w.len() != self.embed_dim || self.w.iter().any(|r| r.len() != inner) {
            return bad("W has the wrong shape");
        }
        if self.b.len() != self.embed_dim {
            return bad("b has the wrong length");
        }
        if let Some(h) = &self.hidden {
            if h.w.len() != h.b.len() || h.w.iter().any(|r| r.len() != self.input_dim) {
                return bad("hidden layer has the wrong shape");
            }
        }
        if self.mu.len() != self.k || self.p.len() != self.k {
            return bad("mu/p do not have K entries");
        }
        if self.mu.iter().any(|m| m.len() != self.embed_dim) {
            return bad("mu rows must have length d");
        }
        if self.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("p outside [0, 1]");
        }
        let head = EmbeddingHead {
            input_dim: self.input_dim,
            embed_dim: self.embed_dim,
            w: self.w.concat(),
            b: self.b,
            hidden: self.hidden.map(|h| HiddenLayer {
                width: h.b.len(),
                w: h.w.concat(),
                b: h.b,
            }),
        };
        let bank = SurrogateBank {
            mu: self.mu,
            scale: self.scale,
            p: self.p,
        };
        Ok((head, bank, self.buffer))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_json();
        fsutil::write_atomic(path, text.as_bytes())?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
