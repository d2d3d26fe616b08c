//! Feature-conditioned recurrent scorer.
//!
//! The image projection gives the initial hidden state, a single GRU layer
//! consumes the embedded prefix, and the classifier maps the final hidden
//! state to logits: `z = W^T g(prefix, image) + b`. Embedding, encoder and
//! classifier are kept as separate parameter groups so training can be
//! restricted to the classifier.

mod checkpoint;
mod softmax;

use ndarray::{s, Array1, Array2, ArrayView1, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use softmax::{argmax, log_softmax, softmax_temp, Distribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab: usize,
    pub hidden: usize,
    pub feature: usize,
}

impl ModelDims {
    // Specials sit at the end of the vocabulary: unk, bos, eos.
    pub fn unk(&self) -> usize {
        self.vocab - 3
    }

    pub fn bos(&self) -> usize {
        self.vocab - 2
    }

    pub fn eos(&self) -> usize {
        self.vocab - 1
    }
}

/// Which parameter groups an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    AllParams,
    ClassifierOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// hidden x feature
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    /// 3*hidden x hidden; gate rows ordered reset, update, candidate.
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b_ih: Array1<f64>,
    pub b_hh: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// vocab x hidden
    pub embed: Array2<f64>,
    pub encoder: EncoderParams,
    /// hidden x vocab; column `i` is the classifier vector of word `i`.
    pub classifier_w: Array2<f64>,
    pub classifier_b: Array1<f64>,
}

/// Everything the backward pass needs from one recurrent step.
#[derive(Debug, Clone)]
pub struct StepCache {
    token: usize,
    h_prev: Array1<f64>,
    x: Array1<f64>,
    r: Array1<f64>,
    u: Array1<f64>,
    n: Array1<f64>,
    hn: Array1<f64>,
}

/// Teacher-forced forward pass over a token sequence.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub h0: Array1<f64>,
    /// `hidden[t]` is the state after consuming `inputs[..=t]`.
    pub hidden: Vec<Array1<f64>>,
    caches: Vec<StepCache>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let (v, d, f) = (dims.vocab, dims.hidden, dims.feature);
        Self {
            dims,
            embed: Array2::zeros((v, d)),
            encoder: EncoderParams {
                proj_w: Array2::zeros((d, f)),
                proj_b: Array1::zeros(d),
                w_ih: Array2::zeros((3 * d, d)),
                w_hh: Array2::zeros((3 * d, d)),
                b_ih: Array1::zeros(3 * d),
                b_hh: Array1::zeros(3 * d),
            },
            classifier_w: Array2::zeros((d, v)),
            classifier_b: Array1::zeros(v),
        }
    }

    /// Small random initialization, deterministic in `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.hidden == 0 || dims.feature == 0 {
            return Err(Error::invalid("dims", "hidden and feature must be at least 1"));
        }
        if dims.vocab < 4 {
            return Err(Error::invalid("dims", "vocabulary needs a word plus three specials"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let k = 1.0 / (dims.hidden as f64).sqrt();
        let uni = Uniform::new_inclusive(-k, k).expect("finite bounds");
        let emb = Normal::new(0.0, 0.1).expect("finite std");
        let proj = Uniform::new_inclusive(-1.0, 1.0)
            .expect("finite bounds");
        p.embed.mapv_inplace(|_| emb.sample(&mut rng));
        p.encoder.proj_w.mapv_inplace(|_| proj.sample(&mut rng) / (dims.feature as f64).sqrt());
        p.encoder.w_ih.mapv_inplace(|_| uni.sample(&mut rng));
        p.encoder.w_hh.mapv_inplace(|_| uni.sample(&mut rng));
        p.classifier_w.mapv_inplace(|_| uni.sample(&mut rng));
        Ok(p)
    }

    /// Parameter groups in canonical order: name, in-classifier flag, data.
    pub fn groups(&self) -> [(&'static str, bool, &[f64]); 9] {
        let e = &self.encoder;
        [
            ("embed", false, slice(&self.embed)),
            ("proj_w", false, slice(&e.proj_w)),
            ("proj_b", false, e.proj_b.as_slice().expect("contiguous")),
            ("w_ih", false, slice(&e.w_ih)),
            ("w_hh", false, slice(&e.w_hh)),
            ("b_ih", false, e.b_ih.as_slice().expect("contiguous")),
            ("b_hh", false, e.b_hh.as_slice().expect("contiguous")),
            ("classifier_w", true, slice(&self.classifier_w)),
            ("classifier_b", true, self.classifier_b.as_slice().expect("contiguous")),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, bool, &mut [f64]); 9] {
        let e = &mut self.encoder;
        [
            ("embed", false, slice_mut(&mut self.embed)),
            ("proj_w", false, slice_mut(&mut e.proj_w)),
            ("proj_b", false, e.proj_b.as_slice_mut().expect("contiguous")),
            ("w_ih", false, slice_mut(&mut e.w_ih)),
            ("w_hh", false, slice_mut(&mut e.w_hh)),
            ("b_ih", false, e.b_ih.as_slice_mut().expect("contiguous")),
            ("b_hh", false, e.b_hh.as_slice_mut().expect("contiguous")),
            ("classifier_w", true, slice_mut(&mut self.classifier_w)),
            (
                "classifier_b",
                true,
                self.classifier_b.as_slice_mut().expect("contiguous"),
            ),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.groups().iter().map(|g| g.2.len()).sum()
    }

    /// `self += alpha * other` over the groups inside `scope`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams, scope: TrainScope) {
        for ((_, is_cls, dst), (_, _, src)) in self.groups_mut().into_iter().zip(other.groups()) {
            if scope == TrainScope::AllParams || is_cls {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += alpha * s;
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, _, g) in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.2.iter().all(|x| x.is_finite()))
    }

    fn hash_groups(&self, classifier: bool) -> String {
        let mut h = Sha256::new();
        for (name, is_cls, data) in self.groups() {
            if is_cls == classifier {
                h.update(name.as_bytes());
                for x in data {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Hash of embedding and encoder bytes.
    pub fn encoder_hash(&self) -> String {
        self.hash_groups(false)
    }

    /// Hash of classifier weight and bias bytes.
    pub fn classifier_hash(&self) -> String {
        self.hash_groups(true)
    }

    pub fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.dims.vocab {
            return Err(Error::TokenOutOfRange {
                id: token,
                size: self.dims.vocab,
            });
        }
        Ok(())
    }

    /// Initial hidden state from image features.
    pub fn initial_state(&self, features: &[f64]) -> Result<Array1<f64>> {
        if features.len() != self.dims.feature {
            return Err(Error::ShapeMismatch(format!(
                "{} features for a model expecting {}",
                features.len(),
                self.dims.feature
            )));
        }
        let x = ArrayView1::from(features);
        let mut h = self.encoder.proj_w.dot(&x);
        h += &self.encoder.proj_b;
        h.mapv_inplace(f64::tanh);
        Ok(h)
    }

    /// One recurrent step; returns the next state and its cache.
    pub fn step(&self, h: &Array1<f64>, token: usize) -> (Array1<f64>, StepCache) {
        let d = self.dims.hidden;
        let e = &self.encoder;
        let x = self.embed.row(token).to_owned();
        let mut gi = e.w_ih.dot(&x);
        gi += &e.b_ih;
        let mut gh = e.w_hh.dot(h);
        gh += &e.b_hh;

        let mut r = Array1::zeros(d);
        let mut u = Array1::zeros(d);
        let mut n = Array1::zeros(d);
        let hn = gh.slice(s![2 * d..]).to_owned();
        let mut h_new = Array1::zeros(d);
        for j in 0..d {
            r[j] = sigmoid(gi[j] + gh[j]);
            u[j] = sigmoid(gi[d + j] + gh[d + j]);
            n[j] = (gi[2 * d + j] + r[j] * hn[j]).tanh();
            h_new[j] = (1.0 - u[j]) * n[j] + u[j] * h[j];
        }
        let cache = StepCache {
            token,
            h_prev: h.clone(),
            x,
            r,
            u,
            n,
            hn,
        };
        (h_new, cache)
    }

    /// Classifier head: `W^T h + b`.
    pub fn logits(&self, h: &Array1<f64>) -> Array1<f64> {
        let mut z = t_dot(&self.classifier_w, h);
        z += &self.classifier_b;
        z
    }

    /// Runs the recurrence over `inputs`, keeping caches for backprop.
    pub fn forward(&self, features: &[f64], inputs: &[usize]) -> Result<Trajectory> {
        for &t in inputs {
            self.check_token(t)?;
        }
        let h0 = self.initial_state(features)?;
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        let mut h = h0.clone();
        for &tok in inputs {
            let (next, cache) = self.step(&h, tok);
            hidden.push(next.clone());
            caches.push(cache);
            h = next;
        }
        Ok(Trajectory { h0, hidden, caches })
    }

    /// Backpropagates `dhidden[t] = dL/dhidden[t]` through the recurrence
    /// and the image projection, accumulating into `grads` (embedding and
    /// encoder groups only).
    pub fn backward_encoder(
        &self,
        traj: &Trajectory,
        features: &[f64],
        dhidden: &[Array1<f64>],
        grads: &mut ModelParams,
    ) {
        let d = self.dims.hidden;
        let e = &self.encoder;
        let mut dh_next: Array1<f64> = Array1::zeros(d);
        let mut dgi = Array1::zeros(3 * d);
        let mut dgh = Array1::zeros(3 * d);
        for t in (0..traj.caches.len()).rev() {
            let c = &traj.caches[t];
            let dh = &dh_next + &dhidden[t];
            let mut dh_prev = Array1::zeros(d);
            for j in 0..d {
                let dn = dh[j] * (1.0 - c.u[j]);
                let du = dh[j] * (c.h_prev[j] - c.n[j]);
                dh_prev[j] = dh[j] * c.u[j];
                let dan = dn * (1.0 - c.n[j] * c.n[j]);
                let dr = dan * c.hn[j];
                let dar = dr * c.r[j] * (1.0 - c.r[j]);
                let dau = du * c.u[j] * (1.0 - c.u[j]);
                dgi[j] = dar;
                dgi[d + j] = dau;
                dgi[2 * d + j] = dan;
                dgh[j] = dar;
                dgh[d + j] = dau;
                dgh[2 * d + j] = dan * c.r[j];
            }
            add_outer(&mut grads.encoder.w_ih, &dgi, &c.x);
            add_outer(&mut grads.encoder.w_hh, &dgh, &c.h_prev);
            grads.encoder.b_ih += &dgi;
            grads.encoder.b_hh += &dgh;
            let dx = t_dot(&e.w_ih, &dgi);
            let mut row = grads.embed.row_mut(c.token);
            row += &dx;
            dh_prev += &t_dot(&e.w_hh, &dgh);
            dh_next = dh_prev;
        }
        let mut da0 = dh_next;
        Zip::from(&mut da0)
            .and(&traj.h0)
            .for_each(|g, &h| *g *= 1.0 - h * h);
        add_outer(&mut grads.encoder.proj_w, &da0, &ArrayView1::from(features).to_owned());
        grads.encoder.proj_b += &da0;
    }
}

/// `m^T v`, accumulated row by row so every access is contiguous.
pub(crate) fn t_dot(m: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(m.ncols());
    for (row, &vi) in m.rows().into_iter().zip(v) {
        if vi != 0.0 {
            out.scaled_add(vi, &row);
        }
    }
    out
}

/// `m += a ⊗ b`
pub(crate) fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let ai = a[i];
        if ai != 0.0 {
            row.scaled_add(ai, b);
        }
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Logits for the last position of `prefix`.
pub fn score_step(params: &ModelParams, features: &[f64], prefix: &[usize]) -> Result<Array1<f64>> {
    if prefix.is_empty() {
        return Err(Error::invalid("prefix", "must start with <bos>"));
    }
    let traj = params.forward(features, prefix)?;
    Ok(params.logits(traj.hidden.last().expect("non-empty")))
}

/// Rescales every classifier column by `1 / ||column||^tau`, and the bias
/// vector likewise when `normalize_bias` is set.
pub fn tau_normalize(params: &ModelParams, tau: f64, normalize_bias: bool) -> Result<ModelParams> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", "must be finite and non-negative"));
    }
    let mut out = params.clone();
    if tau == 0.0 {
        return Ok(out);
    }
    for (i, mut col) in out.classifier_w.columns_mut().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm(i));
        }
        let f = norm.powf(tau);
        col.mapv_inplace(|x| x / f);
    }
    if normalize_bias {
        let norm = out.classifier_b.dot(&out.classifier_b).sqrt();
        if norm > 0.0 {
            let f = norm.powf(tau);
            out.classifier_b.mapv_inplace(|x| x / f);
        }
    }
    Ok(out)
}
