//! CIDEr-D reward, sequence sampling, self-critical policy gradient and the
//! CE / RL training loops.

mod cider;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ImageRecord, Vocabulary};
use crate::decode::{decode_greedy, draw, DecodeConfig, DecodeMethod, Policy, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, sequence_objective, BatchItem, LossOutput, Objective};
use crate::model::{ModelParams, TrainScope};

pub use cider::{cider_d, CiderCorpusStats};

/// A sequence drawn from the policy. `tokens` ends with `<eos>` unless the
/// length limit was hit first.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSeq {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

impl SampledSeq {
    /// Tokens without the closing `<eos>`.
    pub fn words(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Multinomial draw from `softmax(beta * z)` at every step.
pub fn sample_sequence<R: Rng + ?Sized>(
    params: &ModelParams,
    features: &[f64],
    beta: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<SampledSeq> {
    if max_len == 0 {
        return Err(Error::invalid("max_len", "must be at least 1"));
    }
    let policy = Policy::new(params, None, beta)?;
    let eos = params.dims.eos();
    let mut state = policy.start(features)?;
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    while tokens.len() < max_len {
        let lp = policy.log_probs(&state);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let tok = draw(&probs, rng);
        tokens.push(tok);
        log_probs.push(lp[tok]);
        if tok == eos {
            break;
        }
        state = policy.advance(&state, tok);
    }
    Ok(SampledSeq { tokens, log_probs })
}

/// Negative log-likelihood `-sum_t log p(tokens_t | tokens_<t)` of a full
/// token sequence (not averaged), with its gradient.
pub fn sequence_nll(
    params: &ModelParams,
    features: &[f64],
    tokens: &[usize],
    beta: f64,
    scope: TrainScope,
) -> Result<LossOutput> {
    if tokens.is_empty() {
        return Err(Error::invalid("tokens", "must not be empty"));
    }
    for &t in tokens {
        params.check_token(t)?;
    }
    let mut grads = ModelParams::zeros(params.dims);
    let loss = sequence_objective(
        params,
        features,
        tokens,
        Objective::CrossEntropy,
        beta,
        scope,
        1.0,
        &mut grads,
    )?;
    Ok(LossOutput { loss, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScstConfig {
    pub samples_per_image: usize,
    pub beta: f64,
    pub max_len: usize,
    pub scope: TrainScope,
}

impl Default for ScstConfig {
    fn default() -> Self {
        Self {
            samples_per_image: 5,
            beta: 1.0,
            max_len: DEFAULT_MAX_LEN,
            scope: TrainScope::AllParams,
        }
    }
}

impl ScstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_image == 0 {
            return Err(Error::invalid("samples_per_image", "must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len", "must be at least 1"));
        }
        Ok(())
    }
}

/// Gradient estimate plus the rewards behind it. `output.loss` is the
/// surrogate `-(r - b) log p` averaged like the gradient.
#[derive(Debug, Clone)]
pub struct ScstOutput {
    pub output: LossOutput,
    pub mean_reward: f64,
    pub mean_baseline: f64,
}

/// Self-critical step with a caller-supplied reward of (image, word ids).
pub fn scst_step_with<R, F>(
    params: &ModelParams,
    batch: &[&ImageRecord],
    config: &ScstConfig,
    rng: &mut R,
    reward: F,
) -> Result<ScstOutput>
where
    R: Rng + ?Sized,
    F: Fn(&ImageRecord, &[usize]) -> f64 + Sync,
{
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("batch", "must not be empty"));
    }
    let eos = params.dims.eos();
    let greedy_cfg = DecodeConfig {
        method: DecodeMethod::Greedy,
        beta: config.beta,
        max_len: config.max_len,
        ..Default::default()
    };
    let n = config.samples_per_image;
    let weight_scale = 1.0 / (n * batch.len()) as f64;
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();

    let parts: Vec<(LossOutput, f64, f64)> = batch
        .par_iter()
        .zip(seeds)
        .map(|(rec, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let greedy = decode_greedy(params, &rec.features, &greedy_cfg)?;
            let baseline = reward(rec, &greedy.tokens);
            let mut grads = ModelParams::zeros(params.dims);
            let mut surrogate = 0.0;
            let mut reward_sum = 0.0;
            for _ in 0..n {
                let s = sample_sequence(params, &rec.features, config.beta, config.max_len, &mut rng)?;
                let r = reward(rec, s.words(eos));
                reward_sum += r;
                let w = (r - baseline) * weight_scale;
                if w != 0.0 {
                    let nll = sequence_objective(
                        params,
                        &rec.features,
                        &s.tokens,
                        Objective::CrossEntropy,
                        config.beta,
                        config.scope,
                        w,
                        &mut grads,
                    )?;
                    surrogate += w * nll;
                }
            }
            Ok((LossOutput { loss: surrogate, grads }, reward_sum / n as f64, baseline))
        })
        .collect::<Result<_>>()?;

    let mut grads = ModelParams::zeros(params.dims);
    let (mut loss, mut rsum, mut bsum) = (0.0, 0.0, 0.0);
    for (p, r, b) in &parts {
        grads.add_scaled(1.0, &p.grads, config.scope);
        loss += p.loss;
        rsum += r;
        bsum += b;
    }
    let m = batch.len() as f64;
    Ok(ScstOutput {
        output: LossOutput { loss, grads },
        mean_reward: rsum / m,
        mean_baseline: bsum / m,
    })
}

/// CIDEr-D reward of a word-id caption against the image's references.
pub fn cider_reward(vocab: &Vocabulary, stats: &CiderCorpusStats, record: &ImageRecord, words: &[usize]) -> f64 {
    stats.score(&vocab.decode(words), &record.references)
}

/// Self-critical step with the CIDEr-D reward and a per-image greedy baseline.
pub fn scst_step<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[&ImageRecord],
    vocab: &Vocabulary,
    stats: &CiderCorpusStats,
    config: &ScstConfig,
    rng: &mut R,
) -> Result<ScstOutput> {
    scst_step_with(params, batch, config, rng, |rec, words| cider_reward(vocab, stats, rec, words))
}

/// Mean CE over every reference of the batch images.
pub fn references_ce(
    params: &ModelParams,
    batch: &[&ImageRecord],
    vocab: &Vocabulary,
    beta: f64,
    scope: TrainScope,
) -> Result<LossOutput> {
    let encoded: Vec<(&[f64], Vec<usize>)> = batch
        .iter()
        .flat_map(|r| r.references.iter().map(|c| (r.features.as_slice(), vocab.encode(c))))
        .collect();
    let items: Vec<BatchItem<'_>> = encoded
        .iter()
        .map(|(f, c)| BatchItem {
            features: f,
            caption: c,
        })
        .collect();
    batch_loss(params, &items, Objective::CrossEntropy, beta, scope)
}

/// `lambda * SCST + (1 - lambda) * CE` over the batch images' references.
/// The SCST part is skipped at `lambda = 0` and the CE part at `lambda = 1`.
pub fn joint_step<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[&ImageRecord],
    lambda: f64,
    vocab: &Vocabulary,
    stats: &CiderCorpusStats,
    config: &ScstConfig,
    rng: &mut R,
) -> Result<ScstOutput> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", "must lie in [0, 1]"));
    }
    let mut grads = ModelParams::zeros(params.dims);
    let mut loss = 0.0;
    let (mut mean_reward, mut mean_baseline) = (f64::NAN, f64::NAN);
    if lambda > 0.0 {
        let rl = scst_step(params, batch, vocab, stats, config, rng)?;
        grads.add_scaled(lambda, &rl.output.grads, config.scope);
        loss += lambda * rl.output.loss;
        mean_reward = rl.mean_reward;
        mean_baseline = rl.mean_baseline;
    }
    if lambda < 1.0 {
        let ce = references_ce(params, batch, vocab, config.beta, config.scope)?;
        grads.add_scaled(1.0 - lambda, &ce.grads, config.scope);
        loss += (1.0 - lambda) * ce.loss;
    }
    Ok(ScstOutput {
        output: LossOutput { loss, grads },
        mean_reward,
        mean_baseline,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 4.0,
            batch_size: 50,
            beta: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid("lr", "must be finite and non-negative"));
    }
    Ok(())
}

fn check_batch(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    Ok(())
}

/// Teacher-forced CE pretraining over every (image, reference) pair with
/// plain SGD. One shuffle per epoch from a generator seeded once.
pub fn train_ce(
    params: &ModelParams,
    train: &Dataset,
    vocab: &Vocabulary,
    config: &CeConfig,
) -> Result<(ModelParams, Vec<CeEpoch>)> {
    check_lr(config.lr)?;
    check_batch(config.batch_size)?;
    let pairs: Vec<(usize, Vec<usize>)> = train
        .records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.references.iter().map(move |c| (i, vocab.encode(c))))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("training split has no references".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = params.clone();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&k| BatchItem {
                    features: &train.records[pairs[k].0].features,
                    caption: &pairs[k].1,
                })
                .collect();
            let out = batch_loss(&params, &items, Objective::CrossEntropy, config.beta, TrainScope::AllParams)?;
            total += out.loss * chunk.len() as f64;
            params.add_scaled(-config.lr, &out.grads, TrainScope::AllParams);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after CE epoch"));
        }
        log.push(CeEpoch {
            epoch,
            mean_loss: total / pairs.len() as f64,
        });
    }
    Ok((params, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the RL term; 1 is pure SCST, below 1 adds CE on references.
    pub lambda: f64,
    pub seed: u64,
    pub scst: ScstConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 0.25,
            batch_size: 20,
            lambda: 1.0,
            seed: 2,
            scst: ScstConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlEpoch {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_greedy_reward: f64,
}

/// SCST (or joint SCST + CE) training with plain SGD.
pub fn train_rl(
    params: &ModelParams,
    train: &Dataset,
    vocab: &Vocabulary,
    stats: &CiderCorpusStats,
    config: &RlConfig,
) -> Result<(ModelParams, Vec<RlEpoch>)> {
    check_lr(config.lr)?;
    check_batch(config.batch_size)?;
    config.scst.validate()?;
    if train.records.is_empty() {
        return Err(Error::EmptyCorpus("training split has no images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = params.clone();
    let mut order: Vec<usize> = (0..train.records.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut rsum, mut bsum, mut counted) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ImageRecord> = chunk.iter().map(|&k| &train.records[k]).collect();
            let out = joint_step(&params, &batch, config.lambda, vocab, stats, &config.scst, &mut rng)?;
            if out.mean_reward.is_finite() {
                rsum += out.mean_reward * batch.len() as f64;
                bsum += out.mean_baseline * batch.len() as f64;
                counted += batch.len();
            }
            params.add_scaled(-config.lr, &out.output.grads, config.scst.scope);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after RL epoch"));
        }
        let denom = counted.max(1) as f64;
        log.push(RlEpoch {
            epoch,
            mean_reward: if counted > 0 { rsum / denom } else { f64::NAN },
            mean_greedy_reward: if counted > 0 { bsum / denom } else { f64::NAN },
        });
    }
    Ok((params, log))
}

/// Mean CIDEr-D of greedy decodes over `records`.
pub fn mean_greedy_cider(
    params: &ModelParams,
    records: &[ImageRecord],
    vocab: &Vocabulary,
    stats: &CiderCorpusStats,
    max_len: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let cfg = DecodeConfig {
        method: DecodeMethod::Greedy,
        max_len,
        ..Default::default()
    };
    let scores: Vec<f64> = records
        .par_iter()
        .map(|r| Ok(cider_reward(vocab, stats, r, &decode_greedy(params, &r.features, &cfg)?.tokens)))
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / records.len() as f64)
}

/// `per_image` sampled sequences (words only) for every record, each image
/// drawing from its own stream of `seed`. Returned image-major.
pub fn sample_captions(
    params: &ModelParams,
    records: &[ImageRecord],
    per_image: usize,
    beta: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let eos = params.dims.eos();
    let per: Vec<Vec<Vec<usize>>> = records
        .par_iter()
        .map(|r| {
            let mut rng = crate::decode::image_rng(seed, r.id);
            (0..per_image)
                .map(|_| Ok(sample_sequence(params, &r.features, beta, max_len, &mut rng)?.words(eos).to_vec()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn write_ce_log<W: Write>(log: &[CeEpoch], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,mean_loss")?;
    for e in log {
        writeln!(w, "{},{}", e.epoch, e.mean_loss)?;
    }
    Ok(())
}

pub fn write_rl_log<W: Write>(log: &[RlEpoch], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,mean_reward,mean_greedy_reward")?;
    for e in log {
        writeln!(w, "{},{},{}", e.epoch, e.mean_reward, e.mean_greedy_reward)?;
    }
    Ok(())
}
