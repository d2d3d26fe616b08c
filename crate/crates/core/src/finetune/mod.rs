//! Single-epoch, classifier-only fine-tuning of a trained checkpoint and the
//! learning-rate / beta' sweep around it.
//!
//! Only `W` and `b` move, so the hidden states of every training caption are
//! computed once from the checkpoint and reused for the whole epoch.

use std::io::Write;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Vocabulary};
use crate::decode::{decode_records, DecodeConfig, DecodeMethod};
use crate::error::{Error, Result};
use crate::losses::{caption_targets, classifier_pass, position_loss, shifted_inputs, FrozenReference, Objective};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{tau_normalize, Checkpoint, ModelParams, TrainScope};
use crate::rl::CiderCorpusStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMethod {
    /// Cross-entropy on ground-truth captions.
    Sft,
    /// Bias-product loss against a frozen copy of the checkpoint.
    Wft,
    /// Focal loss.
    Fl,
    /// Anti-focal loss.
    Afl,
    /// Post-hoc classifier normalization, no training.
    Tau,
}

impl FinetuneMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sft => "sft",
            Self::Wft => "wft",
            Self::Fl => "fl",
            Self::Afl => "afl",
            Self::Tau => "tau",
        }
    }

    fn uses_beta_prime(self) -> bool {
        self == Self::Wft
    }

    fn trains(self) -> bool {
        self != Self::Tau
    }
}

impl std::str::FromStr for FinetuneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Self::Sft),
            "wft" => Ok(Self::Wft),
            "fl" => Ok(Self::Fl),
            "afl" => Ok(Self::Afl),
            "tau" => Ok(Self::Tau),
            other => Err(Error::invalid("method", format!("unknown fine-tuning method {other:?}"))),
        }
    }
}

/// How a wFT model is decoded: from `p_theta` alone or from the bias product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeVariant {
    #[default]
    Plain,
    Bp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub method: FinetuneMethod,
    pub decode_variant: DecodeVariant,
    pub lr_grid: Vec<f64>,
    pub beta_prime_grid: Vec<f64>,
    pub batch_size: usize,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub normalize_bias: bool,
    pub seed: u64,
    /// Decoding used to score sweep points on the validation split.
    pub decode: DecodeConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            method: FinetuneMethod::Sft,
            decode_variant: DecodeVariant::Plain,
            lr_grid: vec![3.0, 1.0, 0.3, 0.1],
            beta_prime_grid: vec![0.1, 1.0],
            batch_size: 10,
            beta: 1.0,
            gamma: 1.0,
            alpha: 1.0,
            tau: 0.2,
            normalize_bias: true,
            seed: 3,
            decode: DecodeConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.lr_grid.iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) {
            return Err(Error::invalid("lr_grid", "learning rates must be finite and non-negative"));
        }
        if self.beta_prime_grid.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::invalid("beta_prime_grid", "values must be finite and non-negative"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", "must be finite and non-negative"));
        }
        if !(self.gamma >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::invalid("gamma/alpha", "must be non-negative"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", "must be finite and non-negative"));
        }
        self.decode.validate()
    }
}

/// Fine-tuned parameters, plus the frozen reference for wFT.
#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub params: ModelParams,
    pub frozen: Option<FrozenReference>,
}

/// Hidden states of every (image, reference) pair under a fixed encoder.
pub struct HiddenCache {
    encoder_hash: String,
    captions: Vec<(Vec<Array1<f64>>, Vec<usize>)>,
}

impl HiddenCache {
    pub fn build(params: &ModelParams, train: &Dataset, vocab: &Vocabulary) -> Result<Self> {
        let pairs: Vec<(&[f64], Vec<usize>)> = train
            .records
            .iter()
            .flat_map(|r| r.references.iter().map(|c| (r.features.as_slice(), vocab.encode(c))))
            .collect();
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus("training split has no references".into()));
        }
        let captions = pairs
            .par_iter()
            .map(|(f, c)| {
                let targets = caption_targets(params, c)?;
                let traj = params.forward(f, &shifted_inputs(params.dims.bos(), &targets))?;
                Ok((traj.hidden, targets))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder_hash: params.encoder_hash(),
            captions,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

fn check_vocab(checkpoint: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    let found = vocab.hash();
    if checkpoint.vocab_hash != found {
        return Err(Error::VocabMismatch {
            expected: checkpoint.vocab_hash.clone(),
            found,
        });
    }
    Ok(())
}

/// One epoch over the cached captions for a single grid point.
fn run_epoch(
    start: &ModelParams,
    cache: &HiddenCache,
    objective: Objective<'_>,
    lr: f64,
    config: &FinetuneConfig,
) -> Result<ModelParams> {
    if start.encoder_hash() != cache.encoder_hash {
        return Err(Error::ShapeMismatch("hidden-state cache built from a different encoder".into()));
    }
    let mut params = start.clone();
    if lr == 0.0 {
        return Ok(params);
    }
    let mut order: Vec<usize> = (0..cache.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let frozen = match objective {
        Objective::BiasProduct(f) => Some(f.params()),
        _ => None,
    };
    for chunk in order.chunks(config.batch_size) {
        let n = chunk.len() as f64;
        let mut grads = ModelParams::zeros(params.dims);
        for &k in chunk {
            let (hidden, targets) = &cache.captions[k];
            let t = targets.len() as f64;
            // the frozen copy shares the encoder, so its hidden states are ours
            let frozen_logits: Vec<Array1<f64>> = match frozen {
                Some(fp) => hidden.iter().map(|h| fp.logits(h)).collect(),
                None => Vec::new(),
            };
            classifier_pass(&params, hidden, targets, 1.0 / (t * n), &mut grads, false, |i, z, g| {
                position_loss(objective, z, frozen_logits.get(i), g, config.beta)
            });
        }
        params.add_scaled(-lr, &grads, TrainScope::ClassifierOnly);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after fine-tuning"));
    }
    Ok(params)
}

fn objective_for<'a>(config: &FinetuneConfig, frozen: Option<&'a FrozenReference>) -> Objective<'a> {
    match config.method {
        FinetuneMethod::Sft | FinetuneMethod::Tau => Objective::CrossEntropy,
        FinetuneMethod::Fl => Objective::Focal { gamma: config.gamma },
        FinetuneMethod::Afl => Objective::AntiFocal {
            gamma: config.gamma,
            alpha: config.alpha,
        },
        FinetuneMethod::Wft => Objective::BiasProduct(frozen.expect("wFT needs a frozen reference")),
    }
}

fn finetune_cached(
    checkpoint: &Checkpoint,
    cache: &HiddenCache,
    lr: f64,
    beta_prime: f64,
    config: &FinetuneConfig,
) -> Result<FinetuneOutput> {
    let start = &checkpoint.params;
    match config.method {
        FinetuneMethod::Tau => Ok(FinetuneOutput {
            params: tau_normalize(start, config.tau, config.normalize_bias)?,
            frozen: None,
        }),
        FinetuneMethod::Wft => {
            let frozen = FrozenReference::new(start.clone(), beta_prime)?;
            let params = run_epoch(start, cache, objective_for(config, Some(&frozen)), lr, config)?;
            Ok(FinetuneOutput {
                params,
                frozen: Some(frozen),
            })
        }
        _ => Ok(FinetuneOutput {
            params: run_epoch(start, cache, objective_for(config, None), lr, config)?,
            frozen: None,
        }),
    }
}

/// Fine-tune `checkpoint` for one epoch over the training references at one
/// (lr, beta') point. Only the classifier changes; `beta_prime` is ignored
/// except by wFT.
pub fn finetune(
    checkpoint: &Checkpoint,
    train: &Dataset,
    vocab: &Vocabulary,
    lr: f64,
    beta_prime: f64,
    config: &FinetuneConfig,
) -> Result<FinetuneOutput> {
    config.validate()?;
    check_vocab(checkpoint, vocab)?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid("lr", "must be finite and non-negative"));
    }
    if config.method.trains() {
        let cache = HiddenCache::build(&checkpoint.params, train, vocab)?;
        finetune_cached(checkpoint, &cache, lr, beta_prime, config)
    } else {
        finetune_cached(checkpoint, &HiddenCache::empty(), lr, beta_prime, config)
    }
}

impl HiddenCache {
    fn empty() -> Self {
        Self {
            encoder_hash: String::new(),
            captions: Vec::new(),
        }
    }
}

/// Decode `records` with a fine-tuned model under `config`'s decoding rules.
pub fn decode_finetuned(
    out: &FinetuneOutput,
    records: &[crate::corpus::ImageRecord],
    config: &FinetuneConfig,
) -> Result<Vec<crate::decode::Caption>> {
    let mut dc = config.decode;
    let frozen = match (config.method, config.decode_variant, &out.frozen) {
        (FinetuneMethod::Wft, DecodeVariant::Bp, Some(f)) => {
            dc.method = DecodeMethod::Bp;
            Some(f)
        }
        _ => None,
    };
    decode_records(&out.params, frozen, records, &dc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    /// `None` for methods without a frozen reference.
    pub beta_prime: Option<f64>,
    pub r_at_1: f64,
    pub unique_1: usize,
    pub cider: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub best: SweepRow,
    pub best_output: FinetuneOutput,
    pub best_report: MetricsReport,
    pub rows: Vec<SweepRow>,
}

/// Train one model per grid point, score each on `val` by R@1 and return the
/// winner (ties: smaller lr, then smaller beta'). Rows follow grid order.
pub fn sweep(
    checkpoint: &Checkpoint,
    train: &Dataset,
    val: &Dataset,
    vocab: &Vocabulary,
    stats: &CiderCorpusStats,
    config: &FinetuneConfig,
) -> Result<SweepResult> {
    config.validate()?;
    check_vocab(checkpoint, vocab)?;
    if val.records.is_empty() {
        return Err(Error::EmptyCorpus("validation split has no images".into()));
    }
    let lrs: Vec<f64> = if config.method.trains() {
        config.lr_grid.clone()
    } else {
        vec![0.0]
    };
    let betas: Vec<Option<f64>> = if config.method.uses_beta_prime() {
        config.beta_prime_grid.iter().map(|&b| Some(b)).collect()
    } else {
        vec![None]
    };
    if lrs.is_empty() || betas.is_empty() {
        return Err(Error::invalid("grid", "learning-rate and beta' grids must not be empty"));
    }
    let cache = if config.method.trains() {
        HiddenCache::build(&checkpoint.params, train, vocab)?
    } else {
        HiddenCache::empty()
    };
    let points: Vec<(f64, Option<f64>)> = lrs.iter().flat_map(|&lr| betas.iter().map(move |&b| (lr, b))).collect();

    let results: Vec<(SweepRow, FinetuneOutput, MetricsReport)> = points
        .par_iter()
        .map(|&(lr, bp)| {
            let out = finetune_cached(checkpoint, &cache, lr, bp.unwrap_or(1.0), config)?;
            let caps = decode_finetuned(&out, &val.records, config)?;
            let words: Vec<Vec<String>> = caps.iter().map(|c| vocab.decode(&c.tokens)).collect();
            let report = evaluate(&words, &val.records, vocab, stats)?;
            let row = SweepRow {
                lr,
                beta_prime: bp,
                r_at_1: report.r_at(1),
                unique_1: report.unique_1,
                cider: report.cider,
            };
            Ok((row, out, report))
        })
        .collect::<Result<_>>()?;

    let best_idx = (0..results.len())
        .max_by(|&a, &b| {
            let (ra, rb) = (&results[a].0, &results[b].0);
            ra.r_at_1
                .partial_cmp(&rb.r_at_1)
                .unwrap_or(std::cmp::Ordering::Equal)
                // max_by keeps the last maximum, so prefer smaller values by reversing
                .then(rb.lr.partial_cmp(&ra.lr).unwrap_or(std::cmp::Ordering::Equal))
                .then(
                    rb.beta_prime
                        .unwrap_or(0.0)
                        .partial_cmp(&ra.beta_prime.unwrap_or(0.0))
                        .unwrap_or(std::cmp::Ordering::Equal),
                )
        })
        .expect("non-empty grid");
    let rows: Vec<SweepRow> = results.iter().map(|r| r.0).collect();
    let (best, best_output, best_report) = results.into_iter().nth(best_idx).expect("index in range");
    Ok(SweepResult {
        best,
        best_output,
        best_report,
        rows,
    })
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "lr,beta_prime,r_at_1,unique_1,cider")?;
    for r in rows {
        let bp = r.beta_prime.map(|b| b.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", r.lr, bp, r.r_at_1, r.unique_1, r.cider)?;
    }
    Ok(())
}
