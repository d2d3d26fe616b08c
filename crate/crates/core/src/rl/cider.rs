//! CIDEr-D with document frequencies taken from a fixed reference corpus.

use std::collections::{BTreeMap, HashMap, HashSet};

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

type Ngram = Vec<String>;

/// Document frequencies of 1..4-grams over a reference corpus, one document
/// per image.
#[derive(Debug, Clone, Default)]
pub struct CiderCorpusStats {
    df: HashMap<Ngram, f64>,
    log_ref_len: f64,
}

// ordered maps keep every floating-point sum in a fixed order
fn ngram_counts<S: AsRef<str>>(tokens: &[S]) -> [BTreeMap<Ngram, f64>; MAX_N] {
    let mut out: [BTreeMap<Ngram, f64>; MAX_N] = Default::default();
    for n in 1..=MAX_N {
        if tokens.len() < n {
            continue;
        }
        for w in tokens.windows(n) {
            let g: Ngram = w.iter().map(|s| s.as_ref().to_string()).collect();
            *out[n - 1].entry(g).or_default() += 1.0;
        }
    }
    out
}

impl CiderCorpusStats {
    /// `images` yields the reference set of each image.
    pub fn build<'a, I>(images: I) -> Self
    where
        I: IntoIterator<Item = &'a [Vec<String>]>,
    {
        let mut df: HashMap<Ngram, f64> = HashMap::new();
        let mut n_images = 0usize;
        for refs in images {
            n_images += 1;
            let mut seen: HashSet<Ngram> = HashSet::new();
            for r in refs {
                for counts in ngram_counts(r) {
                    seen.extend(counts.into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_default() += 1.0;
            }
        }
        Self {
            df,
            log_ref_len: (n_images.max(1) as f64).ln(),
        }
    }

    pub fn document_frequency(&self, ngram: &[&str]) -> f64 {
        let key: Ngram = ngram.iter().map(|s| s.to_string()).collect();
        self.df.get(&key).copied().unwrap_or(0.0)
    }

    fn vectorize<S: AsRef<str>>(&self, tokens: &[S]) -> ([BTreeMap<Ngram, f64>; MAX_N], [f64; MAX_N]) {
        let mut vecs = ngram_counts(tokens);
        let mut norms = [0.0; MAX_N];
        for (n, v) in vecs.iter_mut().enumerate() {
            for (g, tf) in v.iter_mut() {
                let df = self.df.get(g).copied().unwrap_or(0.0);
                *tf *= self.log_ref_len - df.max(1.0).ln();
                norms[n] += *tf * *tf;
            }
            norms[n] = norms[n].sqrt();
        }
        (vecs, norms)
    }

    /// CIDEr-D of `candidate` against `references`, in `[0, 10]`.
    pub fn score<S: AsRef<str>, R: AsRef<str>>(&self, candidate: &[S], references: &[Vec<R>]) -> f64 {
        if candidate.is_empty() || references.is_empty() {
            return 0.0;
        }
        let (cv, cn) = self.vectorize(candidate);
        let mut total = [0.0; MAX_N];
        for r in references {
            let (rv, rn) = self.vectorize(r);
            let delta = candidate.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            for n in 0..MAX_N {
                if cn[n] == 0.0 || rn[n] == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, &c) in &cv[n] {
                    if let Some(&rr) = rv[n].get(g) {
                        dot += c.min(rr) * rr;
                    }
                }
                total[n] += penalty * dot / (cn[n] * rn[n]);
            }
        }
        let mean_over_n = total.iter().sum::<f64>() / MAX_N as f64;
        10.0 * mean_over_n / references.len() as f64
    }
}

/// Convenience wrapper matching the scorer's argument order elsewhere.
pub fn cider_d<S: AsRef<str>, R: AsRef<str>>(
    candidate: &[S],
    references: &[Vec<R>],
    stats: &CiderCorpusStats,
) -> f64 {
    stats.score(candidate, references)
}
