//! Caption-set evaluation: vocabulary statistics, repetition, out-of-reference
//! words, retrieval recall and CIDEr-D.
//!
//! Retrieval uses a deterministic oracle in place of a learned image-text
//! model: each image is a document made of its attribute words and every
//! token of its references, captions and documents are tf-idf weighted with
//! idf taken over the split's documents, and images are ranked by cosine
//! similarity to the caption.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageRecord, Vocabulary, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::rl::CiderCorpusStats;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

fn is_special(w: &str) -> bool {
    w == UNK || w == BOS || w == EOS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocabStats {
    pub unique_1: usize,
    pub unique_s: usize,
    pub mean_length: f64,
}

/// Distinct words (specials excluded), distinct sentences and mean length.
pub fn vocab_stats<S: AsRef<str>>(captions: &[Vec<S>]) -> VocabStats {
    let mut words: HashSet<&str> = HashSet::new();
    let mut sentences: HashSet<Vec<&str>> = HashSet::new();
    let mut tokens = 0usize;
    for c in captions {
        let s: Vec<&str> = c.iter().map(|w| w.as_ref()).filter(|w| *w != BOS && *w != EOS).collect();
        tokens += s.len();
        words.extend(s.iter().copied().filter(|w| !is_special(w)));
        sentences.insert(s);
    }
    VocabStats {
        unique_1: words.len(),
        unique_s: sentences.len(),
        mean_length: if captions.is_empty() {
            0.0
        } else {
            tokens as f64 / captions.len() as f64
        },
    }
}

/// Mean over captions and n = 1..=max_n of `1 - distinct n-grams / n-grams`;
/// an n with no n-grams contributes 0.
pub fn repetition_rate<S: AsRef<str>>(captions: &[Vec<S>], max_n: usize) -> Result<f64> {
    if max_n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    if captions.is_empty() {
        return Ok(0.0);
    }
    let per_caption = |c: &Vec<S>| {
        let toks: Vec<&str> = c.iter().map(|w| w.as_ref()).collect();
        let mut sum = 0.0;
        for n in 1..=max_n {
            if toks.len() < n {
                continue;
            }
            let grams: Vec<&[&str]> = toks.windows(n).collect();
            let distinct: HashSet<&[&str]> = grams.iter().copied().collect();
            sum += 1.0 - distinct.len() as f64 / grams.len() as f64;
        }
        sum / max_n as f64
    };
    Ok(captions.iter().map(per_caption).sum::<f64>() / captions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OorStats {
    pub count: usize,
    /// Mean frequency rank of OOR tokens that have a rank; 0 when none do.
    pub mean_rank: f64,
    pub rank_defined: bool,
}

/// Count output tokens absent from every reference of their own image.
/// Both sides are mapped through the vocabulary first; `<unk>` has no
/// frequency rank and is left out of the mean.
pub fn oor_analysis<S: AsRef<str>>(
    captions: &[Vec<S>],
    references: &[&[Vec<String>]],
    vocab: &Vocabulary,
) -> Result<OorStats> {
    if captions.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} captions for {} images",
            captions.len(),
            references.len()
        )));
    }
    let mut count = 0usize;
    let mut ranks = Vec::new();
    for (c, refs) in captions.iter().zip(references) {
        let seen: HashSet<String> = refs.iter().flat_map(|r| vocab.normalize(r)).collect();
        let c: Vec<&str> = c.iter().map(|w| w.as_ref()).collect();
        for w in vocab.normalize(&c) {
            if !seen.contains(&w) {
                count += 1;
                if let Some(r) = vocab.rank_of(&w) {
                    ranks.push(r as f64);
                }
            }
        }
    }
    let rank_defined = !ranks.is_empty();
    Ok(OorStats {
        count,
        mean_rank: if rank_defined {
            ranks.iter().sum::<f64>() / ranks.len() as f64
        } else {
            0.0
        },
        rank_defined,
    })
}

/// tf-idf cosine retrieval index over one split.
pub struct RetrievalIndex {
    idf: HashMap<String, f64>,
    docs: Vec<(u64, BTreeMap<String, f64>, f64)>,
}

impl RetrievalIndex {
    pub fn build(records: &[ImageRecord]) -> Self {
        let sets: Vec<HashSet<&str>> = records
            .iter()
            .map(|r| {
                r.attributes
                    .iter()
                    .map(String::as_str)
                    .chain(r.references.iter().flatten().map(String::as_str))
                    .collect()
            })
            .collect();
        let mut df: HashMap<&str, f64> = HashMap::new();
        for s in &sets {
            for w in s {
                *df.entry(w).or_default() += 1.0;
            }
        }
        let n = records.len().max(1) as f64;
        let idf: HashMap<String, f64> = df.iter().map(|(w, d)| (w.to_string(), (n / d).ln())).collect();
        let docs = records
            .iter()
            .zip(&sets)
            .map(|(r, s)| {
                let v: BTreeMap<String, f64> = s.iter().map(|w| (w.to_string(), idf[*w])).collect();
                let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
                (r.id, v, norm)
            })
            .collect();
        Self { idf, docs }
    }

    fn scores<S: AsRef<str>>(&self, caption: &[S]) -> Vec<f64> {
        let mut q: BTreeMap<&str, f64> = BTreeMap::new();
        for w in caption {
            if let Some(idf) = self.idf.get(w.as_ref()) {
                *q.entry(w.as_ref()).or_default() += idf;
            }
        }
        let qn = q.values().map(|x| x * x).sum::<f64>().sqrt();
        self.docs
            .iter()
            .map(|(_, d, dn)| {
                if qn == 0.0 || *dn == 0.0 {
                    return 0.0;
                }
                let dot: f64 = q.iter().map(|(w, x)| x * d.get(*w).copied().unwrap_or(0.0)).sum();
                dot / (qn * dn)
            })
            .collect()
    }

    /// 1-based rank of image `target` (an index into the split) for a caption;
    /// equal scores are ordered by lower image id.
    pub fn rank_of<S: AsRef<str>>(&self, caption: &[S], target: usize) -> usize {
        let scores = self.scores(caption);
        let (own, own_id) = (scores[target], self.docs[target].0);
        1 + scores
            .iter()
            .zip(&self.docs)
            .filter(|(s, d)| **s > own || (**s == own && d.0 < own_id))
            .count()
    }
}

/// Percentage of captions whose own image ranks within K, for each K.
pub fn rk_retrieval<S: AsRef<str> + Sync>(
    captions: &[Vec<S>],
    records: &[ImageRecord],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if captions.len() != records.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} captions for {} images",
            captions.len(),
            records.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus("retrieval split has no images".into()));
    }
    let index = RetrievalIndex::build(records);
    let ranks: Vec<usize> = captions.par_iter().enumerate().map(|(i, c)| index.rank_of(c, i)).collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, 100.0 * hits as f64 / ranks.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub unique_1: usize,
    pub unique_s: usize,
    pub mean_length: f64,
    pub cider: f64,
    pub rep: f64,
    pub r_at: BTreeMap<usize, f64>,
    pub oor_count: usize,
    pub oor_mean_rank: f64,
    pub oor_rank_defined: bool,
}

/// Every metric for one caption per record, in record order.
pub fn evaluate<S: AsRef<str> + Sync>(
    captions: &[Vec<S>],
    records: &[ImageRecord],
    vocab: &Vocabulary,
    stats: &CiderCorpusStats,
) -> Result<MetricsReport> {
    if captions.len() != records.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} captions for {} images",
            captions.len(),
            records.len()
        )));
    }
    let vs = vocab_stats(captions);
    let rep = repetition_rate(captions, 4)?;
    let refs: Vec<&[Vec<String>]> = records.iter().map(|r| r.references.as_slice()).collect();
    let oor = oor_analysis(captions, &refs, vocab)?;
    let r_at = rk_retrieval(captions, records, &DEFAULT_KS)?;
    let cider = if records.is_empty() {
        0.0
    } else {
        let scores: Vec<f64> = captions
            .par_iter()
            .zip(records)
            .map(|(c, r)| stats.score(c, &r.references))
            .collect();
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Ok(MetricsReport {
        unique_1: vs.unique_1,
        unique_s: vs.unique_s,
        mean_length: vs.mean_length,
        cider,
        rep,
        r_at,
        oor_count: oor.count,
        oor_mean_rank: oor.mean_rank,
        oor_rank_defined: oor.rank_defined,
    })
}

impl MetricsReport {
    pub fn r_at(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn csv_header() -> String {
        let mut h = String::from("run_id,unique_1,unique_s,length,cider,rep");
        for k in DEFAULT_KS {
            h.push_str(&format!(",r_at_{k}"));
        }
        h.push_str(",oor_count,oor_mean_rank");
        h
    }

    pub fn csv_row(&self, run_id: &str) -> String {
        let mut row = format!(
            "{run_id},{},{},{},{},{}",
            self.unique_1, self.unique_s, self.mean_length, self.cider, self.rep
        );
        for k in DEFAULT_KS {
            row.push_str(&format!(",{}", self.r_at(k)));
        }
        if self.oor_rank_defined {
            row.push_str(&format!(",{},{}", self.oor_count, self.oor_mean_rank));
        } else {
            row.push_str(&format!(",{},", self.oor_count));
        }
        row
    }

    pub fn write_csv<W: Write>(&self, run_id: &str, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::csv_header())?;
        writeln!(w, "{}", self.csv_row(run_id))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>10}", "Unique-1", self.unique_1)?;
        writeln!(f, "{:<16}{:>10}", "Unique-S", self.unique_s)?;
        writeln!(f, "{:<16}{:>10.2}", "Length", self.mean_length)?;
        writeln!(f, "{:<16}{:>10.2}", "CIDEr", self.cider * 100.0)?;
        for (k, v) in &self.r_at {
            writeln!(f, "{:<16}{:>10.1}", format!("R@{k}"), v)?;
        }
        writeln!(f, "{:<16}{:>10.2}", "Rep (%)", self.rep * 100.0)?;
        writeln!(f, "{:<16}{:>10}", "OOR number", self.oor_count)?;
        if self.oor_rank_defined {
            writeln!(f, "{:<16}{:>10.1}", "OOR rank", self.oor_mean_rank)
        } else {
            writeln!(f, "{:<16}{:>10}", "OOR rank", "n/a")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn caps(v: &[&str]) -> Vec<Vec<String>> {
        v.iter().map(|s| tokenize(s)).collect()
    }

    fn rec(id: u64, refs: &[&str], attrs: &[&str]) -> ImageRecord {
        ImageRecord {
            id,
            features: vec![0.0],
            references: caps(refs),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn vocab_stats_hand_example() {
        let s = vocab_stats(&caps(&["a cat", "a cat", "a dog"]));
        assert_eq!((s.unique_1, s.unique_s), (3, 2));
        assert_eq!(s.mean_length, 2.0);
        let e = vocab_stats::<String>(&[]);
        assert_eq!((e.unique_1, e.unique_s, e.mean_length), (0, 0, 0.0));
        let mut twice = caps(&["a cat", "a dog"]);
        twice.extend(caps(&["a cat", "a dog"]));
        let s = vocab_stats(&twice);
        assert_eq!((s.unique_1, s.unique_s), (3, 2));
    }

    #[test]
    fn vocab_stats_skips_unk() {
        let c = vec![vec!["a".to_string(), UNK.to_string()]];
        assert_eq!(vocab_stats(&c).unique_1, 1);
        assert_eq!(vocab_stats(&c).mean_length, 2.0);
    }

    #[test]
    fn repetition_hand_values() {
        let r = repetition_rate(&caps(&["a a a a"]), 4).unwrap();
        assert!((r - 0.479167).abs() < 1e-6, "{r}");
        assert_eq!(repetition_rate(&caps(&["a b c d e"]), 4).unwrap(), 0.0);
        let x = caps(&["a a b", "c d d d", "e"]);
        let mut y = x.clone();
        y.reverse();
        assert_eq!(repetition_rate(&x, 4).unwrap(), repetition_rate(&y, 4).unwrap());
        assert!(repetition_rate(&x, 0).is_err());
    }

    fn vocab() -> Vocabulary {
        let refs = caps(&["a a a a cat cat cat dog dog zebra", "a cat", "zebra"]);
        Vocabulary::build(refs.iter().map(|r| r.as_slice()), 1).unwrap()
    }

    #[test]
    fn oor_examples() {
        let v = vocab();
        let refs = caps(&["a cat on a mat"]);
        let r: Vec<&[Vec<String>]> = vec![&refs];
        let o = oor_analysis(&caps(&["a cat on a mat"]), &r, &v).unwrap();
        assert_eq!((o.count, o.rank_defined, o.mean_rank), (0, false, 0.0));
        let o = oor_analysis(&caps(&["zebra"]), &r, &v).unwrap();
        assert_eq!(o.count, 1);
        assert_eq!(o.mean_rank, v.rank_of("zebra").unwrap() as f64);
        // same count, rarer choice, higher mean rank
        let refs = caps(&["a mat"]);
        let r: Vec<&[Vec<String>]> = vec![&refs];
        let common = oor_analysis(&caps(&["a cat"]), &r, &v).unwrap();
        let rare = oor_analysis(&caps(&["a zebra"]), &r, &v).unwrap();
        assert_eq!(common.count, rare.count);
        assert!(rare.mean_rank > common.mean_rank);
    }

    #[test]
    fn retrieval_examples() {
        let one = [rec(0, &["a dog"], &["dog"])];
        let r = rk_retrieval(&caps(&["anything"]), &one, &DEFAULT_KS).unwrap();
        assert_eq!(r[&1], 100.0);

        let recs = [
            rec(0, &["a red kite"], &["kite", "red"]),
            rec(1, &["two blue boats"], &["blue", "boat"]),
            rec(2, &["an old tram"], &["old", "tram"]),
        ];
        let index = RetrievalIndex::build(&recs);
        assert_eq!(index.rank_of(&tokenize("red kite a"), 0), 1);
        // empty caption ties everything at 0, lower ids first
        assert_eq!(index.rank_of::<String>(&[], 2), 3);
        let r = rk_retrieval(&caps(&["kite", "boats", "zzz"]), &recs, &[1, 2, 3]).unwrap();
        assert!(r[&1] <= r[&2] && r[&2] <= r[&3]);
        assert!(rk_retrieval(&caps(&["kite"]), &recs, &[1]).is_err());
    }

    #[test]
    fn self_evaluation() {
        let recs = vec![
            rec(0, &["a dog runs on the grass"], &["dog"]),
            rec(1, &["two men play chess in the park"], &["chess"]),
            rec(2, &["a bus parked near the station"], &["bus"]),
        ];
        let v = Vocabulary::build(recs.iter().flat_map(|r| r.references.iter().map(|c| c.as_slice())), 1).unwrap();
        let stats = CiderCorpusStats::build(recs.iter().map(|r| r.references.as_slice()));
        let captions: Vec<Vec<String>> = recs.iter().map(|r| r.references[0].clone()).collect();
        let rep = evaluate(&captions, &recs, &v, &stats).unwrap();
        assert_eq!(rep.oor_count, 0);
        assert!((rep.cider - 10.0).abs() < 1e-6);
        assert_eq!(rep.rep, repetition_rate(&captions, 4).unwrap());
        assert_eq!(rep, evaluate(&captions, &recs, &v, &stats).unwrap());

        let mut recs_p = recs.clone();
        recs_p.reverse();
        let mut caps_p = captions.clone();
        caps_p.reverse();
        assert_eq!(rep, evaluate(&caps_p, &recs_p, &v, &stats).unwrap());
    }

    #[test]
    fn csv_has_analysis_columns() {
        let h = MetricsReport::csv_header();
        for col in ["rep", "oor_count", "oor_mean_rank", "r_at_1", "unique_s"] {
            assert!(h.split(',').any(|c| c == col), "{col}");
        }
    }
}
