use std::collections::HashMap;
use std::io::Write;

use super::Vocabulary;
use crate::error::{Error, Result};

/// Relative frequency of caption tokens grouped by ground-truth frequency rank.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqHistogram {
    /// Bin 0 holds the most frequent ground-truth words.
    pub bins: Vec<f64>,
    /// Mass outside the ranked bins. The bins partition every regular word,
    /// so this is zero; kept so `head` views and full views share one type.
    pub tail: f64,
    pub bin_of: HashMap<String, usize>,
}

impl FreqHistogram {
    /// First `k` bins plus the summed remainder, the usual plotting view.
    pub fn head(&self, k: usize) -> (Vec<f64>, f64) {
        let k = k.min(self.bins.len());
        let rest = self.bins[k..].iter().sum::<f64>() + self.tail;
        (self.bins[..k].to_vec(), rest)
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum::<f64>() + self.tail
    }

    /// CSV with header `bin_index,relative_frequency`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_index,relative_frequency")?;
        for (i, v) in self.bins.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        Ok(())
    }
}

/// Bins regular words by descending training frequency into `n_bins`
/// near-equal contiguous groups (earlier bins absorb the remainder) and
/// accumulates the relative frequency of caption tokens per bin. `<unk>` and
/// the framing tokens are not counted.
pub fn freq_histogram<S: AsRef<str>>(
    captions: &[Vec<S>],
    vocab: &Vocabulary,
    n_bins: usize,
) -> Result<FreqHistogram> {
    let n_words = vocab.n_words();
    if n_bins == 0 || n_bins > n_words {
        return Err(Error::invalid(
            "n_bins",
            format!("{n_bins} bins for {n_words} ranked words"),
        ));
    }
    let base = n_words / n_bins;
    let extra = n_words % n_bins;
    // word ids are already in rank order
    let mut bin_of_id = Vec::with_capacity(n_words);
    for b in 0..n_bins {
        let size = base + usize::from(b < extra);
        bin_of_id.extend(std::iter::repeat_n(b, size));
    }

    let mut counts = vec![0u64; n_bins];
    let mut total = 0u64;
    for cap in captions {
        for tok in cap {
            if let Some(id) = vocab.get(tok.as_ref()) {
                if !vocab.is_special_id(id) {
                    counts[bin_of_id[id]] += 1;
                    total += 1;
                }
            }
        }
    }
    let bins = if total == 0 {
        vec![0.0; n_bins]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    };
    let bin_of = (0..n_words)
        .map(|id| (vocab.token(id).to_string(), bin_of_id[id]))
        .collect();
    Ok(FreqHistogram {
        bins,
        tail: 0.0,
        bin_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn corpus() -> Vec<Vec<String>> {
        ["a a a a b b b c c d", "a b e", "f g"]
            .iter()
            .map(|s| tokenize(s))
            .collect()
    }

    fn vocab() -> Vocabulary {
        let c = corpus();
        Vocabulary::build(c.iter().map(|v| v.as_slice()), 1).unwrap()
    }

    #[test]
    fn self_comparison_reproduces_corpus_distribution() {
        let v = vocab();
        let c = corpus();
        let h = freq_histogram(&c, &v, v.n_words()).unwrap();
        let total: u64 = (0..v.n_words()).map(|i| v.freq(i)).sum();
        for (i, b) in h.bins.iter().enumerate() {
            assert!((b - v.freq(i) as f64 / total as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn point_mass_on_top_word() {
        let v = vocab();
        let caps = vec![vec!["a".to_string(), "a".to_string()]];
        let h = freq_histogram(&caps, &v, 3).unwrap();
        assert_eq!(h.bins, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn remainder_goes_to_earlier_bins() {
        // 7 words, 3 bins -> sizes 3, 2, 2
        let v = vocab();
        let h = freq_histogram(&corpus(), &v, 3).unwrap();
        let mut sizes = [0; 3];
        for b in h.bin_of.values() {
            sizes[*b] += 1;
        }
        assert_eq!(sizes, [3, 2, 2]);
        assert_eq!(h.bin_of["a"], 0);
        assert_eq!(h.bin_of["g"], 2);
    }

    #[test]
    fn unk_and_specials_excluded() {
        let v = vocab();
        let caps = vec![vec!["zebra", "<eos>", "<unk>", "b"]];
        let h = freq_histogram(&caps, &v, 7).unwrap();
        assert_eq!(h.bins[1], 1.0);
        assert!((h.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_many_bins_rejected() {
        let v = vocab();
        assert!(freq_histogram(&corpus(), &v, 8).is_err());
        assert!(freq_histogram(&corpus(), &v, 0).is_err());
    }

    #[test]
    fn head_view_sums_to_one() {
        let v = vocab();
        let h = freq_histogram(&corpus(), &v, 7).unwrap();
        let (head, rest) = h.head(2);
        assert_eq!(head.len(), 2);
        assert!((head.iter().sum::<f64>() + rest - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalized_and_order_invariant(
                caps in prop::collection::vec(
                    prop::collection::vec(prop::sample::select(vec!["a","b","c","d","e","f","g","zz"]), 0..6),
                    1..8,
                ),
                n_bins in 1usize..=7,
            ) {
                let v = vocab();
                let h = freq_histogram(&caps, &v, n_bins).unwrap();
                prop_assert!(h.bins.iter().all(|&b| b >= 0.0));
                let counted = caps.iter().flatten().filter(|t| **t != "zz").count();
                if counted > 0 {
                    prop_assert!((h.total() - 1.0).abs() < 1e-9);
                }
                let mut rev = caps.clone();
                rev.reverse();
                let h2 = freq_histogram(&rev, &v, n_bins).unwrap();
                prop_assert_eq!(h.bins, h2.bins);
            }
        }
    }
}
