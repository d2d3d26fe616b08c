//! Zipfian caption corpus with image-specific rare attributes.
//!
//! Each image carries a few common attributes (head nouns drawn from a small
//! high-frequency pool) and a few rare attributes (modifiers drawn Zipfian
//! from a large pool). Every reference names all common attributes; each
//! rare attribute is mentioned, as a pre-modifier of its head noun, with
//! probability `rare_mention_prob`. Image features are a fixed random
//! projection of the attribute multi-hot vector plus Gaussian noise.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSplits, ImageRecord, Split};
use crate::error::{Error, Result};

// Fixed-length openers and joiners: caption length varies only with the
// number of rare attributes mentioned. Joiner determiners never appear in
// an opener, so references contain no repeated n-grams.
const OPENERS: &[&[&str]] = &[&["a"], &["the"], &["one"]];
const JOINERS: &[&[&str]] = &[
    &["with", "some"],
    &["near", "its"],
    &["by", "some"],
    &["and", "its"],
    &["beside", "some"],
];

const COMMON_WORDS: &[&str] = &[
    "dog", "cat", "man", "woman", "car", "table", "bird", "horse", "boat", "train", "child",
    "plate", "bench", "tree", "truck", "kite", "clock", "sheep", "bike", "bus", "cake", "chair",
    "bear", "cow", "pizza", "phone", "bed", "laptop", "vase", "sign", "cup", "ball",
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_common: usize,
    pub n_rare: usize,
    pub common_per_image: usize,
    pub rare_per_image: usize,
    /// Zipf exponent over the common pool.
    pub zipf_common: f64,
    /// Zipf exponent over the rare pool.
    pub zipf_rare: f64,
    pub rare_mention_prob: f64,
    pub refs_per_image: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Scale of a rare attribute's feature direction relative to a common one.
    pub rare_feature_scale: f64,
    pub min_count: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_common: 24,
            n_rare: 270,
            common_per_image: 2,
            rare_per_image: 2,
            zipf_common: 0.6,
            zipf_rare: 1.0,
            rare_mention_prob: 0.6,
            refs_per_image: 5,
            train_images: 2000,
            val_images: 1000,
            test_images: 1000,
            feature_dim: 32,
            feature_noise: 0.2,
            rare_feature_scale: 1.0,
            min_count: 5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_images == 0 {
            return Err(Error::invalid("train_images", "must be at least 1"));
        }
        if self.val_images == 0 {
            return Err(Error::invalid("val_images", "must be at least 1"));
        }
        if self.test_images == 0 {
            return Err(Error::invalid("test_images", "must be at least 1"));
        }
        if self.refs_per_image == 0 {
            return Err(Error::invalid("refs_per_image", "must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be at least 1"));
        }
        if self.common_per_image == 0 {
            return Err(Error::invalid("common_per_image", "must be at least 1"));
        }
        if self.n_common > COMMON_WORDS.len() {
            return Err(Error::invalid(
                "n_common",
                format!("at most {} common words available", COMMON_WORDS.len()),
            ));
        }
        if self.n_common < self.common_per_image {
            return Err(Error::invalid(
                "n_common",
                format!(
                    "pool of {} smaller than {} attributes per image",
                    self.n_common, self.common_per_image
                ),
            ));
        }
        if self.n_rare < self.rare_per_image {
            return Err(Error::invalid(
                "n_rare",
                format!(
                    "pool of {} smaller than {} attributes per image",
                    self.n_rare, self.rare_per_image
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.rare_mention_prob) {
            return Err(Error::invalid("rare_mention_prob", "must lie in [0, 1]"));
        }
        if !(self.zipf_common >= 0.0 && self.zipf_rare >= 0.0) {
            return Err(Error::invalid("zipf", "exponents must be non-negative"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::invalid("feature_noise", "must be finite and non-negative"));
        }
        if self.min_count == 0 {
            return Err(Error::invalid("min_count", "must be at least 1"));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.train_images + self.val_images + self.test_images
    }
}

/// Deterministic pseudo-words for the rare pool: CV syllables, unique.
pub fn rare_words(n: usize) -> Vec<String> {
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let s = syllables.len();
    (0..n)
        .map(|i| {
            // three syllables cover s^3 words; the trailing "x" keeps them
            // distinct from any common word.
            let a = i % s;
            let b = (i / s) % s;
            let c = (i / (s * s)) % s;
            format!("{}{}{}x", syllables[a], syllables[b], syllables[c])
        })
        .collect()
}

struct AttributePools {
    common: Vec<String>,
    rare: Vec<String>,
    /// feature_dim x (n_common + n_rare), column-major per attribute.
    projection: Vec<Vec<f64>>,
}

impl AttributePools {
    fn new(cfg: &SyntheticConfig, seed: u64) -> Self {
        let common: Vec<String> = COMMON_WORDS[..cfg.n_common]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rare = rare_words(cfg.n_rare);
        // the projection stream is independent of the sampling stream so
        // every split shares one attribute-to-feature map.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d_cafe_d00d);
        let normal = Normal::new(0.0, 1.0 / (cfg.feature_dim as f64).sqrt()).unwrap();
        let projection = (0..cfg.n_common + cfg.n_rare)
            .map(|a| {
                let scale = if a < cfg.n_common { 1.0 } else { cfg.rare_feature_scale };
                (0..cfg.feature_dim)
                    .map(|_| scale * normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Self {
            common,
            rare,
            projection,
        }
    }
}

fn draw_distinct<R: Rng>(rng: &mut R, zipf: &Zipf<f64>, k: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    while picked.len() < k {
        let idx = zipf.sample(rng) as usize - 1;
        if !picked.contains(&idx) {
            picked.push(idx);
        }
    }
    picked
}

fn make_image<R: Rng>(
    id: u64,
    cfg: &SyntheticConfig,
    pools: &AttributePools,
    zipf_common: &Zipf<f64>,
    zipf_rare: &Zipf<f64>,
    noise: &Normal<f64>,
    rng: &mut R,
) -> ImageRecord {
    let commons = draw_distinct(rng, zipf_common, cfg.common_per_image);
    let rares = draw_distinct(rng, zipf_rare, cfg.rare_per_image);

    // canonical order keeps features a function of the attribute set
    let mut commons_sorted = commons.clone();
    commons_sorted.sort_unstable();
    let mut rares_sorted = rares.clone();
    rares_sorted.sort_unstable();
    let mut features = vec![0.0; cfg.feature_dim];
    for &c in &commons_sorted {
        for (f, p) in features.iter_mut().zip(&pools.projection[c]) {
            *f += p;
        }
    }
    for &r in &rares_sorted {
        for (f, p) in features.iter_mut().zip(&pools.projection[cfg.n_common + r]) {
            *f += p;
        }
    }
    for f in features.iter_mut() {
        *f += noise.sample(rng);
    }

    // rare attribute j modifies common head j mod common_per_image
    let mut references = Vec::with_capacity(cfg.refs_per_image);
    for _ in 0..cfg.refs_per_image {
        let mut words: Vec<String> = Vec::new();
        let opener = OPENERS.choose(rng).unwrap();
        words.extend(opener.iter().map(|s| s.to_string()));
        for (slot, &c) in commons.iter().enumerate() {
            if slot > 0 {
                let joiner = JOINERS.choose(rng).unwrap();
                words.extend(joiner.iter().map(|s| s.to_string()));
            }
            for (j, &r) in rares.iter().enumerate() {
                if j % cfg.common_per_image == slot && rng.random::<f64>() < cfg.rare_mention_prob {
                    words.push(pools.rare[r].clone());
                }
            }
            words.push(pools.common[c].clone());
        }
        references.push(words);
    }

    let attributes: BTreeSet<String> = commons
        .iter()
        .map(|&c| pools.common[c].clone())
        .chain(rares.iter().map(|&r| pools.rare[r].clone()))
        .collect();

    ImageRecord {
        id,
        features,
        references,
        attributes: attributes.into_iter().collect(),
    }
}

/// Generates train/val/test splits. Identical `(config, seed)` always yields
/// an identical corpus.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<DatasetSplits> {
    cfg.validate()?;
    let pools = AttributePools::new(cfg, seed);
    let zipf_common = Zipf::new(cfg.n_common as f64, cfg.zipf_common)
        .map_err(|e| Error::invalid("zipf_common", e.to_string()))?;
    let zipf_rare = Zipf::new(cfg.n_rare as f64, cfg.zipf_rare)
        .map_err(|e| Error::invalid("zipf_rare", e.to_string()))?;
    let noise = Normal::new(0.0, cfg.feature_noise)
        .map_err(|e| Error::invalid("feature_noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut next_id = 0u64;
    let mut split = |split: Split, n: usize, rng: &mut ChaCha8Rng| {
        let records = (0..n)
            .map(|_| {
                let id = next_id;
                next_id += 1;
                make_image(id, cfg, &pools, &zipf_common, &zipf_rare, &noise, rng)
            })
            .collect();
        Dataset {
            split,
            seed,
            config: cfg.clone(),
            records,
        }
    };
    let train = split(Split::Train, cfg.train_images, &mut rng);
    let val = split(Split::Val, cfg.val_images, &mut rng);
    let test = split(Split::Test, cfg.test_images, &mut rng);
    Ok(DatasetSplits { train, val, test })
}

#[cfg(test)]
mod tests {
    use std::collections::{HashMap, HashSet};

    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_images: 300,
            val_images: 20,
            test_images: 20,
            n_rare: 60,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic_dataset(&small(), 7).unwrap();
        let b = generate_synthetic_dataset(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small(), 8).unwrap();
        assert_ne!(a.train.records, c.train.records);
    }

    #[test]
    fn rare_mention_probability_one_mentions_everything() {
        let cfg = SyntheticConfig {
            rare_mention_prob: 1.0,
            ..small()
        };
        let d = generate_synthetic_dataset(&cfg, 3).unwrap();
        let rare: HashSet<String> = rare_words(cfg.n_rare).into_iter().collect();
        for rec in d.train.records.iter().chain(&d.test.records) {
            let rare_attrs: Vec<&String> =
                rec.attributes.iter().filter(|a| rare.contains(*a)).collect();
            assert_eq!(rare_attrs.len(), cfg.rare_per_image);
            for r in &rec.references {
                for a in &rare_attrs {
                    assert!(r.contains(a), "{r:?} lacks {a}");
                }
            }
        }
    }

    #[test]
    fn pool_too_small_is_an_error() {
        let cfg = SyntheticConfig {
            n_rare: 1,
            rare_per_image: 2,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_dataset(&cfg, 1),
            Err(Error::Invalid { field: "n_rare", .. })
        ));
        let cfg = SyntheticConfig {
            train_images: 0,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_dataset(&cfg, 1),
            Err(Error::Invalid {
                field: "train_images",
                ..
            })
        ));
    }

    #[test]
    fn records_are_well_formed() {
        let d = generate_synthetic_dataset(&small(), 11).unwrap();
        let mut ids = HashSet::new();
        for split in d.all() {
            for rec in &split.records {
                assert!(ids.insert(rec.id), "duplicate id {}", rec.id);
                assert_eq!(rec.features.len(), 32);
                assert!(rec.features.iter().all(|x| x.is_finite()));
                assert_eq!(rec.references.len(), 5);
                assert!(rec.references.iter().all(|r| !r.is_empty()));
            }
        }
    }

    #[test]
    fn rare_pool_tally_is_rank_ordered() {
        // tally oracle: count mentions of each rare word by its pool rank and
        // check that block sums decrease with rank.
        let cfg = SyntheticConfig {
            train_images: 2000,
            val_images: 1,
            test_images: 1,
            ..Default::default()
        };
        let d = generate_synthetic_dataset(&cfg, 5).unwrap();
        let words = rare_words(cfg.n_rare);
        let mut tally: HashMap<&str, usize> = HashMap::new();
        for rec in &d.train.records {
            for r in &rec.references {
                for w in r {
                    *tally.entry(w.as_str()).or_default() += 1;
                }
            }
        }
        let counts: Vec<usize> = words
            .iter()
            .map(|w| tally.get(w.as_str()).copied().unwrap_or(0))
            .collect();
        let blocks: Vec<usize> = [0..5, 5..20, 20..60, 60..150, 150..270]
            .into_iter()
            .map(|r| counts[r.clone()].iter().sum::<usize>() / r.len())
            .collect();
        assert!(blocks.windows(2).all(|w| w[0] >= w[1]), "{blocks:?}");
        assert!(counts[0] > counts[counts.len() - 1]);

        // the common pool dominates the rare pool in raw frequency
        let common_min = COMMON_WORDS[..cfg.n_common]
            .iter()
            .map(|w| tally.get(w).copied().unwrap_or(0))
            .min()
            .unwrap();
        assert!(common_min > counts[10]);
    }

    #[test]
    fn splits_share_the_feature_map() {
        // noise-free features are a pure function of the attribute set
        let cfg = SyntheticConfig {
            feature_noise: 0.0,
            n_common: 3,
            n_rare: 4,
            ..small()
        };
        let d = generate_synthetic_dataset(&cfg, 9).unwrap();
        let mut by_attrs: HashMap<Vec<String>, Vec<f64>> = HashMap::new();
        let mut collisions = 0;
        for split in d.all() {
            for rec in &split.records {
                if let Some(prev) = by_attrs.insert(rec.attributes.clone(), rec.features.clone()) {
                    assert_eq!(prev, rec.features);
                    collisions += 1;
                }
            }
        }
        assert!(collisions > 0);
    }
}
