//! Tokenization, vocabulary, synthetic dataset generation and frequency
//! histograms.
//!
//! On disk a dataset is a directory holding `meta.json` (generator config
//! and seed) plus one line-delimited JSON file per split. Each line is one
//! image:
//!
//! ```text
//! {"id":0,"features":[0.12,...],"references":["a dog with a cat",...],"attributes":["cat","dog",...]}
//! ```
//!
//! References are stored as space-joined token strings without `<bos>` or
//! `<eos>`; features are decimal JSON numbers written in shortest
//! round-trip form.

mod histogram;
mod synthetic;
mod vocab;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use histogram::{freq_histogram, FreqHistogram};
pub use synthetic::{generate_synthetic_dataset, rare_words, SyntheticConfig};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, UNK};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub features: Vec<f64>,
    /// Tokenized references, unframed.
    pub references: Vec<Vec<String>>,
    /// Latent ground-truth attribute words, sorted.
    pub attributes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: u64,
    features: Vec<f64>,
    references: Vec<String>,
    attributes: Vec<String>,
}

impl ImageRecord {
    fn to_line(&self) -> RecordLine {
        RecordLine {
            id: self.id,
            features: self.features.clone(),
            references: self.references.iter().map(|r| r.join(" ")).collect(),
            attributes: self.attributes.clone(),
        }
    }

    fn from_line(line: RecordLine, dim: usize) -> Result<Self> {
        if line.features.len() != dim {
            return Err(Error::Format(format!(
                "image {} has {} features, expected {dim}",
                line.id,
                line.features.len()
            )));
        }
        if line.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("image features"));
        }
        let references: Vec<Vec<String>> = line.references.iter().map(|r| tokenize(r)).collect();
        if references.is_empty() || references.iter().any(|r| r.is_empty()) {
            return Err(Error::Format(format!("image {} has an empty reference", line.id)));
        }
        Ok(ImageRecord {
            id: line.id,
            features: line.features,
            references,
            attributes: line.attributes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub seed: u64,
    pub config: SyntheticConfig,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// All references of the split, flattened.
    pub fn references(&self) -> impl Iterator<Item = &[String]> {
        self.records
            .iter()
            .flat_map(|r| r.references.iter().map(|v| v.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    seed: u64,
    config: SyntheticConfig,
}

impl DatasetSplits {
    pub fn all(&self) -> [&Dataset; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Vocabulary over the training references.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build(self.train.references(), self.train.config.min_count)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Meta {
            seed: self.train.seed,
            config: self.train.config.clone(),
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(&meta_path, e))?;
        for ds in self.all() {
            let path = dir.join(format!("{}.jsonl", ds.split.name()));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for rec in &ds.records {
                serde_json::to_writer(&mut w, &rec.to_line())?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        let load = |split: Split| -> Result<Dataset> {
            let path = dir.join(format!("{}.jsonl", split.name()));
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut records = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: RecordLine = serde_json::from_str(&line)?;
                records.push(ImageRecord::from_line(parsed, meta.config.feature_dim)?);
            }
            Ok(Dataset {
                split,
                seed: meta.seed,
                config: meta.config.clone(),
                records,
            })
        };
        Ok(DatasetSplits {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        })
    }
}
