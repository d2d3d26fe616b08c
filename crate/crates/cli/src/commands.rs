use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use captune::corpus::{freq_histogram, generate_synthetic_dataset, DatasetSplits, Split, Vocabulary};
use captune::decode::{caption_lines, decode_records, read_captions, write_captions, DecodeMethod};
use captune::finetune::{sweep, write_sweep_csv, DecodeVariant, FinetuneMethod};
use captune::losses::{loss_surface, write_surface_csv, FrozenReference};
use captune::metrics::evaluate;
use captune::model::{Checkpoint, ModelDims, ModelParams};
use captune::rl::{mean_greedy_cider, sample_captions, train_ce, train_rl, write_ce_log, write_rl_log, CiderCorpusStats};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{Analysis, AnalyzeArgs, CliError, DecodeArg, DecodeArgs, EvalArgs, FinetuneArgs, MethodArg, SplitArg, Stage, TrainArgs, VariantArg};

type Result<T> = std::result::Result<T, CliError>;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const FROZEN_FILE: &str = "frozen.ckpt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    Ok(())
}

/// Write `path` through `f`, creating parent directories.
fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    create_parent(path)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(captune::Error::Missing(format!("{what} at {} ({hint})", path.display())).into())
    }
}

pub struct Context {
    cfg: RunConfig,
    hash: String,
    root: PathBuf,
}

struct Corpus {
    data: DatasetSplits,
    vocab: Vocabulary,
    stats: CiderCorpusStats,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Self {
        let hash = cfg.hash();
        let root = cfg.root();
        Self { cfg, hash, root }
    }

    fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    /// `<file>.meta.json` next to an output, carrying the config hash.
    fn meta(&self, path: &Path, command: &str, extra: Value) -> Result<()> {
        let mut m = json!({
            "command": command,
            "config_hash": self.hash,
            "dataset_seed": self.cfg.seed,
        });
        if let (Value::Object(dst), Value::Object(src)) = (&mut m, extra) {
            dst.extend(src);
        }
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        let meta_path = path.with_file_name(name);
        let text = serde_json::to_string_pretty(&m).map_err(captune::Error::from)?;
        write_with(&meta_path, |w| writeln!(w, "{text}"))
    }

    fn corpus(&self) -> Result<Corpus> {
        let dir = self.data_dir();
        require(&dir.join("meta.json"), "dataset", "run gen-data first")?;
        let data = DatasetSplits::load(&dir)?;
        let vocab = data.vocabulary()?;
        let stats = CiderCorpusStats::build(data.train.records.iter().map(|r| r.references.as_slice()));
        Ok(Corpus { data, vocab, stats })
    }

    fn load_checkpoint(&self, path: &Path, vocab: &Vocabulary, hint: &str) -> Result<Checkpoint> {
        require(path, "checkpoint", hint)?;
        Ok(Checkpoint::load_for(path, &vocab.hash())?)
    }

    fn save_checkpoint(&self, path: &Path, params: ModelParams, vocab: &Vocabulary) -> Result<Checkpoint> {
        create_parent(path)?;
        let ck = Checkpoint::new(params, vocab.hash(), self.hash.clone());
        ck.save(path)?;
        Ok(ck)
    }

    pub fn gen_data(&self) -> Result<()> {
        let data = generate_synthetic_dataset(&self.cfg.dataset, self.cfg.seed)?;
        let dir = self.data_dir();
        data.save(&dir)?;
        let vocab = data.vocabulary()?;
        self.meta(
            &dir,
            "gen-data",
            json!({
                "vocab_size": vocab.len(),
                "vocab_hash": vocab.hash(),
                "images": [data.train.len(), data.val.len(), data.test.len()],
            }),
        )?;
        println!(
            "wrote {} ({} / {} / {} images, vocabulary {})",
            dir.display(),
            data.train.len(),
            data.val.len(),
            data.test.len(),
            vocab.len()
        );
        Ok(())
    }

    pub fn train(&self, a: &TrainArgs) -> Result<()> {
        let c = self.corpus()?;
        match a.stage {
            Stage::Ce => self.train_ce(a, &c),
            Stage::Rl | Stage::Joint => self.train_rl(a, &c),
        }
    }

    fn train_ce(&self, a: &TrainArgs, c: &Corpus) -> Result<()> {
        let mut cfg = self.cfg.ce;
        cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
        cfg.lr = a.lr.unwrap_or(cfg.lr);
        cfg.seed = a.seed.unwrap_or(cfg.seed);
        let init = match &a.init {
            Some(p) => self.load_checkpoint(p, &c.vocab, "given by --init")?.params,
            None => {
                let dims = ModelDims {
                    vocab: c.vocab.len(),
                    hidden: self.cfg.model.hidden,
                    feature: c.data.train.feature_dim(),
                };
                ModelParams::init(dims, self.cfg.model.init_seed)?
            }
        };
        let (params, log) = train_ce(&init, &c.data.train, &c.vocab, &cfg)?;
        let out = a.out.clone().unwrap_or_else(|| self.root.join("ce"));
        let ck_path = out.join(CHECKPOINT_FILE);
        self.save_checkpoint(&ck_path, params, &c.vocab)?;
        let log_path = out.join("log.csv");
        write_with(&log_path, |w| write_ce_log(&log, w))?;
        let extra = json!({ "stage": "ce", "ce": cfg });
        self.meta(&ck_path, "train", extra.clone())?;
        self.meta(&log_path, "train", extra)?;
        if let Some(last) = log.last() {
            println!("ce epoch {}: mean loss {:.4}", last.epoch, last.mean_loss);
        }
        println!("wrote {}", ck_path.display());
        Ok(())
    }

    fn train_rl(&self, a: &TrainArgs, c: &Corpus) -> Result<()> {
        let mut cfg = self.cfg.rl;
        cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
        cfg.lr = a.lr.unwrap_or(cfg.lr);
        cfg.seed = a.seed.unwrap_or(cfg.seed);
        let (stage, default_out) = if a.stage == Stage::Joint {
            cfg.lambda = a.lambda.unwrap_or(self.cfg.joint.lambda);
            if !(0.0..=1.0).contains(&cfg.lambda) {
                return Err(CliError::Usage("invalid --lambda: must lie in [0, 1]".into()));
            }
            ("joint", self.root.join(format!("joint-{}", cfg.lambda)))
        } else {
            if a.lambda.is_some() {
                return Err(CliError::Usage("--lambda applies to --stage joint only".into()));
            }
            cfg.lambda = 1.0;
            ("rl", self.root.join("rl"))
        };
        let init_path = a.init.clone().unwrap_or_else(|| self.root.join("ce").join(CHECKPOINT_FILE));
        let init = self.load_checkpoint(&init_path, &c.vocab, "run train --stage ce first or pass --init")?;
        let max_len = cfg.scst.max_len;
        let before = mean_greedy_cider(&init.params, &c.data.train.records, &c.vocab, &c.stats, max_len)?;
        let (params, log) = train_rl(&init.params, &c.data.train, &c.vocab, &c.stats, &cfg)?;
        let after = mean_greedy_cider(&params, &c.data.train.records, &c.vocab, &c.stats, max_len)?;
        let out = a.out.clone().unwrap_or(default_out);
        let ck_path = out.join(CHECKPOINT_FILE);
        self.save_checkpoint(&ck_path, params, &c.vocab)?;
        let log_path = out.join("log.csv");
        write_with(&log_path, |w| write_rl_log(&log, w))?;
        let extra = json!({
            "stage": stage,
            "rl": cfg,
            "init": init_path,
            "train_greedy_cider_before": before,
            "train_greedy_cider_after": after,
        });
        self.meta(&ck_path, "train", extra.clone())?;
        self.meta(&log_path, "train", extra)?;
        println!("{stage}: train greedy CIDEr-D {before:.4} -> {after:.4}");
        println!("wrote {}", ck_path.display());
        Ok(())
    }

    pub fn finetune(&self, a: &FinetuneArgs) -> Result<()> {
        let c = self.corpus()?;
        let mut cfg = self.cfg.finetune.clone();
        if let Some(m) = a.method {
            cfg.method = match m {
                MethodArg::Sft => FinetuneMethod::Sft,
                MethodArg::Wft => FinetuneMethod::Wft,
                MethodArg::Fl => FinetuneMethod::Fl,
                MethodArg::Afl => FinetuneMethod::Afl,
                MethodArg::Tau => FinetuneMethod::Tau,
            };
        }
        if let Some(v) = a.decode_variant {
            cfg.decode_variant = match v {
                VariantArg::Plain => DecodeVariant::Plain,
                VariantArg::Bp => DecodeVariant::Bp,
            };
        }
        if let Some(lr) = a.lr {
            cfg.lr_grid = vec![lr];
        }
        if let Some(b) = a.beta_prime {
            cfg.beta_prime_grid = vec![b];
        }
        cfg.seed = a.seed.unwrap_or(cfg.seed);
        cfg.validate()?;
        let from = a.from.clone().unwrap_or_else(|| self.root.join("rl").join(CHECKPOINT_FILE));
        let ck = self.load_checkpoint(&from, &c.vocab, "run train --stage rl first or pass --from")?;
        let result = sweep(&ck, &c.data.train, &c.data.val, &c.vocab, &c.stats, &cfg)?;

        let bp = cfg.method == FinetuneMethod::Wft && cfg.decode_variant == DecodeVariant::Bp;
        let name = format!("{}{}", cfg.method.name(), if bp { "-bp" } else { "" });
        let out = a.out.clone().unwrap_or_else(|| self.root.join("finetune").join(&name));
        let extra = json!({
            "method": cfg.method.name(),
            "decode_variant": cfg.decode_variant,
            "from": from,
            "selected_lr": result.best.lr,
            "selected_beta_prime": result.best.beta_prime,
            "finetune": cfg,
        });
        let ck_path = out.join(CHECKPOINT_FILE);
        let tuned = self.save_checkpoint(&ck_path, result.best_output.params.clone(), &c.vocab)?;
        self.meta(&ck_path, "finetune", extra.clone())?;
        if let Some(frozen) = &result.best_output.frozen {
            let fz_path = out.join(FROZEN_FILE);
            let fz = self.save_checkpoint(&fz_path, frozen.params().clone(), &c.vocab)?;
            self.meta(&fz_path, "finetune", json!({ "beta_prime": frozen.beta(), "from": from }))?;
            if tuned.params.classifier_hash() == fz.params.classifier_hash() {
                eprintln!("note: selected point left the classifier unchanged");
            }
        }
        let sweep_path = out.join("sweep.csv");
        write_with(&sweep_path, |w| write_sweep_csv(&result.rows, w))?;
        self.meta(&sweep_path, "finetune", extra.clone())?;
        let val_path = out.join("val_metrics.csv");
        write_with(&val_path, |w| result.best_report.write_csv(&name, w))?;
        self.meta(&val_path, "finetune", extra)?;
        println!(
            "{name}: selected lr {} beta' {} (val R@1 {:.1})",
            result.best.lr,
            result.best.beta_prime.map(|b| b.to_string()).unwrap_or_else(|| "-".into()),
            result.best.r_at_1
        );
        println!("wrote {}", out.display());
        Ok(())
    }

    pub fn decode(&self, a: &DecodeArgs) -> Result<()> {
        let mut cfg = self.cfg.decode;
        if let Some(m) = a.method {
            cfg.method = match m {
                DecodeArg::Greedy => DecodeMethod::Greedy,
                DecodeArg::Beam => DecodeMethod::Beam,
                DecodeArg::Nucleus => DecodeMethod::Nucleus,
                DecodeArg::Bp => DecodeMethod::Bp,
            };
        }
        cfg.beam_size = a.beam_size.unwrap_or(cfg.beam_size);
        cfg.nucleus_p = a.nucleus_p.unwrap_or(cfg.nucleus_p);
        cfg.max_len = a.max_len.unwrap_or(cfg.max_len);
        cfg.beta_prime = a.beta_prime.unwrap_or(cfg.beta_prime);
        cfg.seed = a.seed.unwrap_or(cfg.seed);
        cfg.validate()?;
        if cfg.method == DecodeMethod::Bp && a.frozen.is_none() {
            return Err(captune::Error::Missing("--frozen reference for bp decoding".into()).into());
        }
        let c = self.corpus()?;
        let ck = self.load_checkpoint(&a.checkpoint, &c.vocab, "given by --checkpoint")?;
        let frozen = match (&a.frozen, cfg.method) {
            (Some(p), DecodeMethod::Bp) => {
                let f = self.load_checkpoint(p, &c.vocab, "given by --frozen")?;
                Some(FrozenReference::new(f.params, cfg.beta_prime)?)
            }
            _ => None,
        };
        let split = split_of(a.split);
        let records = &c.data.get(split).records;
        let caps = decode_records(&ck.params, frozen.as_ref(), records, &cfg)?;
        let lines = caption_lines(records, &caps, &c.vocab);
        let out = a.out.clone().unwrap_or_else(|| {
            let stem = a
                .checkpoint
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            self.root.join("captions").join(format!("{stem}-{}.jsonl", split.name()))
        });
        create_parent(&out)?;
        write_captions(&out, &lines)?;
        self.meta(
            &out,
            "decode",
            json!({ "checkpoint": a.checkpoint, "frozen": a.frozen, "split": split.name(), "decode": cfg }),
        )?;
        println!("wrote {} ({} captions)", out.display(), lines.len());
        Ok(())
    }

    pub fn eval(&self, a: &EvalArgs) -> Result<()> {
        let c = self.corpus()?;
        let split = split_of(a.split);
        let records = &c.data.get(split).records;
        let lines = read_captions(&a.captions)?;
        if lines.len() != records.len() {
            return Err(CliError::Usage(format!(
                "{} has {} captions but the {} split has {} images",
                a.captions.display(),
                lines.len(),
                split.name(),
                records.len()
            )));
        }
        let by_id: std::collections::HashMap<u64, &str> =
            lines.iter().map(|l| (l.image_id, l.caption.as_str())).collect();
        let words = records
            .iter()
            .map(|r| {
                by_id
                    .get(&r.id)
                    .map(|s| s.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                    .ok_or_else(|| CliError::Usage(format!("no caption for image {}", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = evaluate(&words, records, &c.vocab, &c.stats)?;
        let run_id = a.run_id.clone().unwrap_or_else(|| {
            a.captions
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        });
        let out = a
            .out
            .clone()
            .unwrap_or_else(|| self.root.join("eval").join(format!("{run_id}.csv")));
        write_with(&out, |w| report.write_csv(&run_id, w))?;
        self.meta(&out, "eval", json!({ "captions": a.captions, "split": split.name() }))?;
        println!("{report}");
        println!("wrote {}", out.display());
        Ok(())
    }

    pub fn analyze(&self, a: &AnalyzeArgs) -> Result<()> {
        let name = match a.what {
            Analysis::Histogram => "histogram",
            Analysis::LossSurface => "loss-surface",
            Analysis::SampleFreq => "sample-freq",
        };
        let out = a
            .out
            .clone()
            .unwrap_or_else(|| self.root.join("analysis").join(format!("{name}.csv")));
        let bins = a.bins.unwrap_or(self.cfg.analysis.bins);
        let extra = match a.what {
            Analysis::LossSurface => {
                if a.points == 0 {
                    return Err(CliError::Usage("invalid --points: must be at least 1".into()));
                }
                let n = a.points as f64 + 1.0;
                let grid: Vec<f64> = (1..=a.points).map(|i| i as f64 / n).collect();
                let rows = loss_surface(&grid, a.beta, a.beta_prime, a.gamma, a.alpha)?;
                write_with(&out, |w| write_surface_csv(&rows, w))?;
                json!({ "beta": a.beta, "beta_prime": a.beta_prime, "gamma": a.gamma, "alpha": a.alpha, "points": a.points })
            }
            Analysis::Histogram => {
                let c = self.corpus()?;
                let split = split_of(a.split);
                let captions: Vec<Vec<String>> = match &a.captions {
                    Some(p) => read_captions(p)?
                        .iter()
                        .map(|l| l.caption.split_whitespace().map(str::to_string).collect())
                        .collect(),
                    None => c.data.get(split).references().map(|r| r.to_vec()).collect(),
                };
                let h = freq_histogram(&captions, &c.vocab, bins)?;
                write_with(&out, |w| h.write_csv(w))?;
                json!({ "captions": a.captions, "split": split.name(), "bins": bins })
            }
            Analysis::SampleFreq => {
                let ck_path = a
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| captune::Error::Missing("--checkpoint for sample-freq".into()))?;
                let c = self.corpus()?;
                let split = split_of(a.split);
                let ck = self.load_checkpoint(ck_path, &c.vocab, "given by --checkpoint")?;
                let an = &self.cfg.analysis;
                let sampled = sample_captions(
                    &ck.params,
                    &c.data.get(split).records,
                    an.samples_per_image,
                    self.cfg.rl.scst.beta,
                    self.cfg.rl.scst.max_len,
                    an.seed,
                )?;
                let words: Vec<Vec<String>> = sampled.iter().map(|s| c.vocab.decode(s)).collect();
                let h = freq_histogram(&words, &c.vocab, bins)?;
                write_with(&out, |w| h.write_csv(w))?;
                let (head, _) = h.head(10);
                json!({
                    "checkpoint": ck_path,
                    "split": split.name(),
                    "bins": bins,
                    "samples_per_image": an.samples_per_image,
                    "seed": an.seed,
                    "mass_bins_1_10": head.iter().sum::<f64>(),
                })
            }
        };
        self.meta(&out, "analyze", extra)?;
        println!("wrote {}", out.display());
        Ok(())
    }
}
