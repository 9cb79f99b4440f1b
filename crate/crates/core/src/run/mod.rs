//! Run configuration and the shared data pipeline.

pub mod kv;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{filter_min_count, ingest, split_users, InteractionLog};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{SamplerKind, TrainConfig};
use kv::KvFile;

/// Everything one train/eval run needs. The text form written by
/// [`RunConfig::to_kv`] reproduces the run when parsed again.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Interaction CSV.
    pub data: PathBuf,
    /// Run directory.
    pub out: PathBuf,
    pub min_count: usize,
    /// Train/validation/test user shares.
    pub split: [u32; 3],
    pub model: ModelConfig,
    /// `train.seed` also seeds the user split.
    pub train: TrainConfig,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses `text`; relative paths resolve against `base`. Paths are not
    /// checked here, see [`RunConfig::validate`].
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let data = kv
            .take::<String>("data")?
            .map(|p| resolve(base, &p))
            .unwrap_or_default();
        let out = kv
            .take::<String>("out")?
            .map_or_else(|| base.join("run"), |p| resolve(base, &p));
        let min_count = kv.take_or("min_count", 5)?;
        let split = match kv.take_list::<u32>("split")? {
            None => [8, 1, 1],
            Some(v) => v
                .try_into()
                .map_err(|_| Error::config("field `split`: expected three ratios"))?,
        };
        let model = ModelConfig::from_kv(&mut kv)?;
        let d = TrainConfig::default();
        let sampler: String = kv.take_or("sampler", d.sampler.to_string())?;
        let train = TrainConfig {
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            negatives: kv.take_or("negatives", d.negatives)?,
            max_iterations: kv.take_or("max_iterations", d.max_iterations)?,
            eval_every: kv.take_or("eval_every", d.eval_every)?,
            patience: kv.take_or("patience", d.patience)?,
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            sampler: sampler
                .parse::<SamplerKind>()
                .map_err(|e| Error::config(format!("field `sampler`: {e}")))?,
            topn: kv.take_list("topn")?.unwrap_or(d.topn),
            early_stop_topn: kv.take_or("early_stop_topn", d.early_stop_topn)?,
            prefix_ratio: kv.take_or("prefix_ratio", d.prefix_ratio)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        kv.finish()?;
        Ok(RunConfig {
            data,
            out,
            min_count,
            split,
            model,
            train,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Field checks, including that the data file exists.
    pub fn validate(&self) -> Result<()> {
        if self.data.as_os_str().is_empty() {
            return Err(Error::config("field `data` is required"));
        }
        if !self.data.is_file() {
            return Err(Error::config(format!(
                "field `data`: {} does not exist",
                self.data.display()
            )));
        }
        if self.min_count == 0 {
            return Err(Error::config("field `min_count` must be at least 1"));
        }
        if self.split.contains(&0) {
            return Err(Error::config("field `split`: ratios must be positive"));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_kv(&self) -> String {
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "data = {}", self.data.display());
        let _ = writeln!(out, "out = {}", self.out.display());
        let _ = writeln!(out, "min_count = {}", self.min_count);
        let _ = writeln!(
            out,
            "split = {},{},{}",
            self.split[0], self.split[1], self.split[2]
        );
        out.push_str(&self.model.to_kv());
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "negatives = {}", t.negatives);
        let _ = writeln!(out, "max_iterations = {}", t.max_iterations);
        let _ = writeln!(out, "eval_every = {}", t.eval_every);
        let _ = writeln!(out, "patience = {}", t.patience);
        let _ = writeln!(out, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(out, "sampler = {}", t.sampler);
        let _ = writeln!(out, "topn = {}", list(&t.topn));
        let _ = writeln!(out, "early_stop_topn = {}", t.early_stop_topn);
        let _ = writeln!(out, "prefix_ratio = {}", t.prefix_ratio);
        let _ = writeln!(out, "seed = {}", t.seed);
        out
    }
}

/// The filtered log and its user split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub log: InteractionLog,
    pub train: InteractionLog,
    pub valid: InteractionLog,
    pub test: InteractionLog,
}

/// Ingest, filter to the min-count fixpoint, split users.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let raw = ingest(&config.data)?;
    prepare_log(&raw, config.min_count, config.split, config.train.seed)
}

pub fn prepare_log(
    raw: &InteractionLog,
    min_count: usize,
    split: [u32; 3],
    seed: u64,
) -> Result<Prepared> {
    let log = filter_min_count(raw, min_count);
    let (train, valid, test) = split_users(&log, split, seed)?;
    Ok(Prepared {
        log,
        train,
        valid,
        test,
    })
}
