//! Parameters and the forward pass from a fixed window to `K` interest
//! vectors.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    embed_items, embed_packed, extract_interests, extract_packed, forward, forward_batch,
    forward_eval, interactivity_encode, interactivity_packed, periodicity_encode,
    periodicity_packed, BatchInterests, InterestMatrix, InterestVars, Mode, Packing,
};
pub use params::{AttentionParams, LayerParams, ParamVars, ParameterSet};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::run::kv::{parse_bool, KvFile};

/// Component switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// Time-interval representation forced to zero.
    pub disable_periodicity: bool,
    /// Graph layers skipped; extraction runs on item + interval embeddings.
    pub disable_interactivity: bool,
    /// Item nodes only see their chain neighbours; no hub node.
    pub disable_central_node: bool,
}

impl Ablation {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_periodicity {
            parts.push("P");
        }
        if self.disable_interactivity {
            parts.push("I");
        }
        if self.disable_central_node {
            parts.push("central_node");
        }
        if parts.is_empty() {
            "PIMI".to_owned()
        } else {
            format!("PIMI-{}", parts.join("-"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Window length `n`.
    pub max_len: usize,
    /// Number of interest vectors `K`.
    pub interests: usize,
    /// Graph update rounds `L`.
    pub layers: usize,
    /// Interval clamp `p`, in days.
    pub interval_threshold: u32,
    pub heads: usize,
    pub dropout: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            max_len: 20,
            interests: 4,
            layers: 3,
            interval_threshold: 64,
            heads: 2,
            dropout: 0.2,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("max_len", self.max_len),
            ("interests", self.interests),
            ("heads", self.heads),
            ("interval_threshold", self.interval_threshold as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("field `{name}` must be at least 1")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "field `heads`: dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "field `dropout`: {} is outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Pulls the model keys out of `kv`, defaulting missing ones.
    pub fn from_kv(kv: &mut KvFile) -> Result<Self> {
        let d = ModelConfig::default();
        let flag = |kv: &mut KvFile, key: &str| -> Result<bool> {
            match kv.take::<String>(key)? {
                None => Ok(false),
                Some(v) => parse_bool(&v).ok_or_else(|| {
                    Error::config(format!("field `{key}`: expected true/false, got {v:?}"))
                }),
            }
        };
        let cfg = ModelConfig {
            dim: kv.take_or("dim", d.dim)?,
            max_len: kv.take_or("max_len", d.max_len)?,
            interests: kv.take_or("interests", d.interests)?,
            layers: kv.take_or("layers", d.layers)?,
            interval_threshold: kv.take_or("interval_threshold", d.interval_threshold)?,
            heads: kv.take_or("heads", d.heads)?,
            dropout: kv.take_or("dropout", d.dropout)?,
            ablation: Ablation {
                disable_periodicity: flag(kv, "disable_periodicity")?,
                disable_interactivity: flag(kv, "disable_interactivity")?,
                disable_central_node: flag(kv, "disable_central_node")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dim = {}", self.dim);
        let _ = writeln!(out, "max_len = {}", self.max_len);
        let _ = writeln!(out, "interests = {}", self.interests);
        let _ = writeln!(out, "layers = {}", self.layers);
        let _ = writeln!(out, "interval_threshold = {}", self.interval_threshold);
        let _ = writeln!(out, "heads = {}", self.heads);
        let _ = writeln!(out, "dropout = {}", self.dropout);
        let _ = writeln!(
            out,
            "disable_periodicity = {}",
            self.ablation.disable_periodicity
        );
        let _ = writeln!(
            out,
            "disable_interactivity = {}",
            self.ablation.disable_interactivity
        );
        let _ = writeln!(
            out,
            "disable_central_node = {}",
            self.ablation.disable_central_node
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            dim: 32,
            dropout: 0.15,
            ablation: Ablation {
                disable_central_node: true,
                ..Ablation::default()
            },
            ..ModelConfig::default()
        };
        let mut kv = KvFile::parse(&cfg.to_kv()).unwrap();
        assert_eq!(ModelConfig::from_kv(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = ModelConfig {
            dim: 10,
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn variant_labels() {
        assert_eq!(Ablation::default().label(), "PIMI");
        let p = Ablation {
            disable_periodicity: true,
            ..Ablation::default()
        };
        assert_eq!(p.label(), "PIMI-P");
    }
}
