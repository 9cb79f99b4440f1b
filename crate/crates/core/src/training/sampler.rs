use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::RngCore;

use crate::dataset::InteractionLog;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplerKind {
    #[default]
    Uniform,
    /// Proportional to training frequency plus one.
    Popularity,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplerKind::Uniform),
            "popularity" => Ok(SamplerKind::Popularity),
            _ => Err(Error::config(format!("unknown sampler {s:?}"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::Popularity => "popularity",
        })
    }
}

/// Draws distinct negative items from `1..=num_items`, never the target.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    num_items: usize,
    weights: Option<WeightedIndex<f64>>,
}

impl NegativeSampler {
    pub fn uniform(num_items: usize) -> Self {
        NegativeSampler {
            num_items,
            weights: None,
        }
    }

    pub fn new(kind: SamplerKind, log: &InteractionLog) -> Result<Self> {
        let num_items = log.num_items();
        match kind {
            SamplerKind::Uniform => Ok(Self::uniform(num_items)),
            SamplerKind::Popularity => {
                let mut counts = vec![1.0; num_items];
                for e in log.users.values().flatten() {
                    counts[e.item - 1] += 1.0;
                }
                let weights =
                    WeightedIndex::new(&counts).map_err(|e| Error::config(e.to_string()))?;
                Ok(NegativeSampler {
                    num_items,
                    weights: Some(weights),
                })
            }
        }
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// `count` distinct items other than `target`.
    pub fn sample(&self, target: usize, count: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        if count + 1 > self.num_items {
            return Err(Error::config(format!(
                "{count} negatives need at least {} items, vocabulary has {}",
                count + 1,
                self.num_items
            )));
        }
        match &self.weights {
            None => Ok(sample(rng, self.num_items - 1, count)
                .into_iter()
                .map(|j| if j + 1 >= target { j + 2 } else { j + 1 })
                .collect()),
            Some(w) => {
                let mut seen = BTreeSet::new();
                let mut out = Vec::with_capacity(count);
                while out.len() < count {
                    let item = w.sample(rng) + 1;
                    if item != target && seen.insert(item) {
                        out.push(item);
                    }
                }
                Ok(out)
            }
        }
    }
}
