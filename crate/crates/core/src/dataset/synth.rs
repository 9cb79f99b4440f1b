//! Planted-interest generator.
//!
//! Items are partitioned into clusters, each with its own revisit period in
//! days. A user follows a few clusters; within one cluster the user's events
//! are spaced by that cluster's period (plus jitter) and mostly walk to the
//! next item of the cluster, so both the item order and the time gaps carry
//! signal about which cluster comes next.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::log::{Interaction, InteractionLog};
use crate::error::{Error, Result};
use crate::run::kv::KvFile;
use crate::SECONDS_PER_DAY;

const BASE_EPOCH: i64 = 1_500_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub clusters: usize,
    pub items_per_cluster: usize,
    /// One period per cluster.
    pub period_days: Vec<f64>,
    /// Mean events per user.
    pub events_per_user: usize,
    /// Per-user event count varies uniformly by up to this much.
    pub events_spread: usize,
    /// Uniform jitter in `[-j, j]` days, capped at a quarter period.
    pub jitter_days: f64,
    pub min_clusters_per_user: usize,
    pub max_clusters_per_user: usize,
    /// Probability that the next item in a cluster is the successor of the
    /// previous one; otherwise it is drawn uniformly from the cluster.
    pub walk_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 300,
            clusters: 4,
            items_per_cluster: 50,
            period_days: vec![3.0, 14.0, 60.0, 180.0],
            events_per_user: 40,
            events_spread: 5,
            jitter_days: 1.0,
            min_clusters_per_user: 2,
            max_clusters_per_user: 3,
            walk_prob: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::config("clusters must be at least 1"));
        }
        if self.period_days.len() != self.clusters {
            return Err(Error::config(format!(
                "period_days lists {} periods for {} clusters",
                self.period_days.len(),
                self.clusters
            )));
        }
        if self
            .period_days
            .iter()
            .any(|&p| !(p > 0.0 && p.is_finite()))
        {
            return Err(Error::config("period_days must be positive"));
        }
        if self.users == 0 || self.items_per_cluster == 0 || self.events_per_user == 0 {
            return Err(Error::config(
                "users, items_per_cluster and events_per_user must be positive",
            ));
        }
        if self.events_spread >= self.events_per_user {
            return Err(Error::config(
                "events_spread must be smaller than events_per_user",
            ));
        }
        if self.min_clusters_per_user == 0
            || self.min_clusters_per_user > self.max_clusters_per_user
        {
            return Err(Error::config(
                "need 1 <= min_clusters_per_user <= max_clusters_per_user",
            ));
        }
        if !(0.0..=1.0).contains(&self.walk_prob) || self.jitter_days < 0.0 {
            return Err(Error::config(
                "walk_prob must be in [0,1] and jitter_days non-negative",
            ));
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let d = SynthConfig::default();
        let clusters = kv.take_or("clusters", d.clusters)?;
        let cfg = SynthConfig {
            users: kv.take_or("users", d.users)?,
            clusters,
            items_per_cluster: kv.take_or("items_per_cluster", d.items_per_cluster)?,
            period_days: kv.take_list("period_days")?.unwrap_or(d.period_days),
            events_per_user: kv.take_or("events_per_user", d.events_per_user)?,
            events_spread: kv.take_or("events_spread", d.events_spread)?,
            jitter_days: kv.take_or("jitter_days", d.jitter_days)?,
            min_clusters_per_user: kv.take_or("min_clusters_per_user", d.min_clusters_per_user)?,
            max_clusters_per_user: kv.take_or("max_clusters_per_user", d.max_clusters_per_user)?,
            walk_prob: kv.take_or("walk_prob", d.walk_prob)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generated rows together with their planted labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// Sorted by user, then time.
    pub interactions: Vec<Interaction>,
    pub item_cluster: BTreeMap<String, usize>,
    pub user_clusters: BTreeMap<String, Vec<usize>>,
}

impl SyntheticData {
    pub fn to_log(&self) -> InteractionLog {
        InteractionLog::from_interactions(self.interactions.iter().cloned())
    }

    /// `item<TAB>id<TAB>cluster` and `user<TAB>id<TAB>c1,c2,..` lines.
    pub fn labels_tsv(&self) -> String {
        let mut out = String::new();
        for (item, c) in &self.item_cluster {
            let _ = writeln!(out, "item\t{item}\t{c}");
        }
        for (user, cs) in &self.user_clusters {
            let list: Vec<String> = cs.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "user\t{user}\t{}", list.join(","));
        }
        out
    }
}

pub fn item_name(cluster: usize, index: usize) -> String {
    format!("c{cluster}_i{index:03}")
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut item_cluster = BTreeMap::new();
    for c in 0..config.clusters {
        for i in 0..config.items_per_cluster {
            item_cluster.insert(item_name(c, i), c);
        }
    }

    let mut interactions = Vec::new();
    let mut user_clusters = BTreeMap::new();
    let width = config.users.to_string().len();
    for u in 0..config.users {
        let user = format!("u{u:0width$}");
        let hi = config.max_clusters_per_user.min(config.clusters);
        let lo = config.min_clusters_per_user.min(hi);
        let m = rng.gen_range(lo..=hi);
        let mut chosen = sample(&mut rng, config.clusters, m).into_vec();
        chosen.sort_unstable();

        let spread = config.events_spread as i64;
        let total = (config.events_per_user as i64 + rng.gen_range(-spread..=spread)).max(m as i64)
            as usize;
        let counts: Vec<usize> = (0..m)
            .map(|i| total / m + usize::from(i < total % m))
            .collect();
        let spans: Vec<f64> = chosen
            .iter()
            .zip(&counts)
            .map(|(&c, &k)| config.period_days[c] * k as f64)
            .collect();
        let horizon = spans.iter().copied().fold(0.0, f64::max);
        let user_start = BASE_EPOCH + rng.gen_range(0..365 * SECONDS_PER_DAY);

        let mut events: Vec<(i64, String)> = Vec::with_capacity(total);
        for ((&c, &k), &span) in chosen.iter().zip(&counts).zip(&spans) {
            let period = config.period_days[c];
            let jitter = config.jitter_days.min(period / 4.0);
            let offset = rng.gen::<f64>() * (horizon - span + period);
            let mut cursor = rng.gen_range(0..config.items_per_cluster);
            for j in 0..k {
                let noise = if jitter > 0.0 {
                    rng.gen_range(-jitter..=jitter)
                } else {
                    0.0
                };
                let day = offset + j as f64 * period + noise;
                let ts = user_start + (day.max(0.0) * SECONDS_PER_DAY as f64).round() as i64;
                if j > 0 {
                    cursor = if rng.gen::<f64>() < config.walk_prob {
                        (cursor + 1) % config.items_per_cluster
                    } else {
                        rng.gen_range(0..config.items_per_cluster)
                    };
                }
                events.push((ts, item_name(c, cursor)));
            }
        }
        events.sort();
        interactions.extend(events.into_iter().map(|(timestamp, item_id)| Interaction {
            user_id: user.clone(),
            item_id,
            timestamp,
        }));
        user_clusters.insert(user, chosen);
    }
    Ok(SyntheticData {
        interactions,
        item_cluster,
        user_clusters,
    })
}
