use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

fn hits(ranked: &[usize], truth: &BTreeSet<usize>) -> usize {
    ranked.iter().filter(|x| truth.contains(x)).count()
}

/// `|R ∩ G| / |G|`.
pub fn recall_at(ranked: &[usize], truth: &BTreeSet<usize>) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    hits(ranked, truth) as f64 / truth.len() as f64
}

/// 1 if any ground-truth item was retrieved.
pub fn hitrate_at(ranked: &[usize], truth: &BTreeSet<usize>) -> f64 {
    if hits(ranked, truth) > 0 {
        1.0
    } else {
        0.0
    }
}

/// Binary-gain DCG with `1/log2(rank + 1)` discounts, normalised by the
/// ideal DCG over the first `min(N, |G|)` ranks.
pub fn ndcg_at(ranked: &[usize], truth: &BTreeSet<usize>) -> f64 {
    let ideal_len = ranked.len().min(truth.len());
    if ideal_len == 0 {
        return 0.0;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .enumerate()
        .filter(|(_, x)| truth.contains(x))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=ideal_len).map(discount).sum();
    dcg / idcg
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub recall: f64,
    pub ndcg: f64,
    pub hit_rate: f64,
}

/// Per-N metrics averaged over evaluated users.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub at: BTreeMap<usize, Metrics>,
    pub users: usize,
    pub skipped: usize,
}

impl MetricsReport {
    pub fn get(&self, n: usize) -> Option<&Metrics> {
        self.at.get(&n)
    }

    /// `metric@N = value` lines; values print with full round-trip precision.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (n, m) in &self.at {
            let _ = writeln!(out, "recall@{n} = {}", m.recall);
            let _ = writeln!(out, "ndcg@{n} = {}", m.ndcg);
            let _ = writeln!(out, "hit_rate@{n} = {}", m.hit_rate);
        }
        let _ = writeln!(out, "users = {}", self.users);
        let _ = writeln!(out, "skipped = {}", self.skipped);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6}  {:>8}  {:>8}  {:>8}",
            "N", "Recall", "NDCG", "HitRate"
        );
        for (n, m) in &self.at {
            let _ = writeln!(
                out,
                "{n:>6}  {:>8.4}  {:>8.4}  {:>8.4}",
                m.recall, m.ndcg, m.hit_rate
            );
        }
        let _ = writeln!(
            out,
            "users evaluated: {}, skipped: {}",
            self.users, self.skipped
        );
        out
    }
}
