//! Exact per-interest top-N search, value-function aggregation and
//! evaluation under the prefix/remainder protocol.

mod metrics;

pub use metrics::{hitrate_at, ndcg_at, recall_at, Metrics, MetricsReport};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::dataset::{eval_cases, InteractionLog, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{forward_eval, InterestMatrix, ModelConfig, ParameterSet};
use crate::tensor::{dot, Tensor};

/// Per-interest top-N lists of `(item index, inner product)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub lists: Vec<Vec<(usize, f64)>>,
}

impl CandidateSet {
    /// Distinct items across all lists, ascending.
    pub fn pool(&self) -> BTreeSet<usize> {
        self.lists.iter().flatten().map(|&(i, _)| i).collect()
    }
}

/// Score descending, then index ascending.
fn by_score(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `n` best of `scored` under [`by_score`], in order.
fn top_n(mut scored: Vec<(usize, f64)>, n: usize) -> Vec<(usize, f64)> {
    if n < scored.len() {
        scored.select_nth_unstable_by(n, by_score);
        scored.truncate(n);
    }
    scored.sort_unstable_by(by_score);
    scored
}

fn check_table(interests: &InterestMatrix, item_table: &Tensor, n: usize) -> Result<usize> {
    if item_table.shape().len() != 2 || item_table.cols() != interests.vectors.cols() {
        return Err(Error::Shape {
            op: "retrieval",
            lhs: interests.vectors.shape().to_vec(),
            rhs: item_table.shape().to_vec(),
        });
    }
    let num_items = item_table.rows() - 1;
    if n == 0 || n > num_items {
        return Err(Error::config(format!(
            "top-N of {n} is outside 1..={num_items} items"
        )));
    }
    Ok(num_items)
}

/// Full-scan top-`n` items for each interest vector. Row 0 of
/// `item_table` is padding and never returned.
pub fn retrieve_candidates(
    interests: &InterestMatrix,
    item_table: &Tensor,
    n: usize,
) -> Result<CandidateSet> {
    let num_items = check_table(interests, item_table, n)?;
    let lists = (0..interests.interests())
        .map(|k| {
            let m = interests.vector(k);
            let scored = (1..=num_items)
                .map(|i| (i, dot(item_table.row(i), m)))
                .collect();
            top_n(scored, n)
        })
        .collect();
    Ok(CandidateSet { lists })
}

/// `max_k dot(e_x, m_k)`.
pub fn value_score(interests: &InterestMatrix, item: &[f64]) -> f64 {
    (0..interests.interests())
        .map(|k| dot(item, interests.vector(k)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The ranked list chosen by aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    /// `(item, max_k score)`, descending.
    pub ranked: Vec<(usize, f64)>,
    /// How many of `ranked` came from outside the candidate pool.
    pub padded: usize,
}

impl Aggregated {
    pub fn items(&self) -> Vec<usize> {
        self.ranked.iter().map(|&(i, _)| i).collect()
    }
}

/// Maximises `Q(R) = Σ_{x∈R} max_k dot(e_x, m_k)` over `n`-subsets of the
/// candidate pool.
///
/// `Q` is a sum of per-item terms, so the maximiser is simply the `n` pool
/// items with the largest `max_k` score. A pool smaller than `n` is topped
/// up from the best remaining items of the whole table.
pub fn aggregate(
    candidates: &CandidateSet,
    interests: &InterestMatrix,
    item_table: &Tensor,
    n: usize,
) -> Result<Aggregated> {
    let num_items = check_table(interests, item_table, n)?;
    let pool = candidates.pool();
    let scored: Vec<(usize, f64)> = pool
        .iter()
        .map(|&i| (i, value_score(interests, item_table.row(i))))
        .collect();
    let mut ranked = top_n(scored, n);
    let mut padded = 0;
    if ranked.len() < n {
        let rest = (1..=num_items)
            .filter(|i| !pool.contains(i))
            .map(|i| (i, value_score(interests, item_table.row(i))))
            .collect();
        let fill = top_n(rest, n - ranked.len());
        padded = fill.len();
        ranked.extend(fill);
        ranked.sort_unstable_by(by_score);
    }
    Ok(Aggregated { ranked, padded })
}

/// Everything computed for one evaluated user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserResult {
    pub user: String,
    pub ground_truth: BTreeSet<usize>,
    /// Aggregated list per N.
    pub ranked: BTreeMap<usize, Vec<usize>>,
    /// Per-interest candidates at the largest N.
    pub candidates: CandidateSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub users: Vec<UserResult>,
}

/// Runs the prefix/remainder protocol for every user of `log` and averages
/// the metrics per N over users.
pub fn evaluate(
    params: &ParameterSet,
    config: &ModelConfig,
    log: &InteractionLog,
    topn: &[usize],
    prefix_ratio: f64,
) -> Result<Evaluation> {
    if topn.is_empty() {
        return Err(Error::config("empty top-N list"));
    }
    let ns: BTreeSet<usize> = topn.iter().copied().collect();
    let n_max = *ns.last().unwrap();
    let (cases, skipped) = eval_cases(log, prefix_ratio, config.max_len);
    if cases.is_empty() {
        return Err(Error::input(
            None,
            "no user has a non-empty evaluation remainder",
        ));
    }
    let mut sums: BTreeMap<usize, Metrics> = ns.iter().map(|&n| (n, Metrics::default())).collect();
    let mut users = Vec::with_capacity(cases.len());
    for (user, case) in cases {
        let interests = forward_eval(params, config, &case.input)?;
        let candidates = retrieve_candidates(&interests, &params.item_embeddings, n_max)?;
        let mut ranked = BTreeMap::new();
        for &n in &ns {
            let per_n = CandidateSet {
                lists: candidates.lists.iter().map(|l| l[..n].to_vec()).collect(),
            };
            let r = aggregate(&per_n, &interests, &params.item_embeddings, n)?.items();
            let acc = sums.get_mut(&n).unwrap();
            acc.recall += recall_at(&r, &case.ground_truth);
            acc.ndcg += ndcg_at(&r, &case.ground_truth);
            acc.hit_rate += hitrate_at(&r, &case.ground_truth);
            ranked.insert(n, r);
        }
        users.push(UserResult {
            user,
            ground_truth: case.ground_truth,
            ranked,
            candidates,
        });
    }
    let count = users.len() as f64;
    let at = sums
        .into_iter()
        .map(|(n, m)| {
            let mean = Metrics {
                recall: m.recall / count,
                ndcg: m.ndcg / count,
                hit_rate: m.hit_rate / count,
            };
            (n, mean)
        })
        .collect();
    Ok(Evaluation {
        report: MetricsReport {
            at,
            users: users.len(),
            skipped,
        },
        users,
    })
}

/// One tab-separated line per user:
/// `user  gt=a,b  R@20=..  R@50=..  C0=..  C1=..` with external item ids.
pub fn user_dump(results: &[UserResult], vocab: &Vocabulary) -> String {
    let names = |items: &mut dyn Iterator<Item = usize>| -> String {
        items
            .map(|i| vocab.id(i).to_owned())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = String::new();
    for r in results {
        let _ = write!(
            out,
            "{}\tgt={}",
            r.user,
            names(&mut r.ground_truth.iter().copied())
        );
        for (n, list) in &r.ranked {
            let _ = write!(out, "\tR@{n}={}", names(&mut list.iter().copied()));
        }
        for (k, list) in r.candidates.lists.iter().enumerate() {
            let _ = write!(out, "\tC{k}={}", names(&mut list.iter().map(|&(i, _)| i)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interests(rows: &[Vec<f64>]) -> InterestMatrix {
        let vectors = Tensor::from_rows(rows).unwrap();
        let attention = Tensor::zeros(&[rows.len(), 1]);
        InterestMatrix { vectors, attention }
    }

    fn table(rows: &[Vec<f64>]) -> Tensor {
        let mut all = vec![vec![0.0; rows[0].len()]];
        all.extend_from_slice(rows);
        Tensor::from_rows(&all).unwrap()
    }

    #[test]
    fn orthonormal_lookup() {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..8).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let t = table(&rows);
        let m = interests(&[rows[6].clone()]);
        let c = retrieve_candidates(&m, &t, 1).unwrap();
        assert_eq!(c.lists[0][0].0, 7);
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let t = table(&[vec![1.0], vec![1.0], vec![1.0]]);
        let m = interests(&[vec![1.0]]);
        let c = retrieve_candidates(&m, &t, 2).unwrap();
        assert_eq!(c.lists[0].iter().map(|x| x.0).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn n_above_vocabulary_is_config_error() {
        let t = table(&[vec![1.0], vec![2.0]]);
        let m = interests(&[vec![1.0]]);
        assert!(matches!(
            retrieve_candidates(&m, &t, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_candidate_appears_once_with_max_score() {
        let t = table(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.0, 2.0]]);
        let m = interests(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
        let c = retrieve_candidates(&m, &t, 2).unwrap();
        let r = aggregate(&c, &m, &t, 2).unwrap();
        assert_eq!(r.ranked, vec![(3, 6.0), (1, 3.0)]);
        assert_eq!(r.padded, 0);
    }

    #[test]
    fn small_pool_is_padded() {
        let t = table(&[vec![3.0], vec![2.0], vec![1.0]]);
        let m = interests(&[vec![1.0]]);
        let c = CandidateSet {
            lists: vec![vec![(2, 2.0)]],
        };
        let r = aggregate(&c, &m, &t, 2).unwrap();
        assert_eq!(r.items(), [1, 2]);
        assert_eq!(r.padded, 1);
    }
}
