use std::collections::BTreeSet;

use super::log::{Event, InteractionLog};
use crate::SECONDS_PER_DAY;

/// Timestamp stored in padded slots.
pub const PAD_TIMESTAMP: i64 = -1;

/// A left-padded window of at most `n` items with their timestamps.
///
/// Real items occupy the trailing slots in time order. The mask is the
/// authority on which slots are real; the forward pass never reads ids or
/// timestamps from masked-out slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedSequence {
    pub item_ids: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub mask: Vec<bool>,
}

impl FixedSequence {
    /// Keeps the most recent `n` events of `history`, left-padding the rest.
    pub fn from_history(history: &[Event], n: usize) -> Self {
        let tail = &history[history.len().saturating_sub(n)..];
        let pad = n - tail.len();
        let mut seq = FixedSequence {
            item_ids: vec![0; n],
            timestamps: vec![PAD_TIMESTAMP; n],
            mask: vec![false; n],
        };
        for (slot, e) in tail.iter().enumerate() {
            seq.item_ids[pad + slot] = e.item;
            seq.timestamps[pad + slot] = e.timestamp;
            seq.mask[pad + slot] = true;
        }
        seq
    }

    pub fn window(&self) -> usize {
        self.item_ids.len()
    }

    /// Count of real items.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slot indices of real items, ascending.
    pub fn real_positions(&self) -> Vec<usize> {
        (0..self.window()).filter(|&i| self.mask[i]).collect()
    }

    /// The real items in order, padding stripped.
    pub fn items(&self) -> Vec<usize> {
        self.real_positions()
            .into_iter()
            .map(|i| self.item_ids[i])
            .collect()
    }
}

/// Clamped pairwise day counts between the slots of one window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntervalMatrix {
    n: usize,
    threshold: u32,
    entries: Vec<u32>,
}

impl IntervalMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn get(&self, a: usize, b: usize) -> u32 {
        self.entries[a * self.n + b]
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        self.entries.chunks(self.n).map(<[u32]>::to_vec).collect()
    }
}

/// `min(p, floor(|t_a - t_b| / 86400))` between real slots; any pair that
/// touches a padded slot is set to `p`.
pub fn interval_matrix(seq: &FixedSequence, threshold: u32) -> IntervalMatrix {
    assert!(
        threshold >= 1,
        "interval threshold must be at least one day"
    );
    let n = seq.window();
    let mut entries = vec![threshold; n * n];
    for a in 0..n {
        if !seq.mask[a] {
            continue;
        }
        for b in 0..n {
            if !seq.mask[b] {
                continue;
            }
            let days =
                (seq.timestamps[a] - seq.timestamps[b]).unsigned_abs() / SECONDS_PER_DAY as u64;
            entries[a * n + b] = days.min(u64::from(threshold)) as u32;
        }
    }
    IntervalMatrix {
        n,
        threshold,
        entries,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub input: FixedSequence,
    pub target: usize,
}

/// One sample per position `k >= 1` of every history: the (up to) `n`
/// events before `k` predict event `k`.
pub fn build_training_samples(log: &InteractionLog, n: usize) -> Vec<TrainingSample> {
    assert!(n >= 1, "window length must be positive");
    let mut samples = Vec::with_capacity(log.num_interactions());
    for events in log.users.values() {
        for k in 1..events.len() {
            samples.push(TrainingSample {
                input: FixedSequence::from_history(&events[..k], n),
                target: events[k].item,
            });
        }
    }
    samples
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub input: FixedSequence,
    pub ground_truth: BTreeSet<usize>,
}

/// Splits one history at `ceil(ratio * len)`: the prefix (truncated to the
/// last `n`) is the input, the item set of the remainder the ground truth.
/// Returns `None` when the remainder is empty.
pub fn eval_split(history: &[Event], ratio: f64, n: usize) -> Option<EvalCase> {
    let cut = prefix_len(history.len(), ratio);
    if cut == 0 || cut >= history.len() {
        return None;
    }
    Some(EvalCase {
        input: FixedSequence::from_history(&history[..cut], n),
        ground_truth: history[cut..].iter().map(|e| e.item).collect(),
    })
}

fn prefix_len(len: usize, ratio: f64) -> usize {
    // Tolerance keeps e.g. 0.8 * 10 from rounding up to 9.
    ((len as f64 * ratio) - 1e-9).ceil().max(0.0) as usize
}

/// Evaluation cases for every user of `log`, plus the count of users
/// skipped for an empty remainder.
pub fn eval_cases(log: &InteractionLog, ratio: f64, n: usize) -> (Vec<(String, EvalCase)>, usize) {
    let mut cases = Vec::with_capacity(log.num_users());
    let mut skipped = 0;
    for (user, events) in &log.users {
        match eval_split(events, ratio, n) {
            Some(case) => cases.push((user.clone(), case)),
            None => skipped += 1,
        }
    }
    (cases, skipped)
}
