use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "user_id,item_id,timestamp";

/// One raw interaction row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    /// Seconds since the epoch.
    pub timestamp: i64,
}

/// An interaction after item ids have been mapped to dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub item: usize,
    pub timestamp: i64,
}

/// Bidirectional map between item ids and dense indices. Index 0 is the
/// padding slot and has no id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary {
            ids: vec![String::new()],
            index: HashMap::new(),
        }
    }

    /// Number of real items (padding excluded).
    pub fn num_items(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    /// Real items in index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.ids
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, s)| (i, s.as_str()))
    }

    /// `item_id<TAB>index` per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, id) in self.iter() {
            let _ = writeln!(out, "{id}\t{i}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let line_no = Some(lineno + 1);
            let (id, idx) = line
                .split_once('\t')
                .ok_or_else(|| Error::input(line_no, "expected `item_id<TAB>index`"))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::input(line_no, format!("bad index {idx:?}")))?;
            if idx != vocab.ids.len() {
                return Err(Error::input(
                    line_no,
                    format!(
                        "indices must be dense and ascending, expected {}",
                        vocab.ids.len()
                    ),
                ));
            }
            if vocab.get(id).is_some() {
                return Err(Error::input(line_no, format!("duplicate item id {id:?}")));
            }
            vocab.get_or_insert(id);
        }
        Ok(vocab)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Per-user, time-ascending interaction histories over a shared vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub users: BTreeMap<String, Vec<Event>>,
    pub vocab: Vocabulary,
    /// Rows discarded at ingestion because of an illegal timestamp.
    pub dropped_rows: usize,
    /// Rows discarded because the item is absent from a fixed vocabulary.
    pub unknown_item_rows: usize,
}

impl InteractionLog {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.vocab.num_items()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    /// Builds a log from raw rows, keeping file order for equal timestamps.
    pub fn from_interactions(rows: impl IntoIterator<Item = Interaction>) -> Self {
        let mut log = InteractionLog {
            vocab: Vocabulary::new(),
            ..Default::default()
        };
        for row in rows {
            let item = log.vocab.get_or_insert(&row.item_id);
            log.users.entry(row.user_id).or_default().push(Event {
                item,
                timestamp: row.timestamp,
            });
        }
        log.sort_histories();
        log
    }

    fn sort_histories(&mut self) {
        for events in self.users.values_mut() {
            events.sort_by_key(|e| e.timestamp);
        }
    }

    /// Sub-log over `users` sharing this vocabulary.
    fn with_users(&self, users: BTreeMap<String, Vec<Event>>) -> Self {
        InteractionLog {
            users,
            vocab: self.vocab.clone(),
            dropped_rows: 0,
            unknown_item_rows: 0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (user, events) in &self.users {
            for e in events {
                let _ = writeln!(out, "{user},{},{}", self.vocab.id(e.item), e.timestamp);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses `user_id,item_id,timestamp` CSV text. Rows whose timestamp is not
/// a non-negative integer are dropped and counted; structurally malformed
/// rows are errors.
pub fn parse_csv(text: &str) -> Result<Vec<Interaction>> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l.trim_start_matches('\u{feff}').trim())
        .unwrap_or_default();
    if header != CSV_HEADER {
        return Err(Error::input(
            Some(1),
            format!("expected header `{CSV_HEADER}`, found `{header}`"),
        ));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [user, item, ts] = fields.as_slice() else {
            return Err(Error::input(
                Some(lineno + 1),
                format!("expected 3 fields, found {}", fields.len()),
            ));
        };
        if user.is_empty() || item.is_empty() {
            return Err(Error::input(Some(lineno + 1), "empty user or item id"));
        }
        rows.push(Interaction {
            user_id: user.to_string(),
            item_id: item.to_string(),
            // Sentinel for illegal timestamps, filtered below.
            timestamp: ts
                .trim()
                .parse::<i64>()
                .ok()
                .filter(|&t| t >= 0)
                .unwrap_or(-1),
        });
    }
    Ok(rows)
}

/// Reads an interaction CSV into a log with a fresh vocabulary.
pub fn ingest(path: &Path) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_csv(&text)?;
    let total = rows.len();
    let mut log = InteractionLog::from_interactions(rows.into_iter().filter(|r| r.timestamp >= 0));
    log.dropped_rows = total - log.num_interactions();
    Ok(log)
}

/// Reads an interaction CSV against an existing vocabulary; rows with
/// unknown items are dropped and counted.
pub fn ingest_with_vocab(path: &Path, vocab: &Vocabulary) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_csv(&text)?;
    let mut log = InteractionLog {
        vocab: vocab.clone(),
        ..Default::default()
    };
    for row in rows {
        if row.timestamp < 0 {
            log.dropped_rows += 1;
            continue;
        }
        let Some(item) = vocab.get(&row.item_id) else {
            log.unknown_item_rows += 1;
            continue;
        };
        log.users.entry(row.user_id).or_default().push(Event {
            item,
            timestamp: row.timestamp,
        });
    }
    log.sort_histories();
    Ok(log)
}

/// Repeatedly drops users and items with fewer than `min_count`
/// interactions until nothing changes, then reindexes items densely in
/// their previous order.
pub fn filter_min_count(log: &InteractionLog, min_count: usize) -> InteractionLog {
    let mut users = log.users.clone();
    loop {
        let mut item_counts = vec![0usize; log.vocab.num_items() + 1];
        for events in users.values() {
            for e in events {
                item_counts[e.item] += 1;
            }
        }
        let mut changed = false;
        for events in users.values_mut() {
            let before = events.len();
            events.retain(|e| item_counts[e.item] >= min_count);
            changed |= events.len() != before;
        }
        let before = users.len();
        users.retain(|_, events| events.len() >= min_count);
        changed |= users.len() != before;
        if !changed {
            break;
        }
    }

    let mut used = vec![false; log.vocab.num_items() + 1];
    for events in users.values() {
        for e in events {
            used[e.item] = true;
        }
    }
    let mut vocab = Vocabulary::new();
    let mut remap = vec![0usize; used.len()];
    for (old, id) in log.vocab.iter() {
        if used[old] {
            remap[old] = vocab.get_or_insert(id);
        }
    }
    for events in users.values_mut() {
        for e in events.iter_mut() {
            e.item = remap[e.item];
        }
    }
    InteractionLog {
        users,
        vocab,
        dropped_rows: log.dropped_rows,
        unknown_item_rows: log.unknown_item_rows,
    }
}

/// Seeded shuffle of users followed by a proportional three-way partition.
/// Validation and test each receive at least one user; all three share the
/// full log's vocabulary.
pub fn split_users(
    log: &InteractionLog,
    ratios: [u32; 3],
    seed: u64,
) -> Result<(InteractionLog, InteractionLog, InteractionLog)> {
    if ratios.contains(&0) {
        return Err(Error::config(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let n = log.num_users();
    if n < 3 {
        return Err(Error::input(
            None,
            format!("need at least 3 users to split, found {n}"),
        ));
    }
    let mut ids: Vec<&String> = log.users.keys().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total: u64 = ratios.iter().map(|&r| u64::from(r)).sum();
    let share = |r: u32| ((n as u64 * u64::from(r)) / total) as usize;
    let n_valid = share(ratios[1]).max(1);
    let n_test = share(ratios[2]).max(1).min(n - n_valid - 1);
    let n_train = n - n_valid - n_test;

    let take = |range: std::ops::Range<usize>| {
        let users = ids[range]
            .iter()
            .map(|&u| (u.clone(), log.users[u].clone()))
            .collect();
        log.with_users(users)
    };
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_valid),
        take(n_train + n_valid..n),
    ))
}
