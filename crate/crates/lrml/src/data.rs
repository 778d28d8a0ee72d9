//! Interaction-log ingestion, implicit binarization, leave-one-out splitting,
//! and evaluation-negative sampling.
//!
//! The pipeline is: [`load_events`] parses a plain-text rating log into
//! [`RawEvent`]s, [`build_dataset`] binarizes and indexes them into a
//! [`Dataset`], and [`leave_one_out_split`] holds out one dev and one test
//! item per user plus a fixed set of evaluation negatives.
//!
//! Everything here is a pure function of its inputs and seed; `Dataset` and
//! [`SplitDataset`] are immutable once built and safe to share across threads.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::snapshot::{ReadExt, WriteExt};

/// One line of a raw interaction log. Ratings and timestamps are kept only
/// as side channels for the qualitative analyses; training sees binary
/// interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub user_key: String,
    pub item_key: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

/// Input log format: `user<sep>item[<sep>rating[<sep>timestamp]]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// Tab-separated fields.
    UirtTab,
    /// `::`-separated fields (MovieLens `.dat` style).
    UirtDoubleColon,
}

impl EventFormat {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            EventFormat::UirtTab => line.split('\t').collect(),
            EventFormat::UirtDoubleColon => line.split("::").collect(),
        }
    }
}

impl std::str::FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab" | "uirt-tab" => Ok(EventFormat::UirtTab),
            "doublecolon" | "uirt-doublecolon" => Ok(EventFormat::UirtDoubleColon),
            other => Err(Error::InvalidConfig(format!(
                "unknown event format {other:?}, expected \"tab\" or \"doublecolon\""
            ))),
        }
    }
}

/// Parse a rating log into events, in file order.
///
/// Each line must carry at least `user` and `item`; `rating` and `timestamp`
/// are parsed when present. A malformed line is an error naming the line
/// number, and an empty file is an error.
pub fn load_events(path: &Path, format: EventFormat) -> Result<Vec<RawEvent>> {
    let path_str = path.display().to_string();
    let file = File::open(path).map_err(|source| Error::FileOpen {
        path: path_str.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut events = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let event = parse_line(&line, format).map_err(|reason| Error::MalformedLine {
            path: path_str.clone(),
            line: line_no,
            reason,
        })?;
        events.push(event);
    }

    if events.is_empty() {
        return Err(Error::EmptyEventFile { path: path_str });
    }
    Ok(events)
}

fn parse_line(line: &str, format: EventFormat) -> std::result::Result<RawEvent, String> {
    let fields = format.split(line.trim_end_matches(['\r', '\n']));
    if fields.len() < 2 {
        return Err(format!("expected at least 2 fields, got {}", fields.len()));
    }
    let user_key = fields[0].to_string();
    let item_key = fields[1].to_string();
    if user_key.is_empty() || item_key.is_empty() {
        return Err("empty user or item key".to_string());
    }
    let rating = match fields.get(2) {
        Some(f) if !f.is_empty() => Some(
            f.parse::<f64>()
                .map_err(|e| format!("bad rating {f:?}: {e}"))?,
        ),
        _ => None,
    };
    let timestamp = match fields.get(3) {
        Some(f) if !f.is_empty() => Some(
            f.trim()
                .parse::<i64>()
                .map_err(|e| format!("bad timestamp {f:?}: {e}"))?,
        ),
        _ => None,
    };
    Ok(RawEvent {
        user_key,
        item_key,
        rating,
        timestamp,
    })
}

/// Indexed implicit-feedback dataset. `interactions[u]` is the sorted list of
/// item indices user `u` interacted with (the nonzero entries of the
/// interaction matrix). Side channels are aligned with `interactions` and
/// present only when every ingested event carried the field.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_items: usize,
    interactions: Vec<Vec<u32>>,
    ratings: Option<Vec<Vec<f64>>>,
    timestamps: Option<Vec<Vec<i64>>>,
}

impl Dataset {
    /// Build directly from per-user item lists; test helper for synthetic
    /// instances. Lists are deduplicated and sorted.
    pub fn from_interactions(num_items: usize, interactions: Vec<Vec<u32>>) -> Result<Self> {
        let mut cleaned = Vec::with_capacity(interactions.len());
        for (u, mut items) in interactions.into_iter().enumerate() {
            items.sort_unstable();
            items.dedup();
            if items.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "user {u} has no interactions"
                )));
            }
            if let Some(&max) = items.last() {
                if max as usize >= num_items {
                    return Err(Error::IndexOutOfRange(format!(
                        "item {max} out of range for {num_items} items"
                    )));
                }
            }
            cleaned.push(items);
        }
        if cleaned.is_empty() {
            return Err(Error::EmptyAfterFiltering);
        }
        Ok(Dataset {
            num_items,
            interactions: cleaned,
            ratings: None,
            timestamps: None,
        })
    }

    pub fn num_users(&self) -> usize {
        self.interactions.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_interactions(&self) -> usize {
        self.interactions.iter().map(Vec::len).sum()
    }

    /// Fraction of the user-item matrix that is observed.
    pub fn density(&self) -> f64 {
        self.num_interactions() as f64 / (self.num_users() as f64 * self.num_items() as f64)
    }

    /// Sorted item indices for one user.
    pub fn user_items(&self, user: usize) -> &[u32] {
        &self.interactions[user]
    }

    pub fn ratings(&self, user: usize) -> Option<&[f64]> {
        self.ratings.as_ref().map(|r| r[user].as_slice())
    }

    pub fn timestamps(&self, user: usize) -> Option<&[i64]> {
        self.timestamps.as_ref().map(|t| t[user].as_slice())
    }

    pub fn has_ratings(&self) -> bool {
        self.ratings.is_some()
    }

    pub fn has_timestamps(&self) -> bool {
        self.timestamps.is_some()
    }

    pub fn interacted(&self, user: usize, item: u32) -> bool {
        self.interactions[user].binary_search(&item).is_ok()
    }

    /// All (user, item) pairs in user-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.interactions
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
    }

    /// Re-serialize as raw events in an order that replays the original
    /// first-appearance index assignment, so `build_dataset` on the output
    /// reproduces this dataset exactly.
    pub fn to_events(&self) -> Vec<RawEvent> {
        // Pairs are emitted so that user u's first event precedes user u+1's
        // and item i's first event precedes item i+1's. Such an order always
        // exists for datasets produced by first-appearance indexing: whenever
        // neither the next user nor the next item can be introduced against
        // an already-introduced partner, the pair (next_user, next_item)
        // itself must be present.
        let num_users = self.num_users();
        let mut remaining: Vec<Vec<u32>> = self.interactions.clone();
        let mut emitted = Vec::with_capacity(self.num_interactions());
        let mut intro_u = 0usize; // users < intro_u are introduced
        let mut intro_i = 0u32; // items < intro_i are introduced
        let mut left = self.num_interactions();

        while left > 0 {
            // Drain every pair whose endpoints are both introduced.
            for (u, items) in remaining.iter_mut().enumerate().take(intro_u) {
                let mut k = 0;
                while k < items.len() {
                    if items[k] < intro_i {
                        emitted.push((u as u32, items.remove(k)));
                        left -= 1;
                    } else {
                        k += 1;
                    }
                }
            }
            if left == 0 {
                break;
            }
            if intro_u < num_users && remaining[intro_u].first().is_some_and(|&i| i < intro_i) {
                intro_u += 1;
            } else if (0..intro_u).any(|u| remaining[u].first() == Some(&intro_i)) {
                intro_i += 1;
            } else {
                // Both frontiers stuck: (intro_u, intro_i) must be a pair.
                debug_assert!(
                    intro_u < num_users && remaining[intro_u].first() == Some(&intro_i),
                    "dataset not produced by first-appearance indexing"
                );
                intro_u += 1;
                intro_i += 1;
            }
        }

        emitted
            .into_iter()
            .map(|(u, i)| {
                let pos = self.interactions[u as usize]
                    .binary_search(&i)
                    .expect("emitted pair exists");
                RawEvent {
                    user_key: u.to_string(),
                    item_key: i.to_string(),
                    rating: self.ratings.as_ref().map(|r| r[u as usize][pos]),
                    timestamp: self.timestamps.as_ref().map(|t| t[u as usize][pos]),
                }
            })
            .collect()
    }
}

/// Original string keys in dense-index order, written by `prepare` so
/// attribute files can be joined back onto the indexed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMaps {
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
}

/// [`build_dataset_with_keys`] without the key maps.
pub fn build_dataset(events: &[RawEvent], min_interactions: usize) -> Result<Dataset> {
    build_dataset_with_keys(events, min_interactions).map(|(ds, _)| ds)
}

/// Binarize events into an indexed dataset.
///
/// Duplicate (user, item) pairs collapse to one interaction keeping the last
/// occurrence's side values. Users with fewer than `min_interactions`
/// distinct items are removed in a single pass; items are never filtered.
/// Dense user and item indices follow first appearance in file order among
/// retained users, so runs are bit-reproducible for the same input.
pub fn build_dataset_with_keys(
    events: &[RawEvent],
    min_interactions: usize,
) -> Result<(Dataset, KeyMaps)> {
    if min_interactions < 1 {
        return Err(Error::InvalidMinInteractions);
    }

    // Distinct-item counts per user key.
    let mut per_user: HashMap<&str, HashSet<&str>> = HashMap::new();
    for ev in events {
        per_user
            .entry(ev.user_key.as_str())
            .or_default()
            .insert(ev.item_key.as_str());
    }

    // (rating, timestamp) per (user, item), last occurrence wins.
    type SideValues = (Option<f64>, Option<i64>);
    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut rows: Vec<HashMap<u32, SideValues>> = Vec::new();

    for ev in events {
        if per_user[ev.user_key.as_str()].len() < min_interactions {
            continue;
        }
        let next_user = user_index.len() as u32;
        let u = *user_index.entry(ev.user_key.as_str()).or_insert(next_user);
        if u as usize == rows.len() {
            rows.push(HashMap::new());
        }
        let next_item = item_index.len() as u32;
        let i = *item_index.entry(ev.item_key.as_str()).or_insert(next_item);
        rows[u as usize].insert(i, (ev.rating, ev.timestamp));
    }

    if rows.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }

    let mut user_keys = vec![String::new(); user_index.len()];
    for (key, &idx) in &user_index {
        user_keys[idx as usize] = key.to_string();
    }
    let mut item_keys = vec![String::new(); item_index.len()];
    for (key, &idx) in &item_index {
        item_keys[idx as usize] = key.to_string();
    }

    let all_rated = events.iter().all(|e| e.rating.is_some());
    let all_timed = events.iter().all(|e| e.timestamp.is_some());

    let num_items = item_index.len();
    let mut interactions = Vec::with_capacity(rows.len());
    let mut ratings = all_rated.then(|| Vec::with_capacity(rows.len()));
    let mut timestamps = all_timed.then(|| Vec::with_capacity(rows.len()));

    for row in rows {
        let mut entries: Vec<(u32, Option<f64>, Option<i64>)> =
            row.into_iter().map(|(i, (r, t))| (i, r, t)).collect();
        entries.sort_unstable_by_key(|e| e.0);
        interactions.push(entries.iter().map(|e| e.0).collect::<Vec<_>>());
        if let Some(rs) = ratings.as_mut() {
            rs.push(entries.iter().map(|e| e.1.unwrap()).collect::<Vec<_>>());
        }
        if let Some(ts) = timestamps.as_mut() {
            ts.push(entries.iter().map(|e| e.2.unwrap()).collect::<Vec<_>>());
        }
    }

    Ok((
        Dataset {
            num_items,
            interactions,
            ratings,
            timestamps,
        },
        KeyMaps {
            user_keys,
            item_keys,
        },
    ))
}

/// Leave-one-out split: per-user held-out dev and test items plus a fixed
/// list of evaluation negatives, all removed from / disjoint with `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub dev_items: Vec<u32>,
    pub test_items: Vec<u32>,
    pub eval_negatives: Vec<Vec<u32>>,
}

/// Number of sampled evaluation negatives in the standard protocol.
pub const EVAL_NEGATIVES: usize = 100;

/// Standard leave-one-out split with 100 evaluation negatives per user.
///
/// The test item is the latest-timestamp interaction when timestamps exist,
/// otherwise a seeded uniform draw; the dev item is a uniform draw from the
/// remainder. Negatives are drawn uniformly without replacement from items
/// the user never interacted with. Pure function of `(ds, seed)`.
pub fn leave_one_out_split(ds: &Dataset, seed: u64) -> Result<SplitDataset> {
    leave_one_out_split_with(ds, seed, EVAL_NEGATIVES)
}

/// Leave-one-out split with a configurable negative count, for desk-scale
/// instances with fewer than 102 items.
pub fn leave_one_out_split_with(
    ds: &Dataset,
    seed: u64,
    num_negatives: usize,
) -> Result<SplitDataset> {
    let mut rng = StdRng::seed_from_u64(seed);
    let num_users = ds.num_users();
    let num_items = ds.num_items();

    let mut train_items = Vec::with_capacity(num_users);
    let mut train_ratings = ds.has_ratings().then(Vec::new);
    let mut train_timestamps = ds.has_timestamps().then(Vec::new);
    let mut dev_items = Vec::with_capacity(num_users);
    let mut test_items = Vec::with_capacity(num_users);
    let mut eval_negatives = Vec::with_capacity(num_users);

    for u in 0..num_users {
        let items = ds.user_items(u);
        let count = items.len();
        if count < 3 {
            return Err(Error::TooFewInteractions { user: u, count });
        }
        let available = num_items - count;
        if available < num_negatives {
            return Err(Error::InsufficientNegatives {
                user: u,
                available,
                needed: num_negatives,
            });
        }

        // Test: latest timestamp when present (last position on ties),
        // otherwise uniform.
        let test_pos = match ds.timestamps(u) {
            Some(ts) => {
                let mut best = 0;
                for (k, &t) in ts.iter().enumerate() {
                    if t >= ts[best] {
                        best = k;
                    }
                }
                best
            }
            None => rng.gen_range(0..count),
        };
        // Dev: uniform over remaining positions.
        let dev_draw = rng.gen_range(0..count - 1);
        let dev_pos = if dev_draw >= test_pos {
            dev_draw + 1
        } else {
            dev_draw
        };

        test_items.push(items[test_pos]);
        dev_items.push(items[dev_pos]);

        let keep = |pos: usize| pos != test_pos && pos != dev_pos;
        train_items.push(
            items
                .iter()
                .enumerate()
                .filter(|(k, _)| keep(*k))
                .map(|(_, &i)| i)
                .collect::<Vec<_>>(),
        );
        if let Some(rs) = train_ratings.as_mut() {
            let full = ds.ratings(u).unwrap();
            rs.push(
                full.iter()
                    .enumerate()
                    .filter(|(k, _)| keep(*k))
                    .map(|(_, &r)| r)
                    .collect::<Vec<_>>(),
            );
        }
        if let Some(ts) = train_timestamps.as_mut() {
            let full = ds.timestamps(u).unwrap();
            ts.push(
                full.iter()
                    .enumerate()
                    .filter(|(k, _)| keep(*k))
                    .map(|(_, &t)| t)
                    .collect::<Vec<_>>(),
            );
        }

        eval_negatives.push(sample_negatives(items, num_items, num_negatives, &mut rng));
    }

    Ok(SplitDataset {
        train: Dataset {
            num_items,
            interactions: train_items,
            ratings: train_ratings,
            timestamps: train_timestamps,
        },
        dev_items,
        test_items,
        eval_negatives,
    })
}

/// Uniform sample without replacement from items not in `interacted`
/// (sorted). Enumerates the complement when it is small, otherwise rejection
/// samples.
fn sample_negatives(
    interacted: &[u32],
    num_items: usize,
    count: usize,
    rng: &mut StdRng,
) -> Vec<u32> {
    let available = num_items - interacted.len();
    if available <= 4 * count {
        let mut pool: Vec<u32> = (0..num_items as u32)
            .filter(|i| interacted.binary_search(i).is_err())
            .collect();
        // Partial Fisher-Yates: the first `count` entries are the sample.
        for k in 0..count {
            let j = rng.gen_range(k..pool.len());
            pool.swap(k, j);
        }
        pool.truncate(count);
        pool
    } else {
        let mut chosen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let cand = rng.gen_range(0..num_items) as u32;
            if interacted.binary_search(&cand).is_err() && chosen.insert(cand) {
                out.push(cand);
            }
        }
        out
    }
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    /// Uniform draw over items outside the user's train list and held-out
    /// dev/test items; corruption touches the item side only.
    pub fn sample_train_negative<R: Rng>(&self, user: usize, rng: &mut R) -> u32 {
        let train = self.train.user_items(user);
        let dev = self.dev_items[user];
        let test = self.test_items[user];
        loop {
            let cand = rng.gen_range(0..self.num_items()) as u32;
            if cand != dev && cand != test && train.binary_search(&cand).is_err() {
                return cand;
            }
        }
    }

    /// The 101 ranking candidates for a user: held-out item first, then the
    /// fixed negatives.
    pub fn eval_candidates(&self, user: usize, held_out: u32) -> Vec<u32> {
        let mut cands = Vec::with_capacity(1 + self.eval_negatives[user].len());
        cands.push(held_out);
        cands.extend_from_slice(&self.eval_negatives[user]);
        cands
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        split_io::write(self, w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<SplitDataset> {
        split_io::read(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<SplitDataset> {
        let file = File::open(path).map_err(|source| Error::FileOpen {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(&mut BufReader::new(file))
    }
}

// Split snapshot layout (version 1, little-endian):
//   magic "LRMLSPLT", version u32, num_users u64, num_items u64,
//   flags u8 (bit0 ratings, bit1 timestamps), negatives_per_user u64,
//   then per user: train_len u64, items u32[len], [ratings f64[len]],
//   [timestamps i64[len]], dev u32, test u32, negatives u32[n].
pub(crate) mod split_io {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"LRMLSPLT";
    pub const VERSION: u32 = 1;

    pub fn write<W: Write>(split: &SplitDataset, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32(VERSION)?;
        w.write_u64(split.num_users() as u64)?;
        w.write_u64(split.num_items() as u64)?;
        let mut flags = 0u8;
        if split.train.has_ratings() {
            flags |= 1;
        }
        if split.train.has_timestamps() {
            flags |= 2;
        }
        w.write_all(&[flags])?;
        let negs = split.eval_negatives.first().map_or(0, Vec::len);
        w.write_u64(negs as u64)?;

        for u in 0..split.num_users() {
            let items = split.train.user_items(u);
            w.write_u64(items.len() as u64)?;
            for &i in items {
                w.write_u32(i)?;
            }
            if let Some(rs) = split.train.ratings(u) {
                for &r in rs {
                    w.write_f64(r)?;
                }
            }
            if let Some(ts) = split.train.timestamps(u) {
                for &t in ts {
                    w.write_i64(t)?;
                }
            }
            w.write_u32(split.dev_items[u])?;
            w.write_u32(split.test_items[u])?;
            debug_assert_eq!(split.eval_negatives[u].len(), negs);
            for &n in &split.eval_negatives[u] {
                w.write_u32(n)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<SplitDataset> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::SnapshotFormat("bad split magic".into()));
        }
        let version = r.read_u32()?;
        if version != VERSION {
            return Err(Error::SnapshotFormat(format!(
                "unsupported split version {version}"
            )));
        }
        let num_users = r.read_u64()? as usize;
        let num_items = r.read_u64()? as usize;
        let mut flags = [0u8; 1];
        r.read_exact(&mut flags)?;
        let has_ratings = flags[0] & 1 != 0;
        let has_timestamps = flags[0] & 2 != 0;
        let negs = r.read_u64()? as usize;

        let mut interactions = Vec::with_capacity(num_users);
        let mut ratings = has_ratings.then(Vec::new);
        let mut timestamps = has_timestamps.then(Vec::new);
        let mut dev_items = Vec::with_capacity(num_users);
        let mut test_items = Vec::with_capacity(num_users);
        let mut eval_negatives = Vec::with_capacity(num_users);

        for _ in 0..num_users {
            let len = r.read_u64()? as usize;
            let mut items = Vec::with_capacity(len);
            for _ in 0..len {
                items.push(r.read_u32()?);
            }
            interactions.push(items);
            if let Some(rs) = ratings.as_mut() {
                let mut row = Vec::with_capacity(len);
                for _ in 0..len {
                    row.push(r.read_f64()?);
                }
                rs.push(row);
            }
            if let Some(ts) = timestamps.as_mut() {
                let mut row = Vec::with_capacity(len);
                for _ in 0..len {
                    row.push(r.read_i64()?);
                }
                ts.push(row);
            }
            dev_items.push(r.read_u32()?);
            test_items.push(r.read_u32()?);
            let mut ns = Vec::with_capacity(negs);
            for _ in 0..negs {
                ns.push(r.read_u32()?);
            }
            eval_negatives.push(ns);
        }

        Ok(SplitDataset {
            train: Dataset {
                num_items,
                interactions,
                ratings,
                timestamps,
            },
            dev_items,
            test_items,
            eval_negatives,
        })
    }
}
