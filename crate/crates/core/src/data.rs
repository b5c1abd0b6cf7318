//! Interaction ingestion, k-core filtering, windowing and leave-one-out splits.
//!
//! Dense token layout: `0` is padding, `1` is the mask token, real items
//! occupy `2..num_items + 2` in first-appearance order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const FIRST_ITEM: usize = 2;

pub const MIN_USER_INTERACTIONS: usize = 5;
pub const MIN_ITEM_USERS: usize = 5;

pub const DATASET_FILE: &str = "dataset.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
const DATASET_MAGIC: &str = "#cbit-data v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    /// `user item timestamp` per line.
    Triplet,
    /// `user item item ...` per line, already chronological.
    Sequence,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(InputFormat::Triplet),
            "sequence" => Ok(InputFormat::Sequence),
            other => Err(Error::config(format!(
                "unknown input format {other:?} (expected triplet or sequence)"
            ))),
        }
    }
}

/// Bijection between raw item ids and dense token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// `raw[i]` receives dense id `i + 2`.
    pub fn from_raw(raw: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(raw.len());
        for (i, r) in raw.iter().enumerate() {
            if index.insert(r.clone(), i + FIRST_ITEM).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry {r:?}")));
            }
        }
        Ok(Self { raw, index })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        dense
            .checked_sub(FIRST_ITEM)
            .and_then(|i| self.raw.get(i))
            .map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub users: Vec<String>,
    /// Chronological dense item ids, one list per user (same order as `users`).
    pub sequences: Vec<Vec<usize>>,
    pub vocab: Vocab,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "users={} items={} actions={} avg_length={:.1} sparsity={:.2}%",
            self.users,
            self.items,
            self.actions,
            self.avg_length,
            self.sparsity * 100.0
        )
    }
}

impl InteractionDataset {
    /// Builds a dataset from sequences that are already in dense ids.
    /// Raw ids are the zero-based item numbers.
    pub fn from_dense(sequences: Vec<Vec<usize>>, num_items: usize) -> Result<Self> {
        for (u, s) in sequences.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&t| t < FIRST_ITEM || t >= num_items + FIRST_ITEM) {
                return Err(Error::data(format!("user {u}: token {bad} is not an item id")));
            }
        }
        let vocab = Vocab::from_raw((0..num_items).map(|i| i.to_string()).collect())?;
        let users = (0..sequences.len()).map(|u| u.to_string()).collect();
        Ok(Self {
            users,
            sequences,
            vocab,
        })
    }

    pub fn num_items(&self) -> usize {
        self.vocab.len()
    }

    /// Items plus the padding and mask tokens.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + FIRST_ITEM
    }

    pub fn num_actions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        let (users, items, actions) = (self.sequences.len(), self.num_items(), self.num_actions());
        let cells = users as f64 * items as f64;
        DatasetStats {
            users,
            items,
            actions,
            avg_length: if users == 0 { 0.0 } else { actions as f64 / users as f64 },
            sparsity: if cells == 0.0 { 0.0 } else { 1.0 - actions as f64 / cells },
        }
    }
}

pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionDataset> {
    let file = File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    parse_interactions(BufReader::new(file), format)
}

/// Parses, de-duplicates, 5-core filters and indexes raw interactions.
///
/// Users keep their first-appearance order in the input. Item ids are
/// assigned by first appearance while walking the filtered sequences in that
/// user order.
pub fn parse_interactions<R: BufRead>(reader: R, format: InputFormat) -> Result<InteractionDataset> {
    let raw = match format {
        InputFormat::Triplet => parse_triplets(reader)?,
        InputFormat::Sequence => parse_sequences(reader)?,
    };
    let filtered = core_filter(raw, MIN_USER_INTERACTIONS, MIN_ITEM_USERS);
    if filtered.is_empty() {
        return Err(Error::data("dataset is empty after filtering"));
    }
    let mut raw_items = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut users = Vec::with_capacity(filtered.len());
    let mut sequences = Vec::with_capacity(filtered.len());
    for (user, items) in filtered {
        let dense = items
            .into_iter()
            .map(|it| {
                let next = raw_items.len() + FIRST_ITEM;
                *seen.entry(it).or_insert_with_key(|k| {
                    raw_items.push(k.clone());
                    next
                })
            })
            .collect();
        users.push(user);
        sequences.push(dense);
    }
    Ok(InteractionDataset {
        users,
        sequences,
        vocab: Vocab::from_raw(raw_items)?,
    })
}

fn read_line_err(line_no: usize, e: std::io::Error) -> Error {
    Error::data(format!("line {line_no}: {e}"))
}

fn parse_triplets<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<String>)>> {
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut events: Vec<(String, Vec<(f64, String)>)> = Vec::new();
    let mut dedup: HashSet<(usize, String, u64)> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| read_line_err(line_no, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [user, item, ts] = fields[..] else {
            return Err(Error::data(format!(
                "line {line_no}: expected `user item timestamp`, found {} fields",
                fields.len()
            )));
        };
        let ts: f64 = ts
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| Error::data(format!("line {line_no}: bad timestamp {ts:?}")))?;
        let u = *user_index.entry(user.to_string()).or_insert_with(|| {
            events.push((user.to_string(), Vec::new()));
            events.len() - 1
        });
        // Normalise -0.0 so it de-duplicates against 0.0.
        let key = (u, item.to_string(), (ts + 0.0).to_bits());
        if dedup.insert(key) {
            events[u].1.push((ts, item.to_string()));
        }
    }
    Ok(events
        .into_iter()
        .map(|(user, mut evs)| {
            evs.sort_by(|a, b| a.0.total_cmp(&b.0));
            (user, evs.into_iter().map(|(_, it)| it).collect())
        })
        .collect())
}

fn parse_sequences<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<String>)>> {
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| read_line_err(line_no, e))?;
        let mut fields = line.split_whitespace();
        let Some(user) = fields.next() else { continue };
        let items: Vec<String> = fields.map(str::to_string).collect();
        if items.is_empty() {
            return Err(Error::data(format!("line {line_no}: user {user:?} has no items")));
        }
        let u = *user_index.entry(user.to_string()).or_insert_with(|| {
            out.push((user.to_string(), Vec::new()));
            out.len() - 1
        });
        out[u].1.extend(items);
    }
    Ok(out)
}

/// Repeatedly drops items seen by fewer than `min_item_users` distinct users
/// and users with fewer than `min_user_len` interactions until neither rule
/// removes anything.
pub fn core_filter(
    mut seqs: Vec<(String, Vec<String>)>,
    min_user_len: usize,
    min_item_users: usize,
) -> Vec<(String, Vec<String>)> {
    loop {
        let mut users_per_item: HashMap<&str, usize> = HashMap::new();
        for (_, items) in &seqs {
            let distinct: HashSet<&str> = items.iter().map(String::as_str).collect();
            for it in distinct {
                *users_per_item.entry(it).or_default() += 1;
            }
        }
        let rare: HashSet<String> = users_per_item
            .into_iter()
            .filter(|&(_, n)| n < min_item_users)
            .map(|(it, _)| it.to_string())
            .collect();
        let before = seqs.len();
        if !rare.is_empty() {
            for (_, items) in &mut seqs {
                items.retain(|it| !rare.contains(it));
            }
        }
        seqs.retain(|(_, items)| items.len() >= min_user_len);
        if rare.is_empty() && seqs.len() == before {
            return seqs;
        }
    }
}

/// A length-`T` model input, pre-padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingWindow {
    pub tokens: Vec<usize>,
    pub source_user: usize,
    /// Index of the first non-padding position.
    pub valid_from: usize,
}

impl TrainingWindow {
    pub fn padded(items: &[usize], max_len: usize, source_user: usize) -> Self {
        debug_assert!(items.len() <= max_len);
        let valid_from = max_len - items.len();
        let mut tokens = vec![PAD; valid_from];
        tokens.extend_from_slice(items);
        Self {
            tokens,
            source_user,
            valid_from,
        }
    }

    pub fn items(&self) -> &[usize] {
        &self.tokens[self.valid_from..]
    }
}

/// Cuts `sequence` into windows of `max_len` starting every `stride` items,
/// always ending with a window aligned to the end of the sequence.
pub fn slide_windows(
    sequence: &[usize],
    max_len: usize,
    stride: usize,
    source_user: usize,
) -> Result<Vec<TrainingWindow>> {
    if max_len == 0 || stride == 0 {
        return Err(Error::config("window size and stride must be positive"));
    }
    if sequence.is_empty() {
        return Err(Error::data(format!("user {source_user}: empty sequence")));
    }
    if sequence.len() <= max_len {
        return Ok(vec![TrainingWindow::padded(sequence, max_len, source_user)]);
    }
    let last = sequence.len() - max_len;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if offsets.last() != Some(&last) {
        offsets.push(last);
    }
    Ok(offsets
        .into_iter()
        .map(|o| TrainingWindow::padded(&sequence[o..o + max_len], max_len, source_user))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    pub context: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSplit {
    /// Per-user training context: the sequence without its last two items.
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
    pub num_items: usize,
}

impl EvalSplit {
    pub fn training_windows(&self, max_len: usize, stride: usize) -> Result<Vec<TrainingWindow>> {
        let mut out = Vec::new();
        for (u, seq) in self.train.iter().enumerate() {
            out.extend(slide_windows(seq, max_len, stride, u)?);
        }
        Ok(out)
    }

    /// Sorted distinct items of each user's training context.
    pub fn user_item_sets(&self) -> Vec<Vec<usize>> {
        self.train
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect()
    }
}

pub fn leave_one_out(ds: &InteractionDataset) -> Result<EvalSplit> {
    let mut split = EvalSplit {
        train: Vec::with_capacity(ds.sequences.len()),
        validation: Vec::with_capacity(ds.sequences.len()),
        test: Vec::with_capacity(ds.sequences.len()),
        num_items: ds.num_items(),
    };
    for (u, s) in ds.sequences.iter().enumerate() {
        let n = s.len();
        if n < 3 {
            return Err(Error::data(format!(
                "user {}: {n} interactions, leave-one-out needs at least 3",
                ds.users.get(u).map_or("?", String::as_str)
            )));
        }
        split.train.push(s[..n - 2].to_vec());
        split.validation.push(EvalCase {
            user: u,
            context: s[..n - 2].to_vec(),
            target: s[n - 2],
        });
        split.test.push(EvalCase {
            user: u,
            context: s[..n - 1].to_vec(),
            target: s[n - 1],
        });
    }
    Ok(split)
}

/// The most recent `max_len - 1` items, leaving room for the mask token.
pub fn truncate_for_inference(sequence: &[usize], max_len: usize) -> &[usize] {
    let keep = max_len.saturating_sub(1);
    &sequence[sequence.len().saturating_sub(keep)..]
}

/// Writes `dataset.txt` and `vocab.txt` into `dir`.
pub fn write_dataset(ds: &InteractionDataset, dir: &Path, max_len: Option<usize>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(DATASET_FILE))?);
    write!(w, "{DATASET_MAGIC} {} {}", ds.sequences.len(), ds.num_items())?;
    if let Some(t) = max_len {
        write!(w, " {t}")?;
    }
    writeln!(w)?;
    for s in &ds.sequences {
        let line: Vec<String> = s.iter().map(usize::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    let mut v = BufWriter::new(File::create(dir.join(VOCAB_FILE))?);
    for (i, raw) in ds.vocab.raw.iter().enumerate() {
        writeln!(v, "{raw} {}", i + FIRST_ITEM)?;
    }
    v.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. Users are named by line
/// number. Returns the window size recorded in the header, if any.
pub fn read_dataset(dir: &Path) -> Result<(InteractionDataset, Option<usize>)> {
    let open = |name: &str| {
        let p = dir.join(name);
        File::open(&p)
            .map(BufReader::new)
            .map_err(|e| Error::data(format!("{}: {e}", p.display())))
    };
    let mut lines = open(DATASET_FILE)?.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::data("dataset file is empty"))?;
    let rest = header
        .strip_prefix(DATASET_MAGIC)
        .ok_or_else(|| Error::data(format!("bad dataset header {header:?}")))?;
    let nums: Vec<usize> = rest
        .split_whitespace()
        .map(|f| f.parse().map_err(|_| Error::data(format!("bad dataset header {header:?}"))))
        .collect::<Result<_>>()?;
    let (n_users, n_items, max_len) = match nums[..] {
        [u, i] => (u, i, None),
        [u, i, t] => (u, i, Some(t)),
        _ => return Err(Error::data(format!("bad dataset header {header:?}"))),
    };
    let mut sequences = Vec::with_capacity(n_users);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| read_line_err(line_no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .ok()
                    .filter(|&id| (FIRST_ITEM..n_items + FIRST_ITEM).contains(&id))
                    .ok_or_else(|| Error::data(format!("line {line_no}: bad item id {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        sequences.push(seq);
    }
    if sequences.len() != n_users {
        return Err(Error::data(format!(
            "header declares {n_users} users, found {}",
            sequences.len()
        )));
    }

    let mut raw = vec![None; n_items];
    for (i, line) in open(VOCAB_FILE)?.lines().enumerate() {
        let line = line.map_err(|e| read_line_err(i + 1, e))?;
        let mut f = line.split_whitespace();
        let (Some(r), Some(d), None) = (f.next(), f.next(), f.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::data(format!("vocab line {}: expected `raw_id dense_id`", i + 1)));
        };
        let slot = d
            .parse::<usize>()
            .ok()
            .and_then(|d| d.checked_sub(FIRST_ITEM))
            .filter(|&s| s < n_items)
            .ok_or_else(|| Error::data(format!("vocab line {}: bad dense id {d:?}", i + 1)))?;
        raw[slot] = Some(r.to_string());
    }
    let raw = raw
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::data(format!("vocab has no entry for dense id {}", i + FIRST_ITEM))))
        .collect::<Result<Vec<_>>>()?;
    let ds = InteractionDataset {
        users: (0..n_users).map(|u| u.to_string()).collect(),
        sequences,
        vocab: Vocab::from_raw(raw)?,
    };
    Ok((ds, max_len))
}
