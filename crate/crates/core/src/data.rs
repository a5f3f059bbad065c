//! Interaction logs, instance construction and the synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved padding index; real items are `1..=num_items`.
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Click,
    Like,
    Follow,
    Forward,
}

impl std::str::FromStr for Behavior {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "click" | "pv" => Ok(Self::Click),
            "like" | "fav" => Ok(Self::Like),
            "follow" | "subscribe" => Ok(Self::Follow),
            "forward" | "share" => Ok(Self::Forward),
            other => Err(format!("unknown behavior '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
    pub behavior: Behavior,
}

/// Column layout of an interaction log. Column indices are zero-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogFormat {
    pub delimiter: u8,
    pub has_header: bool,
    pub user_col: usize,
    pub item_col: usize,
    pub time_col: usize,
    /// Without a behavior column every row is a click.
    pub behavior_col: Option<usize>,
}

impl Default for LogFormat {
    fn default() -> Self {
        Self { delimiter: b',', has_header: false, user_col: 0, item_col: 1, time_col: 2, behavior_col: None }
    }
}

impl LogFormat {
    pub fn tsv() -> Self {
        Self { delimiter: b'\t', ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedLog {
    pub events: Vec<InteractionEvent>,
    pub malformed: usize,
}

fn parse_record(rec: &csv::StringRecord, format: &LogFormat) -> Option<InteractionEvent> {
    let user_id = rec.get(format.user_col)?.trim();
    let item_id = rec.get(format.item_col)?.trim();
    if user_id.is_empty() || item_id.is_empty() {
        return None;
    }
    let timestamp = rec.get(format.time_col)?.trim().parse::<u64>().ok()?;
    let behavior = match format.behavior_col {
        Some(c) => rec.get(c)?.parse().ok()?,
        None => Behavior::Click,
    };
    Some(InteractionEvent { user_id: user_id.to_string(), item_id: item_id.to_string(), timestamp, behavior })
}

/// Reads a delimited log; malformed rows are skipped and counted.
pub fn parse_log(path: &Path, format: &LogFormat) -> Result<ParsedLog> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(format.has_header)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let mut events = Vec::new();
    let mut malformed = 0;
    for rec in reader.records() {
        match rec.ok().as_ref().and_then(|r| parse_record(r, format)) {
            Some(e) => events.push(e),
            None => malformed += 1,
        }
    }
    if malformed > 0 {
        log::warn!("{}: skipped {malformed} malformed rows", path.display());
    }
    if events.is_empty() {
        return Err(Error::Data(format!("{}: no valid rows ({malformed} malformed)", path.display())));
    }
    Ok(ParsedLog { events, malformed })
}

/// Drops users and items with fewer than `k` events until none remain.
pub fn k_core_filter(events: Vec<InteractionEvent>, k: usize) -> Result<Vec<InteractionEvent>> {
    if k == 0 {
        return Err(Error::Config("k-core filter needs k ≥ 1".into()));
    }
    let before = events.len();
    let mut events = events;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *users.entry(&e.user_id).or_default() += 1;
            *items.entry(&e.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = events.iter().map(|e| users[e.user_id.as_str()] >= k && items[e.item_id.as_str()] >= k).collect();
        if keep.iter().all(|&b| b) {
            break;
        }
        let mut flags = keep.into_iter();
        events.retain(|_| flags.next().unwrap());
    }
    if events.is_empty() {
        return Err(Error::Data(format!("{k}-core filter removed all {before} events")));
    }
    Ok(events)
}

/// One (history, target, label) example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    /// Length `max_len`, left-padded with [`PAD`].
    pub item_seq: Vec<usize>,
    pub valid_len: usize,
    pub target: usize,
    pub label: bool,
    pub user: usize,
    /// Time of the positive event this instance belongs to.
    pub timestamp: u64,
    /// Shared by a positive and its sampled negatives.
    pub group: usize,
}

impl TrainingInstance {
    /// History items without padding, oldest first.
    pub fn history(&self) -> &[usize] {
        &self.item_seq[self.item_seq.len() - self.valid_len..]
    }

    pub fn new(history: &[usize], max_len: usize, target: usize, label: bool, user: usize, timestamp: u64, group: usize) -> Self {
        let tail = &history[history.len().saturating_sub(max_len)..];
        let mut item_seq = vec![PAD; max_len - tail.len()];
        item_seq.extend_from_slice(tail);
        Self { item_seq, valid_len: tail.len(), target, label, user, timestamp, group }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub max_len: usize,
    /// Number of real items; valid indices are `1..=item_vocab_size`.
    pub item_vocab_size: usize,
    /// External user ids by user index.
    pub users: Vec<String>,
    pub train: Vec<TrainingInstance>,
    pub validation: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub max_len: usize,
    /// Positive events at or before this time are training events.
    pub train_end: u64,
    /// Events in `(train_end, val_end]` are validation events; later ones test.
    pub val_end: u64,
    pub neg_ratio: usize,
    pub seed: u64,
    /// Behaviors that produce instances; all behaviors still form history.
    pub behaviors: Vec<Behavior>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { max_len: 50, train_end: 0, val_end: 0, neg_ratio: 1, seed: 0, behaviors: vec![Behavior::Click] }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic per-user random stream.
pub fn user_rng(user_id: &str, seed: u64) -> ChaCha8Rng {
    let mut bytes = user_id.as_bytes().to_vec();
    bytes.extend_from_slice(&seed.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&bytes))
}

/// Draws `count` items from `1..=vocab` outside `exclude`, without repeats.
/// Returns fewer when the vocabulary is exhausted.
fn sample_negatives<R: Rng>(rng: &mut R, vocab: usize, exclude: &BTreeSet<usize>, count: usize) -> Vec<usize> {
    let free = vocab.saturating_sub(exclude.len());
    let count = count.min(free);
    let mut out = Vec::with_capacity(count);
    if free <= 4 * count {
        let mut pool: Vec<usize> = (1..=vocab).filter(|i| !exclude.contains(i)).collect();
        pool.shuffle(rng);
        out.extend_from_slice(&pool[..count]);
        return out;
    }
    while out.len() < count {
        let item = rng.gen_range(1..=vocab);
        if !exclude.contains(&item) && !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Train,
    Validation,
    Test,
}

impl DatasetSplit {
    fn part_mut(&mut self, part: Part) -> &mut Vec<TrainingInstance> {
        match part {
            Part::Train => &mut self.train,
            Part::Validation => &mut self.validation,
            Part::Test => &mut self.test,
        }
    }

    pub fn parts(&self) -> [(&'static str, &[TrainingInstance]); 3] {
        [("train", &self.train), ("validation", &self.validation), ("test", &self.test)]
    }
}

/// Builds time-split instances: every qualifying event with at least one
/// earlier event yields one positive and `neg_ratio` negatives.
///
/// Item indices follow first appearance in `events`; user indices follow
/// sorted user ids.
pub fn build_instances(events: &[InteractionEvent], config: &SplitConfig) -> Result<DatasetSplit> {
    if config.neg_ratio == 0 {
        return Err(Error::Config("neg_ratio must be at least 1".into()));
    }
    if config.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    if config.val_end < config.train_end {
        return Err(Error::Config("validation boundary precedes training boundary".into()));
    }
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    for e in events {
        let next = item_index.len() + 1;
        item_index.entry(&e.item_id).or_insert(next);
    }
    let mut per_user: BTreeMap<&str, Vec<&InteractionEvent>> = BTreeMap::new();
    for e in events {
        per_user.entry(&e.user_id).or_default().push(e);
    }
    let vocab = item_index.len();
    let mut split = DatasetSplit { max_len: config.max_len, item_vocab_size: vocab, ..Default::default() };
    let mut group = 0;
    for (user, (uid, mut evs)) in per_user.into_iter().enumerate() {
        split.users.push(uid.to_string());
        evs.sort_by_key(|e| e.timestamp);
        let items: Vec<usize> = evs.iter().map(|e| item_index[e.item_id.as_str()]).collect();
        let seen: BTreeSet<usize> = items.iter().copied().collect();
        let mut rng = user_rng(uid, config.seed);
        for (p, e) in evs.iter().enumerate().skip(1) {
            if !config.behaviors.contains(&e.behavior) {
                continue;
            }
            let part = if e.timestamp <= config.train_end {
                Part::Train
            } else if e.timestamp <= config.val_end {
                Part::Validation
            } else {
                Part::Test
            };
            let history = &items[..p];
            let negatives = sample_negatives(&mut rng, vocab, &seen, config.neg_ratio);
            let out = split.part_mut(part);
            out.push(TrainingInstance::new(history, config.max_len, items[p], true, user, e.timestamp, group));
            for n in negatives {
                out.push(TrainingInstance::new(history, config.max_len, n, false, user, e.timestamp, group));
            }
            group += 1;
        }
    }
    if split.train.is_empty() {
        return Err(Error::Data("no training instances produced".into()));
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub seq_len: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub max_len: usize,
    pub neg_ratio: usize,
    /// Training cuts per user before the validation cut.
    pub train_cuts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 500,
            num_clusters: 10,
            seq_len: 80,
            noise_rate: 0.3,
            seed: 7,
            max_len: 80,
            neg_ratio: 1,
            train_cuts: 4,
        }
    }
}

/// A generated user: the behavior sequence and the cluster of every position.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthUser {
    pub active: Vec<usize>,
    pub items: Vec<usize>,
    /// Cluster of the block each position belongs to (noise positions keep
    /// the block's cluster).
    pub block_cluster: Vec<usize>,
    pub noise: Vec<bool>,
}

pub fn cluster_of(item: usize, num_items: usize, num_clusters: usize) -> usize {
    (item - 1) / (num_items / num_clusters)
}

fn synth_user<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> SynthUser {
    let per_cluster = cfg.num_items / cfg.num_clusters;
    let k = rng.gen_range(2..=4).min(cfg.num_clusters);
    let mut clusters: Vec<usize> = (0..cfg.num_clusters).collect();
    clusters.shuffle(rng);
    let active: Vec<usize> = clusters[..k].to_vec();

    let mut items = Vec::with_capacity(cfg.seq_len);
    let mut block_cluster = Vec::with_capacity(cfg.seq_len);
    let mut noise = Vec::with_capacity(cfg.seq_len);
    let mut current = active[rng.gen_range(0..k)];
    while items.len() < cfg.seq_len {
        let len = rng.gen_range(4..=12).min(cfg.seq_len - items.len());
        for _ in 0..len {
            let is_noise = rng.gen_bool(cfg.noise_rate);
            let item = if is_noise {
                rng.gen_range(1..=cfg.num_items)
            } else {
                1 + current * per_cluster + rng.gen_range(0..per_cluster)
            };
            items.push(item);
            block_cluster.push(current);
            noise.push(is_noise);
        }
        if k > 1 {
            let others: Vec<usize> = active.iter().copied().filter(|&c| c != current).collect();
            current = others[rng.gen_range(0..others.len())];
        }
    }
    SynthUser { active, items, block_cluster, noise }
}

/// Item of `cluster` not in `seen`, or any item of it when all are seen.
fn fresh_item<R: Rng>(rng: &mut R, cluster: usize, per_cluster: usize, seen: &BTreeSet<usize>) -> usize {
    let first = 1 + cluster * per_cluster;
    let free: Vec<usize> = (first..first + per_cluster).filter(|i| !seen.contains(i)).collect();
    if free.is_empty() {
        first + rng.gen_range(0..per_cluster)
    } else {
        free[rng.gen_range(0..free.len())]
    }
}

/// Generates users and their instances.
///
/// For a user with sequence length `L` the test cut is `L`, the validation
/// cut `L − 1`, and `train_cuts` training cuts lie in `[L/2, L − 2]`. At cut
/// `c` the history is the first `c` positions (timestamps `0..c`) and the
/// positive is an unseen item of the cluster of the block at `c − 1`;
/// negatives are uniform over items outside the history. Boundaries are
/// `train_end = L − 2`, `val_end = L − 1`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(DatasetSplit, Vec<SynthUser>)> {
    if cfg.num_clusters == 0 || cfg.num_clusters > cfg.num_items {
        return Err(Error::Config(format!("{} clusters for {} items", cfg.num_clusters, cfg.num_items)));
    }
    if cfg.num_items % cfg.num_clusters != 0 {
        return Err(Error::Config("num_items must be divisible by num_clusters".into()));
    }
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return Err(Error::Config("noise_rate must lie in [0, 1)".into()));
    }
    if cfg.seq_len < 4 {
        return Err(Error::Config("seq_len must be at least 4".into()));
    }
    if cfg.neg_ratio == 0 || cfg.max_len == 0 {
        return Err(Error::Config("neg_ratio and max_len must be positive".into()));
    }
    let per_cluster = cfg.num_items / cfg.num_clusters;
    let l = cfg.seq_len;
    let mut split = DatasetSplit { max_len: cfg.max_len, item_vocab_size: cfg.num_items, ..Default::default() };
    let mut users = Vec::with_capacity(cfg.num_users);
    let mut group = 0;
    for u in 0..cfg.num_users {
        let uid = format!("u{u}");
        let mut rng = user_rng(&uid, cfg.seed);
        let user = synth_user(&mut rng, cfg);

        let lo = (l / 2).max(1);
        let hi = l - 2;
        let mut train_cuts: Vec<usize> = (lo..=hi).collect();
        train_cuts.shuffle(&mut rng);
        train_cuts.truncate(cfg.train_cuts);
        train_cuts.sort_unstable();

        let cuts = train_cuts.into_iter().map(|c| (c, Part::Train)).chain([(l - 1, Part::Validation), (l, Part::Test)]);
        for (c, part) in cuts {
            let history = &user.items[..c];
            let seen: BTreeSet<usize> = history.iter().copied().collect();
            let positive = fresh_item(&mut rng, user.block_cluster[c - 1], per_cluster, &seen);
            let negatives = sample_negatives(&mut rng, cfg.num_items, &seen.iter().copied().chain([positive]).collect(), cfg.neg_ratio);
            let out = split.part_mut(part);
            out.push(TrainingInstance::new(history, cfg.max_len, positive, true, u, c as u64, group));
            for n in negatives {
                out.push(TrainingInstance::new(history, cfg.max_len, n, false, u, c as u64, group));
            }
            group += 1;
        }
        split.users.push(uid);
        users.push(user);
    }
    Ok((split, users))
}

struct LineReader<'t> {
    lines: std::iter::Enumerate<std::str::Lines<'t>>,
}

impl<'t> LineReader<'t> {
    fn next(&mut self, what: &str) -> Result<(usize, &'t str)> {
        self.lines.next().ok_or_else(|| Error::Data(format!("split file ends before {what}")))
    }

    /// `key<TAB>value` with a numeric value.
    fn field(&mut self, key: &str) -> Result<usize> {
        let (n, line) = self.next(key)?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix('\t'))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Data(format!("line {}: expected '{key}'", n + 1)))
    }
}

pub const SPLIT_HEADER: &str = "# surge-instances v1";

/// Fields: `item_seq valid_len target label user timestamp group`,
/// tab-separated, `item_seq` comma-separated.
pub fn write_instances(out: &mut String, instances: &[TrainingInstance]) {
    for inst in instances {
        let seq: Vec<String> = inst.item_seq.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            seq.join(","),
            inst.valid_len,
            inst.target,
            u8::from(inst.label),
            inst.user,
            inst.timestamp,
            inst.group
        );
    }
}

fn parse_instance(line: &str, max_len: usize, vocab: usize) -> std::result::Result<TrainingInstance, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 7 {
        return Err(format!("expected 7 fields, found {}", f.len()));
    }
    let num = |s: &str| s.parse::<u64>().map_err(|e| format!("'{s}': {e}"));
    let item_seq = f[0].split(',').map(|s| num(s).map(|v| v as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let inst = TrainingInstance {
        item_seq,
        valid_len: num(f[1])? as usize,
        target: num(f[2])? as usize,
        label: match f[3] {
            "1" => true,
            "0" => false,
            other => return Err(format!("label '{other}'")),
        },
        user: num(f[4])? as usize,
        timestamp: num(f[5])?,
        group: num(f[6])? as usize,
    };
    validate_instance(&inst, max_len, vocab)?;
    Ok(inst)
}

/// Checks padding discipline and index ranges.
pub fn validate_instance(inst: &TrainingInstance, max_len: usize, vocab: usize) -> std::result::Result<(), String> {
    if inst.item_seq.len() != max_len {
        return Err(format!("sequence length {} != max_len {max_len}", inst.item_seq.len()));
    }
    if inst.valid_len == 0 || inst.valid_len > max_len {
        return Err(format!("valid_len {} outside 1..={max_len}", inst.valid_len));
    }
    let pad = max_len - inst.valid_len;
    for (j, &item) in inst.item_seq.iter().enumerate() {
        if (item == PAD) != (j < pad) || item > vocab {
            return Err(format!("position {j} holds {item} with valid_len {}", inst.valid_len));
        }
    }
    if inst.target == PAD || inst.target > vocab {
        return Err(format!("target {} outside 1..={vocab}", inst.target));
    }
    Ok(())
}

impl DatasetSplit {
    /// Serialises the whole split into one document.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{SPLIT_HEADER}");
        let _ = writeln!(s, "max_len\t{}", self.max_len);
        let _ = writeln!(s, "item_vocab_size\t{}", self.item_vocab_size);
        let _ = writeln!(s, "users\t{}", self.users.len());
        for u in &self.users {
            let _ = writeln!(s, "{u}");
        }
        for (name, part) in self.parts() {
            let _ = writeln!(s, "[{name}]\t{}", part.len());
            write_instances(&mut s, part);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = LineReader { lines: text.lines().enumerate() };
        let (_, header) = lines.next("header")?;
        if header != SPLIT_HEADER {
            return Err(Error::Data(format!("unsupported split header '{header}'")));
        }
        let max_len = lines.field("max_len")?;
        let vocab = lines.field("item_vocab_size")?;
        let user_count = lines.field("users")?;
        let mut split = DatasetSplit { max_len, item_vocab_size: vocab, ..Default::default() };
        for _ in 0..user_count {
            split.users.push(lines.next("user ids")?.1.to_string());
        }
        for (part, key) in [(Part::Train, "[train]"), (Part::Validation, "[validation]"), (Part::Test, "[test]")] {
            let count = lines.field(key)?;
            for _ in 0..count {
                let (n, line) = lines.next("instances")?;
                let inst = parse_instance(line, max_len, vocab).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
                if inst.user >= user_count {
                    return Err(Error::Data(format!("line {}: user {} out of range", n + 1, inst.user)));
                }
                split.part_mut(part).push(inst);
            }
        }
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialised split.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
