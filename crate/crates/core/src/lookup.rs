//! Repeated-message vote database.
//!
//! For every distinct first message we keep one action histogram per persona
//! cluster plus the global sum. Queries try the cluster record first, then
//! the global record, each gated by a minimum vote count and a winner
//! percentage threshold (lowered when the winner is a rare action).

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::binio::{self, BinError};
use crate::corpus::{ActionLabel, ConversationThread, NUM_ACTIONS, NUM_CLUSTERS};

const MAGIC: &[u8; 4] = b"VOTE";
const VERSION: u32 = 1;

/// Action-count histogram for one message within one cluster (or globally).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VoteRecord {
    counts: [u64; NUM_ACTIONS],
}

impl VoteRecord {
    pub fn count(&self, action: ActionLabel) -> u64 {
        self.counts[action.index()]
    }

    pub fn add(&mut self, action: ActionLabel, votes: u64) {
        self.counts[action.index()] += votes;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    fn merge(&mut self, other: &VoteRecord) {
        for i in 0..NUM_ACTIONS {
            self.counts[i] += other.counts[i];
        }
    }
}

/// The most frequent action in a record and its share of the total votes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WinnerSummary {
    pub winner: ActionLabel,
    pub winner_pct: f64,
    pub total_votes: u64,
}

/// Returns the max-count action, breaking ties by global frequency rank.
pub fn winner(record: &VoteRecord) -> Result<WinnerSummary, LookupError> {
    let total = record.total();
    if total == 0 {
        return Err(LookupError::NoVotes);
    }
    // ActionLabel::ALL is ordered by frequency rank, so scanning with a
    // strict `>` keeps the higher-ranked action on ties.
    let mut best = ActionLabel::Follow;
    let mut best_count = 0u64;
    for a in ActionLabel::ALL {
        let c = record.count(a);
        if c > best_count {
            best = a;
            best_count = c;
        }
    }
    Ok(WinnerSummary {
        winner: best,
        winner_pct: best_count as f64 / total as f64,
        total_votes: total,
    })
}

/// Gates for the lookup strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LookupThresholds {
    pub min_votes: u64,
    pub cluster_pct: f64,
    pub global_pct: f64,
    /// Replaces `cluster_pct`/`global_pct` when the winner is a rare action.
    pub rare_pct: f64,
}

impl Default for LookupThresholds {
    fn default() -> Self {
        LookupThresholds { min_votes: 10, cluster_pct: 0.85, global_pct: 0.90, rare_pct: 0.70 }
    }
}

impl LookupThresholds {
    pub fn validate(&self) -> Result<(), LookupError> {
        if self.min_votes < 1 {
            return Err(LookupError::BadThreshold("min_votes must be >= 1"));
        }
        for (name, v) in [
            ("cluster_pct", self.cluster_pct),
            ("global_pct", self.global_pct),
            ("rare_pct", self.rare_pct),
        ] {
            if !(v > 0.5 && v <= 1.0) {
                return Err(LookupError::BadThresholdValue { name, value: v });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LookupStrategy {
    ClusterSpecific,
    GlobalFallback,
    NoMatch,
}

/// Outcome of a lookup query; `action` is present iff the strategy matched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LookupDecision {
    pub strategy: LookupStrategy,
    pub action: Option<ActionLabel>,
    pub summary: Option<WinnerSummary>,
}

impl LookupDecision {
    fn no_match() -> Self {
        LookupDecision { strategy: LookupStrategy::NoMatch, action: None, summary: None }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    per_cluster: Box<[VoteRecord; NUM_CLUSTERS]>,
    global: VoteRecord,
}

impl Default for Entry {
    fn default() -> Self {
        Entry {
            per_cluster: Box::new([VoteRecord::default(); NUM_CLUSTERS]),
            global: VoteRecord::default(),
        }
    }
}

/// Per-message, per-cluster action-vote histograms.
#[derive(Debug, Clone, Default)]
pub struct VoteTable {
    entries: HashMap<String, Entry>,
}

#[derive(Debug, Error)]
pub enum LookupError {
    #[error("record has no votes")]
    NoVotes,
    #[error("{0}")]
    BadThreshold(&'static str),
    #[error("{name} = {value} outside (0.5, 1.0]")]
    BadThresholdValue { name: &'static str, value: f64 },
    #[error("thread {index} is not a labeled 2-message thread: {reason}")]
    BadBuildInput { index: usize, reason: &'static str },
    #[error("global record inconsistent for message key {key:?}")]
    Inconsistent { key: String },
    #[error(transparent)]
    Bin(#[from] BinError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VoteTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `votes` observations of `action` for (message, cluster).
    /// Used by the builder and by test fixtures.
    pub fn insert_counts(&mut self, message: &str, cluster: u8, action: ActionLabel, votes: u64) {
        assert!((cluster as usize) < NUM_CLUSTERS, "cluster out of range");
        let entry = self.entries.entry(message.to_string()).or_default();
        entry.per_cluster[cluster as usize].add(action, votes);
        entry.global.add(action, votes);
    }

    pub fn cluster_record(&self, message: &str, cluster: u8) -> Option<&VoteRecord> {
        self.entries.get(message).map(|e| &e.per_cluster[cluster as usize])
    }

    pub fn global_record(&self, message: &str) -> Option<&VoteRecord> {
        self.entries.get(message).map(|e| &e.global)
    }

    pub fn messages(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Folds another table into this one (shard merge).
    pub fn merge(&mut self, other: VoteTable) {
        for (key, entry) in other.entries {
            let target = self.entries.entry(key).or_default();
            for c in 0..NUM_CLUSTERS {
                target.per_cluster[c].merge(&entry.per_cluster[c]);
            }
            target.global.merge(&entry.global);
        }
    }

    /// Verifies that every global record equals the sum of its cluster
    /// records. Run after build and after load.
    pub fn check_consistency(&self) -> Result<(), LookupError> {
        for (key, entry) in &self.entries {
            let mut sum = VoteRecord::default();
            for rec in entry.per_cluster.iter() {
                sum.merge(rec);
            }
            if sum != entry.global {
                return Err(LookupError::Inconsistent { key: key.clone() });
            }
        }
        Ok(())
    }

    /// Serializes the table: magic, version, entry count, then entries
    /// sorted by message key so output bytes are deterministic.
    pub fn save(&self, path: &Path) -> Result<(), LookupError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), LookupError> {
        binio::write_magic(w, MAGIC, VERSION)?;
        binio::write_u64(w, self.entries.len() as u64)?;
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        for key in keys {
            let entry = &self.entries[key];
            binio::write_string(w, key)?;
            for cluster in 0..NUM_CLUSTERS {
                let rec = &entry.per_cluster[cluster];
                // Sparse encoding: count of non-zero actions, then pairs.
                let nonzero = rec.counts.iter().filter(|&&c| c > 0).count() as u32;
                binio::write_u32(w, nonzero)?;
                for a in ActionLabel::ALL {
                    let c = rec.count(a);
                    if c > 0 {
                        binio::write_u8(w, a.index() as u8)?;
                        binio::write_u64(w, c)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VoteTable, LookupError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let table = VoteTable::read_from(&mut r)?;
        binio::expect_eof(&mut r)?;
        table.check_consistency()?;
        Ok(table)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<VoteTable, LookupError> {
        binio::read_magic(r, MAGIC, VERSION)?;
        let n = binio::read_u64(r)? as usize;
        let mut entries = HashMap::with_capacity(n);
        for _ in 0..n {
            let key = binio::read_string(r)?;
            let mut entry = Entry::default();
            for cluster in 0..NUM_CLUSTERS {
                let nonzero = binio::read_u32(r)?;
                if nonzero as usize > NUM_ACTIONS {
                    return Err(BinError::Corrupt("too many actions in record").into());
                }
                for _ in 0..nonzero {
                    let idx = binio::read_u8(r)? as usize;
                    let action = ActionLabel::from_index(idx)
                        .ok_or(BinError::Corrupt("bad action index"))?;
                    let votes = binio::read_u64(r)?;
                    entry.per_cluster[cluster].add(action, votes);
                    entry.global.add(action, votes);
                }
            }
            entries.insert(key, entry);
        }
        Ok(VoteTable { entries })
    }
}

/// Builds the vote table from labeled 2-message threads. Threads whose first
/// message has no text cannot be keyed and are skipped (counted).
#[derive(Debug, Default)]
pub struct BuildReport {
    pub threads_indexed: u64,
    pub skipped_no_text: u64,
}

pub fn build<'a, I>(threads: I) -> Result<(VoteTable, BuildReport), LookupError>
where
    I: IntoIterator<Item = &'a ConversationThread>,
{
    let mut table = VoteTable::default();
    let mut report = BuildReport::default();
    for (index, t) in threads.into_iter().enumerate() {
        if t.len() != 2 {
            return Err(LookupError::BadBuildInput { index, reason: "expected exactly 2 messages" });
        }
        let action = t
            .action
            .ok_or(LookupError::BadBuildInput { index, reason: "missing gold action" })?;
        match &t.first_message().text {
            Some(text) => {
                table.insert_counts(text, t.cluster, action, 1);
                report.threads_indexed += 1;
            }
            None => report.skipped_no_text += 1,
        }
    }
    table.check_consistency()?;
    Ok((table, report))
}

/// Applies the three lookup strategies in order.
///
/// 1. cluster record passes its gates -> `ClusterSpecific`
/// 2. else global record passes its gates -> `GlobalFallback`
/// 3. else -> `NoMatch`
///
/// A record passes when `total >= min_votes` and the winner percentage
/// reaches the effective threshold: `rare_pct` for a rare winner, otherwise
/// `cluster_pct` (stage 1) or `global_pct` (stage 2). A message absent from
/// the table is a `NoMatch`, not an error.
pub fn decide(
    table: &VoteTable,
    first_message: &str,
    cluster: u8,
    th: &LookupThresholds,
) -> Result<LookupDecision, LookupError> {
    th.validate()?;
    assert!((cluster as usize) < NUM_CLUSTERS, "cluster out of range");
    let entry = match table.entries.get(first_message) {
        Some(e) => e,
        None => return Ok(LookupDecision::no_match()),
    };

    let stages = [
        (&entry.per_cluster[cluster as usize], th.cluster_pct, LookupStrategy::ClusterSpecific),
        (&entry.global, th.global_pct, LookupStrategy::GlobalFallback),
    ];
    for (record, common_pct, strategy) in stages {
        if record.total() < th.min_votes {
            continue;
        }
        let summary = winner(record)?;
        let effective = if summary.winner.is_rare() { th.rare_pct } else { common_pct };
        if summary.winner_pct >= effective {
            return Ok(LookupDecision {
                strategy,
                action: Some(summary.winner),
                summary: Some(summary),
            });
        }
    }
    Ok(LookupDecision::no_match())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Message;

    fn thread2(text: &str, cluster: u8, action: ActionLabel) -> ConversationThread {
        ConversationThread::new(
            vec![
                Message { user_id: "a".into(), time: 0, text: Some(text.into()) },
                Message { user_id: "b".into(), time: 10, text: None },
            ],
            cluster,
            Some(action),
            None,
        )
        .unwrap()
    }

    /// The two pedagogical table rows used across lookup tests.
    fn fixture_table() -> VoteTable {
        let mut t = VoteTable::default();
        let puppy = "Here is a cute picture of a puppy";
        t.insert_counts(puppy, 0, ActionLabel::Like, 9172);
        t.insert_counts(puppy, 0, ActionLabel::Follow, 23);
        t.insert_counts(puppy, 1, ActionLabel::Like, 254);
        t.insert_counts(puppy, 2, ActionLabel::Like, 469);
        t.insert_counts(puppy, 2, ActionLabel::Follow, 11);

        let pizza = "I like pineapple on pizza";
        t.insert_counts(pizza, 0, ActionLabel::Block, 710);
        t.insert_counts(pizza, 0, ActionLabel::Unfollow, 2848);
        t.insert_counts(pizza, 1, ActionLabel::Like, 946);
        t.insert_counts(pizza, 1, ActionLabel::Follow, 671);
        t.insert_counts(pizza, 1, ActionLabel::Block, 20);
        t.insert_counts(pizza, 1, ActionLabel::Unfollow, 178);
        t.insert_counts(pizza, 2, ActionLabel::Like, 7894);
        t.insert_counts(pizza, 2, ActionLabel::Follow, 541);
        t
    }

    #[test]
    fn build_reproduces_fixture_counts() {
        let mut threads = Vec::new();
        let puppy = "Here is a cute picture of a puppy";
        for _ in 0..4 {
            threads.push(thread2(puppy, 0, ActionLabel::Like));
        }
        threads.push(thread2(puppy, 0, ActionLabel::Block));
        let (table, report) = build(&threads).unwrap();
        assert_eq!(report.threads_indexed, 5);
        let rec = table.cluster_record(puppy, 0).unwrap();
        assert_eq!(rec.count(ActionLabel::Like), 4);
        assert_eq!(rec.count(ActionLabel::Block), 1);
        assert_eq!(table.global_record(puppy).unwrap().total(), 5);
    }

    #[test]
    fn build_rejects_unlabeled_thread() {
        let mut t = thread2("m", 0, ActionLabel::Like);
        t.action = None;
        let err = build(std::iter::once(&t)).unwrap_err();
        assert!(matches!(err, LookupError::BadBuildInput { index: 0, .. }));
    }

    #[test]
    fn build_empty_stream() {
        let (table, report) = build(std::iter::empty()).unwrap();
        assert!(table.is_empty());
        assert_eq!(report.threads_indexed, 0);
    }

    #[test]
    fn winner_eighteen_likes_two_blocks() {
        let mut rec = VoteRecord::default();
        rec.add(ActionLabel::Like, 18);
        rec.add(ActionLabel::Block, 2);
        let w = winner(&rec).unwrap();
        assert_eq!(w.winner, ActionLabel::Like);
        assert!((w.winner_pct - 0.90).abs() < 1e-12);
        assert_eq!(w.total_votes, 20);
    }

    #[test]
    fn winner_single_vote() {
        let mut rec = VoteRecord::default();
        rec.add(ActionLabel::Follow, 1);
        let w = winner(&rec).unwrap();
        assert_eq!(w.winner, ActionLabel::Follow);
        assert_eq!(w.winner_pct, 1.0);
        assert_eq!(w.total_votes, 1);
    }

    #[test]
    fn winner_puppy_cluster_zero() {
        let table = fixture_table();
        let rec = table.cluster_record("Here is a cute picture of a puppy", 0).unwrap();
        let w = winner(&rec.clone()).unwrap();
        assert_eq!(w.winner, ActionLabel::Like);
        assert_eq!(w.total_votes, 9195);
        assert!((w.winner_pct - 9172.0 / 9195.0).abs() < 1e-12);
        assert!((w.winner_pct - 0.9975).abs() < 2e-4);
    }

    #[test]
    fn winner_empty_record_errors() {
        assert!(matches!(winner(&VoteRecord::default()), Err(LookupError::NoVotes)));
    }

    #[test]
    fn winner_tie_breaks_by_frequency_rank() {
        let mut rec = VoteRecord::default();
        rec.add(ActionLabel::Quote, 5);
        rec.add(ActionLabel::Unfollow, 5);
        // unfollow outranks quote in the global frequency ordering
        assert_eq!(winner(&rec).unwrap().winner, ActionLabel::Unfollow);
    }

    #[test]
    fn decide_cluster_specific() {
        let mut table = VoteTable::default();
        table.insert_counts("m", 3, ActionLabel::Like, 20);
        table.insert_counts("m", 3, ActionLabel::Follow, 1);
        let d = decide(&table, "m", 3, &LookupThresholds::default()).unwrap();
        assert_eq!(d.strategy, LookupStrategy::ClusterSpecific);
        assert_eq!(d.action, Some(ActionLabel::Like));
        let s = d.summary.unwrap();
        assert_eq!(s.total_votes, 21);
        assert!((s.winner_pct - 20.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn decide_global_fallback() {
        let mut table = VoteTable::default();
        // Cluster 3 has too few votes; the global pattern is decisive.
        table.insert_counts("m", 3, ActionLabel::Follow, 4);
        table.insert_counts("m", 7, ActionLabel::Follow, 91);
        table.insert_counts("m", 7, ActionLabel::Like, 5);
        let d = decide(&table, "m", 3, &LookupThresholds::default()).unwrap();
        assert_eq!(d.strategy, LookupStrategy::GlobalFallback);
        assert_eq!(d.action, Some(ActionLabel::Follow));
        assert!((d.summary.unwrap().winner_pct - 0.95).abs() < 1e-12);
    }

    #[test]
    fn decide_rare_winner_uses_lowered_threshold() {
        let mut table = VoteTable::default();
        table.insert_counts("m", 0, ActionLabel::Unfollow, 8);
        table.insert_counts("m", 0, ActionLabel::Like, 3);
        let d = decide(&table, "m", 0, &LookupThresholds::default()).unwrap();
        // 8/11 = 0.727 is below cluster_pct but above rare_pct.
        assert_eq!(d.strategy, LookupStrategy::ClusterSpecific);
        assert_eq!(d.action, Some(ActionLabel::Unfollow));
    }

    #[test]
    fn decide_absent_message_is_no_match() {
        let table = fixture_table();
        let d = decide(&table, "never seen", 0, &LookupThresholds::default()).unwrap();
        assert_eq!(d.strategy, LookupStrategy::NoMatch);
        assert_eq!(d.action, None);
        assert_eq!(d.summary, None);
    }

    #[test]
    fn decide_validates_thresholds() {
        let table = fixture_table();
        let th = LookupThresholds { cluster_pct: 0.4, ..Default::default() };
        assert!(decide(&table, "m", 0, &th).is_err());
        let th = LookupThresholds { min_votes: 0, ..Default::default() };
        assert!(decide(&table, "m", 0, &th).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let table = fixture_table();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("votes.bin");
        table.save(&path).unwrap();
        let loaded = VoteTable::load(&path).unwrap();
        assert_eq!(loaded.len(), table.len());
        for msg in table.messages() {
            for c in 0..NUM_CLUSTERS as u8 {
                assert_eq!(table.cluster_record(msg, c), loaded.cluster_record(msg, c));
            }
            assert_eq!(table.global_record(msg), loaded.global_record(msg));
        }
    }

    #[test]
    fn load_truncated_file_errors() {
        let table = fixture_table();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("votes.bin");
        table.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(VoteTable::load(&path).is_err());
    }

    #[test]
    fn load_wrong_magic_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("votes.bin");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(VoteTable::load(&path), Err(LookupError::Bin(BinError::BadMagic { .. }))));
    }

    #[test]
    fn global_record_is_sum_of_clusters() {
        let table = fixture_table();
        table.check_consistency().unwrap();
        let g = table.global_record("I like pineapple on pizza").unwrap();
        assert_eq!(g.count(ActionLabel::Like), 946 + 7894);
        assert_eq!(g.count(ActionLabel::Unfollow), 2848 + 178);
    }
}
