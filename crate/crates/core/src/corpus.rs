//! Conversation-thread records: parsing, validation, dataset statistics,
//! the reply simplification rule, and stratified fold assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of persona clusters in the corpus.
pub const NUM_CLUSTERS: usize = 25;

/// Number of distinct user actions.
pub const NUM_ACTIONS: usize = 12;

/// The 12 user actions, ordered by global training-corpus frequency
/// (most frequent first). This ordering is the canonical tie-breaker
/// throughout the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum ActionLabel {
    Follow = 0,
    Like = 1,
    Unfollow = 2,
    Reply = 3,
    Quote = 4,
    Unlike = 5,
    PostUpdate = 6,
    Repost = 7,
    Block = 8,
    PostDelete = 9,
    Unblock = 10,
    Unrepost = 11,
}

impl ActionLabel {
    /// All actions in frequency order.
    pub const ALL: [ActionLabel; NUM_ACTIONS] = [
        ActionLabel::Follow,
        ActionLabel::Like,
        ActionLabel::Unfollow,
        ActionLabel::Reply,
        ActionLabel::Quote,
        ActionLabel::Unlike,
        ActionLabel::PostUpdate,
        ActionLabel::Repost,
        ActionLabel::Block,
        ActionLabel::PostDelete,
        ActionLabel::Unblock,
        ActionLabel::Unrepost,
    ];

    /// The 10 rare actions: everything except `follow` and `like`,
    /// in frequency order.
    pub const RARE: [ActionLabel; 10] = [
        ActionLabel::Unfollow,
        ActionLabel::Reply,
        ActionLabel::Quote,
        ActionLabel::Unlike,
        ActionLabel::PostUpdate,
        ActionLabel::Repost,
        ActionLabel::Block,
        ActionLabel::PostDelete,
        ActionLabel::Unblock,
        ActionLabel::Unrepost,
    ];

    /// Canonical serialized spelling (lower snake case).
    pub fn as_str(self) -> &'static str {
        match self {
            ActionLabel::Follow => "follow",
            ActionLabel::Like => "like",
            ActionLabel::Unfollow => "unfollow",
            ActionLabel::Reply => "reply",
            ActionLabel::Quote => "quote",
            ActionLabel::Unlike => "unlike",
            ActionLabel::PostUpdate => "post_update",
            ActionLabel::Repost => "repost",
            ActionLabel::Block => "block",
            ActionLabel::PostDelete => "post_delete",
            ActionLabel::Unblock => "unblock",
            ActionLabel::Unrepost => "unrepost",
        }
    }

    /// Index in the frequency ordering; doubles as the array index used by
    /// count tables.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<ActionLabel> {
        ActionLabel::ALL.get(idx).copied()
    }

    /// True for the 10 actions other than `follow` and `like`.
    pub fn is_rare(self) -> bool {
        !matches!(self, ActionLabel::Follow | ActionLabel::Like)
    }

    /// Index within [`ActionLabel::RARE`], if rare.
    pub fn rare_index(self) -> Option<usize> {
        ActionLabel::RARE.iter().position(|&a| a == self)
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionLabel {
    type Err = CorpusError;

    /// Case-insensitive; accepts any capitalization of the canonical names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        ActionLabel::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == lower)
            .ok_or_else(|| CorpusError::UnknownAction(s.to_string()))
    }
}

impl Serialize for ActionLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ActionLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// One message in a conversation thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Message {
    pub user_id: String,
    /// Seconds relative to an unspecified corpus epoch; always non-negative.
    pub time: i64,
    /// Absent for actions that carry no text.
    pub text: Option<String>,
}

/// A conversation thread plus the responding user's persona cluster and,
/// for training data, the action they took and any text they wrote.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConversationThread {
    pub messages: Vec<Message>,
    pub cluster: u8,
    pub action: Option<ActionLabel>,
    pub text: Option<String>,
}

impl ConversationThread {
    /// Validates the structural invariants: at least one message,
    /// non-negative and non-decreasing timestamps, cluster in range.
    pub fn new(
        messages: Vec<Message>,
        cluster: u8,
        action: Option<ActionLabel>,
        text: Option<String>,
    ) -> Result<Self, CorpusError> {
        if messages.is_empty() {
            return Err(CorpusError::EmptyThread);
        }
        if cluster as usize >= NUM_CLUSTERS {
            return Err(CorpusError::ClusterOutOfRange(cluster as i64));
        }
        let mut prev = 0i64;
        for (i, m) in messages.iter().enumerate() {
            if m.time < 0 {
                return Err(CorpusError::NegativeTime { index: i, time: m.time });
            }
            if i > 0 && m.time < prev {
                return Err(CorpusError::TimeOrder { index: i });
            }
            prev = m.time;
        }
        Ok(ConversationThread { messages, cluster, action, text })
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn first_message(&self) -> &Message {
        &self.messages[0]
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("unknown action label `{0}`")]
    UnknownAction(String),
    #[error("cluster {0} out of range (expected 0..{max})", max = NUM_CLUSTERS - 1)]
    ClusterOutOfRange(i64),
    #[error("thread has no messages")]
    EmptyThread,
    #[error("message {index} has negative time {time}")]
    NegativeTime { index: usize, time: i64 },
    #[error("message {index} is earlier than its predecessor")]
    TimeOrder { index: usize },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("k-fold requires k >= 2, got {0}")]
    BadFoldCount(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Default, Deserialize)]
struct RawMessage {
    user_id: Option<String>,
    time: Option<i64>,
    #[serde(default)]
    text: Option<String>,
}

/// Superset of the nested schema and the legacy flat two-turn layout;
/// unknown fields are ignored.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawRecord {
    messages: Option<Vec<RawMessage>>,
    cluster: Option<i64>,
    action: Option<String>,
    text: Option<String>,
    // Legacy flat keys.
    first_message_time: Option<i64>,
    first_message_text: Option<String>,
    first_user_id: Option<String>,
    second_message_time: Option<i64>,
    second_user_id: Option<String>,
    second_user_cluster: Option<i64>,
    second_user_action: Option<String>,
    second_message_text: Option<String>,
}

/// Parses one JSON-Lines record into a validated thread.
///
/// Accepts the nested `messages` schema and, as a fallback, the legacy flat
/// two-turn layout (`first_message_time`, `second_user_cluster`, ...).
pub fn parse_thread_record(line: &str) -> Result<ConversationThread, CorpusError> {
    let raw: RawRecord = serde_json::from_str(line)?;
    if raw.messages.is_some() {
        parse_nested(raw)
    } else if raw.first_message_time.is_some() || raw.second_user_cluster.is_some() {
        parse_legacy(raw)
    } else {
        Err(CorpusError::MissingField("messages"))
    }
}

fn parse_action(s: Option<String>) -> Result<Option<ActionLabel>, CorpusError> {
    match s {
        None => Ok(None),
        Some(s) => Ok(Some(s.parse()?)),
    }
}

fn parse_cluster(c: Option<i64>, field: &'static str) -> Result<u8, CorpusError> {
    let c = c.ok_or(CorpusError::MissingField(field))?;
    if !(0..NUM_CLUSTERS as i64).contains(&c) {
        return Err(CorpusError::ClusterOutOfRange(c));
    }
    Ok(c as u8)
}

fn parse_nested(raw: RawRecord) -> Result<ConversationThread, CorpusError> {
    let raw_messages = raw.messages.expect("checked by caller");
    let mut messages = Vec::with_capacity(raw_messages.len());
    for m in raw_messages {
        messages.push(Message {
            user_id: m.user_id.ok_or(CorpusError::MissingField("user_id"))?,
            time: m.time.ok_or(CorpusError::MissingField("time"))?,
            text: m.text,
        });
    }
    let cluster = parse_cluster(raw.cluster, "cluster")?;
    ConversationThread::new(messages, cluster, parse_action(raw.action)?, raw.text)
}

fn parse_legacy(raw: RawRecord) -> Result<ConversationThread, CorpusError> {
    let first = Message {
        user_id: raw.first_user_id.ok_or(CorpusError::MissingField("first_user_id"))?,
        time: raw
            .first_message_time
            .ok_or(CorpusError::MissingField("first_message_time"))?,
        text: raw.first_message_text,
    };
    let second = Message {
        user_id: raw.second_user_id.ok_or(CorpusError::MissingField("second_user_id"))?,
        time: raw
            .second_message_time
            .ok_or(CorpusError::MissingField("second_message_time"))?,
        // The responder's text is the prediction target, not thread input.
        text: None,
    };
    let cluster = parse_cluster(raw.second_user_cluster, "second_user_cluster")?;
    ConversationThread::new(
        vec![first, second],
        cluster,
        parse_action(raw.second_user_action)?,
        raw.second_message_text,
    )
}

/// Reads a JSONL file of thread records; errors carry the 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<ConversationThread>, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_jsonl_from(BufReader::new(file))
}

pub fn read_jsonl_from<R: Read>(reader: BufReader<R>) -> Result<Vec<ConversationThread>, CorpusError> {
    let mut threads = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_thread_record(&line) {
            Ok(t) => threads.push(t),
            Err(e) => {
                return Err(CorpusError::AtLine { line: i + 1, source: Box::new(e) });
            }
        }
    }
    Ok(threads)
}

pub fn write_jsonl(path: &Path, threads: &[ConversationThread]) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in threads {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Per-action and per-cluster counts over a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub action_counts: [u64; NUM_ACTIONS],
    /// Threads without a gold action (legal outside trainer inputs).
    pub unlabeled: u64,
    pub cluster_counts: [u64; NUM_CLUSTERS],
    pub total_threads: u64,
}

impl DatasetStats {
    pub fn labeled_total(&self) -> u64 {
        self.action_counts.iter().sum()
    }

    /// Percentage of labeled threads carrying `action`; `None` when the
    /// corpus has no labeled threads.
    pub fn percentage(&self, action: ActionLabel) -> Option<f64> {
        let total = self.labeled_total();
        if total == 0 {
            None
        } else {
            Some(self.action_counts[action.index()] as f64 / total as f64 * 100.0)
        }
    }

    /// (action, count, percentage) rows in frequency order; empty when the
    /// corpus has no labeled threads.
    pub fn percentage_table(&self) -> Vec<(ActionLabel, u64, f64)> {
        if self.labeled_total() == 0 {
            return Vec::new();
        }
        ActionLabel::ALL
            .iter()
            .map(|&a| (a, self.action_counts[a.index()], self.percentage(a).unwrap()))
            .collect()
    }

    pub fn merge(&mut self, other: &DatasetStats) {
        for i in 0..NUM_ACTIONS {
            self.action_counts[i] += other.action_counts[i];
        }
        for i in 0..NUM_CLUSTERS {
            self.cluster_counts[i] += other.cluster_counts[i];
        }
        self.unlabeled += other.unlabeled;
        self.total_threads += other.total_threads;
    }
}

/// Counts every gold action; unlabeled threads land in a separate bucket.
pub fn dataset_stats<'a, I>(threads: I) -> DatasetStats
where
    I: IntoIterator<Item = &'a ConversationThread>,
{
    let mut stats = DatasetStats::default();
    for t in threads {
        stats.total_threads += 1;
        stats.cluster_counts[t.cluster as usize] += 1;
        match t.action {
            Some(a) => stats.action_counts[a.index()] += 1,
            None => stats.unlabeled += 1,
        }
    }
    stats
}

/// A thread of three or more messages whose gold action was not `reply`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplifyViolation {
    pub index: usize,
    pub action: Option<ActionLabel>,
}

/// Result of the training-data simplification rule.
#[derive(Debug, Clone, Default)]
pub struct SimplifyOutcome {
    /// Exactly the 2-message threads of the input, in input order.
    pub kept: Vec<ConversationThread>,
    /// How many threads had 3 or more messages (handled by the reply rule).
    pub rule_hits: u64,
    /// Threads of length >= 3 whose action was not `reply`. The rule assumes
    /// these do not occur; they are reported rather than silently dropped.
    pub violations: Vec<SimplifyViolation>,
    /// Threads with fewer than 2 messages (not expected in training data).
    pub undersized: u64,
}

/// Splits a training corpus into the 2-message threads kept for model
/// training and the count of longer threads covered by the reply rule.
pub fn simplify_for_action_task(threads: Vec<ConversationThread>) -> SimplifyOutcome {
    let mut out = SimplifyOutcome::default();
    for (index, t) in threads.into_iter().enumerate() {
        match t.len() {
            2 => out.kept.push(t),
            0 | 1 => out.undersized += 1,
            _ => {
                out.rule_hits += 1;
                if t.action != Some(ActionLabel::Reply) {
                    out.violations.push(SimplifyViolation { index, action: t.action });
                }
            }
        }
    }
    out
}

/// Assigns each sample to one of `k` folds, stratified on an arbitrary
/// label key. Per-class fold counts differ by at most one; classes smaller
/// than `k` are dealt round-robin. Deterministic for a given seed.
pub fn stratified_fold_indices<L: Ord + Clone>(
    labels: &[L],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, CorpusError> {
    if k < 2 {
        return Err(CorpusError::BadFoldCount(k));
    }
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    // Rotating the deal start distributes per-class remainders evenly
    // across folds.
    let mut offset = 0usize;
    for indices in groups.values() {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        for (i, idx) in shuffled.iter().enumerate() {
            folds[(i + offset) % k].push(*idx);
        }
        offset = (offset + shuffled.len()) % k;
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Stratified k-fold over threads, keyed on the gold action.
pub fn stratified_kfold(
    threads: &[ConversationThread],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, CorpusError> {
    let labels: Vec<Option<ActionLabel>> = threads.iter().map(|t| t.action).collect();
    stratified_fold_indices(&labels, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(user: &str, time: i64, text: Option<&str>) -> Message {
        Message { user_id: user.into(), time, text: text.map(String::from) }
    }

    pub(crate) fn thread2(
        text: &str,
        cluster: u8,
        action: ActionLabel,
        t1: i64,
        t2: i64,
    ) -> ConversationThread {
        ConversationThread::new(
            vec![msg("u1", t1, Some(text)), msg("u2", t2, None)],
            cluster,
            Some(action),
            None,
        )
        .unwrap()
    }

    const TABLE1_RECORD: &str = r#"{
        "messages": [
            {"user_id": "dd4724", "time": 3885851, "text": "Trump was filmed yesterday clearly ..."},
            {"user_id": "4ffd33", "time": 8012737, "text": null}
        ],
        "cluster": 17,
        "action": "FOLLOW",
        "text": null
    }"#;

    #[test]
    fn parses_two_turn_record() {
        let line = TABLE1_RECORD.replace('\n', " ");
        let t = parse_thread_record(&line).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.cluster, 17);
        assert_eq!(t.action, Some(ActionLabel::Follow));
        assert_eq!(t.messages[0].time, 3_885_851);
        assert_eq!(t.messages[1].time, 8_012_737);
        assert_eq!(t.messages[1].text, None);
    }

    #[test]
    fn parses_legacy_flat_record() {
        let line = r#"{"first_message_time": 3885851, "first_message_text": "Trump was filmed yesterday clearly ...", "first_user_id": "dd4724", "second_message_time": 8012737, "second_user_id": "4ffd33", "second_user_cluster": 17, "second_user_action": "FOLLOW", "second_message_text": null}"#;
        let t = parse_thread_record(line).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.cluster, 17);
        assert_eq!(t.action, Some(ActionLabel::Follow));
        assert_eq!(t.messages[0].text.as_deref(), Some("Trump was filmed yesterday clearly ..."));
    }

    #[test]
    fn parses_single_message_query() {
        let line = r#"{"messages":[{"user_id":"a","time":5,"text":"hi"}],"cluster":0,"action":null,"text":null}"#;
        let t = parse_thread_record(line).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.action, None);
    }

    #[test]
    fn cluster_25_is_rejected() {
        let line = r#"{"messages":[{"user_id":"a","time":5,"text":"hi"}],"cluster":25}"#;
        let err = parse_thread_record(line).unwrap_err();
        assert!(matches!(err, CorpusError::ClusterOutOfRange(25)));
    }

    #[test]
    fn missing_field_is_named() {
        let line = r#"{"messages":[{"user_id":"a","text":"hi"}],"cluster":3}"#;
        let err = parse_thread_record(line).unwrap_err();
        assert!(matches!(err, CorpusError::MissingField("time")));

        let line = r#"{"cluster": 3}"#;
        let err = parse_thread_record(line).unwrap_err();
        assert!(matches!(err, CorpusError::MissingField("messages")));
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let data = "{\"messages\":[{\"user_id\":\"a\",\"time\":1}],\"cluster\":1}\nnot json\n";
        let err = read_jsonl_from(BufReader::new(data.as_bytes())).unwrap_err();
        match err {
            CorpusError::AtLine { line, source } => {
                assert_eq!(line, 2);
                assert!(matches!(*source, CorpusError::Json(_)));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let line = r#"{"messages":[{"user_id":"a","time":1,"text":"x","lang":"en"}],"cluster":2,"extra":42}"#;
        assert!(parse_thread_record(line).is_ok());
    }

    #[test]
    fn timestamps_must_be_ordered() {
        let bad = ConversationThread::new(
            vec![msg("a", 10, None), msg("b", 5, None)],
            0,
            None,
            None,
        );
        assert!(matches!(bad, Err(CorpusError::TimeOrder { index: 1 })));

        let neg = ConversationThread::new(vec![msg("a", -1, None)], 0, None, None);
        assert!(matches!(neg, Err(CorpusError::NegativeTime { .. })));
    }

    #[test]
    fn action_parse_is_case_insensitive_and_canonical() {
        assert_eq!("FOLLOW".parse::<ActionLabel>().unwrap(), ActionLabel::Follow);
        assert_eq!("Post_Update".parse::<ActionLabel>().unwrap(), ActionLabel::PostUpdate);
        assert_eq!(ActionLabel::PostDelete.as_str(), "post_delete");
        assert!("retweet".parse::<ActionLabel>().is_err());
    }

    #[test]
    fn rare_set_is_the_ten_non_common_actions() {
        assert_eq!(ActionLabel::RARE.len(), 10);
        assert!(!ActionLabel::Follow.is_rare());
        assert!(!ActionLabel::Like.is_rare());
        for a in ActionLabel::RARE {
            assert!(a.is_rare());
        }
        assert_eq!(ActionLabel::RARE[0], ActionLabel::Unfollow);
    }

    #[test]
    fn round_trip_preserves_thread() {
        let line = TABLE1_RECORD.replace('\n', " ");
        let t = parse_thread_record(&line).unwrap();
        let serialized = serde_json::to_string(&t).unwrap();
        let again = parse_thread_record(&serialized).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn stats_count_actions_and_percentages() {
        let threads = vec![
            thread2("a", 0, ActionLabel::Follow, 0, 1),
            thread2("b", 1, ActionLabel::Follow, 0, 1),
            thread2("c", 2, ActionLabel::Like, 0, 1),
        ];
        let stats = dataset_stats(&threads);
        assert_eq!(stats.action_counts[ActionLabel::Follow.index()], 2);
        let f = stats.percentage(ActionLabel::Follow).unwrap();
        let l = stats.percentage(ActionLabel::Like).unwrap();
        assert!((f - 66.6667).abs() < 1e-3);
        assert!((l - 33.3333).abs() < 1e-3);
        let sum: f64 = stats.percentage_table().iter().map(|(_, _, p)| p).sum();
        assert!((sum - 100.0).abs() < 0.01);
    }

    #[test]
    fn stats_empty_stream() {
        let stats = dataset_stats(std::iter::empty());
        assert_eq!(stats.total_threads, 0);
        assert!(stats.percentage_table().is_empty());
        assert_eq!(stats.percentage(ActionLabel::Follow), None);
    }

    #[test]
    fn stats_unlabeled_bucket() {
        let mut t = thread2("a", 0, ActionLabel::Like, 0, 1);
        t.action = None;
        let stats = dataset_stats(std::iter::once(&t));
        assert_eq!(stats.unlabeled, 1);
        assert_eq!(stats.labeled_total(), 0);
    }

    fn thread_n(n: usize, action: ActionLabel) -> ConversationThread {
        let messages = (0..n).map(|i| msg("u", i as i64, Some("m"))).collect();
        ConversationThread::new(messages, 0, Some(action), None).unwrap()
    }

    #[test]
    fn simplify_keeps_length_two_and_counts_hits() {
        let mut threads = Vec::new();
        for _ in 0..6 {
            threads.push(thread_n(2, ActionLabel::Like));
        }
        for _ in 0..4 {
            threads.push(thread_n(3, ActionLabel::Reply));
        }
        let out = simplify_for_action_task(threads);
        assert_eq!(out.kept.len(), 6);
        assert_eq!(out.rule_hits, 4);
        assert!(out.violations.is_empty());
        assert!(out.kept.iter().all(|t| t.len() == 2));
    }

    #[test]
    fn simplify_reports_non_reply_violations() {
        let threads = vec![thread_n(3, ActionLabel::Like), thread_n(4, ActionLabel::Reply)];
        let out = simplify_for_action_task(threads);
        assert_eq!(out.rule_hits, 2);
        assert_eq!(out.violations.len(), 1);
        assert_eq!(out.violations[0].index, 0);
        assert_eq!(out.violations[0].action, Some(ActionLabel::Like));
    }

    #[test]
    fn simplify_identity_on_all_length_two() {
        let threads: Vec<_> = (0..5).map(|_| thread_n(2, ActionLabel::Follow)).collect();
        let out = simplify_for_action_task(threads.clone());
        assert_eq!(out.kept, threads);
        assert_eq!(out.rule_hits, 0);
    }

    #[test]
    fn kfold_balances_classes() {
        // 60/30/10 over k=5 should give exactly 12/6/2 per fold.
        let mut labels = Vec::new();
        labels.extend(std::iter::repeat(0u8).take(60));
        labels.extend(std::iter::repeat(1u8).take(30));
        labels.extend(std::iter::repeat(2u8).take(10));
        let folds = stratified_fold_indices(&labels, 5, 7).unwrap();
        for fold in &folds {
            assert_eq!(fold.len(), 20);
            let c0 = fold.iter().filter(|&&i| labels[i] == 0).count();
            let c1 = fold.iter().filter(|&&i| labels[i] == 1).count();
            let c2 = fold.iter().filter(|&&i| labels[i] == 2).count();
            assert_eq!((c0, c1, c2), (12, 6, 2));
        }
    }

    #[test]
    fn kfold_rejects_k_below_two() {
        let labels = vec![0u8; 10];
        assert!(matches!(
            stratified_fold_indices(&labels, 1, 0),
            Err(CorpusError::BadFoldCount(1))
        ));
    }

    #[test]
    fn kfold_is_deterministic() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 3) as u8).collect();
        let a = stratified_fold_indices(&labels, 5, 99).unwrap();
        let b = stratified_fold_indices(&labels, 5, 99).unwrap();
        assert_eq!(a, b);
        let c = stratified_fold_indices(&labels, 5, 100).unwrap();
        assert_ne!(a, c, "different seed should shuffle differently");
    }

    #[test]
    fn kfold_handles_classes_smaller_than_k() {
        // 2 samples of a rare class over k=5: dealt round-robin, no error.
        let mut labels = vec![0u8; 20];
        labels.push(1);
        labels.push(1);
        let folds = stratified_fold_indices(&labels, 5, 3).unwrap();
        let total: usize = folds.iter().map(|f| f.len()).sum();
        assert_eq!(total, 22);
        let rare_per_fold: Vec<usize> = folds
            .iter()
            .map(|f| f.iter().filter(|&&i| labels[i] == 1).count())
            .collect();
        assert_eq!(rare_per_fold.iter().sum::<usize>(), 2);
        assert!(rare_per_fold.iter().all(|&c| c <= 1));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn arb_thread() -> impl Strategy<Value = ConversationThread> {
        (
            proptest::collection::vec((0i64..1_000_000, proptest::option::of("[a-z ]{0,20}")), 1..5),
            0u8..25,
            proptest::option::of(0usize..NUM_ACTIONS),
        )
            .prop_map(|(msgs, cluster, action)| {
                let mut time = 0i64;
                let messages = msgs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (dt, text))| {
                        time += dt;
                        Message { user_id: format!("u{i}"), time, text }
                    })
                    .collect();
                ConversationThread::new(
                    messages,
                    cluster,
                    action.map(|i| ActionLabel::from_index(i).unwrap()),
                    None,
                )
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(t in arb_thread()) {
            let line = serde_json::to_string(&t).unwrap();
            let again = parse_thread_record(&line).unwrap();
            prop_assert_eq!(t, again);
        }

        #[test]
        fn percentages_sum_to_100(actions in proptest::collection::vec(0usize..NUM_ACTIONS, 1..200)) {
            let threads: Vec<ConversationThread> = actions
                .iter()
                .map(|&a| {
                    ConversationThread::new(
                        vec![Message { user_id: "u".into(), time: 0, text: None }],
                        0,
                        Some(ActionLabel::from_index(a).unwrap()),
                        None,
                    )
                    .unwrap()
                })
                .collect();
            let stats = dataset_stats(&threads);
            let sum: f64 = stats.percentage_table().iter().map(|(_, _, p)| p).sum();
            prop_assert!((sum - 100.0).abs() < 0.01);
        }

        #[test]
        fn folds_partition_input(
            labels in proptest::collection::vec(0u8..4, 10..120),
            k in 2usize..6,
            seed in 0u64..1000,
        ) {
            let folds = stratified_fold_indices(&labels, k, seed).unwrap();
            let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
            all.sort_unstable();
            let expected: Vec<usize> = (0..labels.len()).collect();
            prop_assert_eq!(all, expected, "folds must be disjoint and cover the input");
            // Per-class counts differ by at most 1 across folds.
            for class in 0u8..4 {
                let counts: Vec<usize> = folds
                    .iter()
                    .map(|f| f.iter().filter(|&&i| labels[i] == class).count())
                    .collect();
                let min = counts.iter().min().unwrap();
                let max = counts.iter().max().unwrap();
                prop_assert!(max - min <= 1);
            }
        }

        #[test]
        fn simplify_partitions_threads(lens in proptest::collection::vec(2usize..5, 0..50)) {
            let threads: Vec<ConversationThread> = lens
                .iter()
                .map(|&n| {
                    let messages = (0..n)
                        .map(|i| Message { user_id: "u".into(), time: i as i64, text: None })
                        .collect();
                    ConversationThread::new(messages, 0, Some(ActionLabel::Reply), None).unwrap()
                })
                .collect();
            let total = threads.len() as u64;
            let out = simplify_for_action_task(threads);
            prop_assert!(out.kept.iter().all(|t| t.len() == 2));
            prop_assert_eq!(out.kept.len() as u64 + out.rule_hits + out.undersized, total);
        }
    }
}
