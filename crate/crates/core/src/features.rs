//! Keyword, textual, and temporal feature extraction for the tabular models,
//! plus the 12-value temporal vector consumed by the rare-action classifier.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConversationThread, Message};

/// Bundled starter keyword database.
pub const STARTER_KEYWORDS: &str = include_str!("../assets/keywords.txt");

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("keyword db line {line}: {reason}")]
    KeywordSyntax { line: usize, reason: String },
    #[error("duplicate keyword group ({category}, {subcategory})")]
    DuplicateGroup { category: String, subcategory: String },
    #[error("keyword group ({category}, {subcategory}) has no keywords")]
    EmptyKeywords { category: String, subcategory: String },
    #[error("second_time {second} is earlier than first_time {first}")]
    TimeOrder { first: i64, second: i64 },
    #[error("expected a 2-message thread, got {0} messages")]
    WrongThreadLength(usize),
    #[error("schema file: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One (category, subcategory) keyword group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordGroup {
    pub category: String,
    pub subcategory: String,
    /// Lowercase; single words match whole tokens, phrases match substrings.
    pub keywords: Vec<String>,
}

/// Keyword groups in file order, with per-category feature naming.
#[derive(Debug, Clone, Default)]
pub struct KeywordDatabase {
    groups: Vec<KeywordGroup>,
    /// Categories in first-appearance order.
    categories: Vec<String>,
    prefix_overrides: HashMap<String, String>,
    total_overrides: HashMap<String, String>,
}

fn feature_token(s: &str) -> String {
    s.to_lowercase().replace(' ', "_")
}

impl KeywordDatabase {
    pub fn groups(&self) -> &[KeywordGroup] {
        &self.groups
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn contains_group(&self, category: &str, subcategory: &str) -> bool {
        self.groups
            .iter()
            .any(|g| g.category == category && g.subcategory == subcategory)
    }

    /// Feature-name prefix for a category (`political` for `Politics`).
    pub fn prefix(&self, category: &str) -> String {
        self.prefix_overrides
            .get(category)
            .cloned()
            .unwrap_or_else(|| feature_token(category))
    }

    /// Feature name of a group count: `<prefix>_<subcategory>_count`.
    pub fn group_feature_name(&self, group: &KeywordGroup) -> String {
        format!("{}_{}_count", self.prefix(&group.category), feature_token(&group.subcategory))
    }

    /// Feature name of a category total: `<prefix>_total_count` unless the
    /// file pins a legacy name with `!total`.
    pub fn total_feature_name(&self, category: &str) -> String {
        self.total_overrides
            .get(category)
            .cloned()
            .unwrap_or_else(|| format!("{}_total_count", self.prefix(category)))
    }

    /// Parses the `category / subcategory / keywords` record format.
    pub fn parse(text: &str) -> Result<KeywordDatabase, FeatureError> {
        let mut db = KeywordDatabase::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('!') {
                db.parse_directive(rest, i + 1)?;
                continue;
            }
            let parts: Vec<&str> = line.splitn(3, '/').map(str::trim).collect();
            if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
                return Err(FeatureError::KeywordSyntax {
                    line: i + 1,
                    reason: "expected `category / subcategory / keywords`".into(),
                });
            }
            let (category, subcategory) = (parts[0].to_string(), parts[1].to_string());
            if db.contains_group(&category, &subcategory) {
                return Err(FeatureError::DuplicateGroup { category, subcategory });
            }
            let keywords: Vec<String> = parts[2]
                .split(',')
                .map(|k| k.trim().to_lowercase())
                .filter(|k| !k.is_empty())
                .collect();
            if keywords.is_empty() {
                return Err(FeatureError::EmptyKeywords { category, subcategory });
            }
            if !db.categories.contains(&category) {
                db.categories.push(category.clone());
            }
            db.groups.push(KeywordGroup { category, subcategory, keywords });
        }
        Ok(db)
    }

    fn parse_directive(&mut self, rest: &str, line: usize) -> Result<(), FeatureError> {
        let syntax = |reason: &str| FeatureError::KeywordSyntax { line, reason: reason.into() };
        let (kind, args) = rest
            .split_once(char::is_whitespace)
            .ok_or_else(|| syntax("directive needs arguments"))?;
        let (category, value) = args
            .split_once('/')
            .map(|(c, v)| (c.trim().to_string(), v.trim().to_string()))
            .ok_or_else(|| syntax("expected `!directive Category / value`"))?;
        match kind {
            "prefix" => self.prefix_overrides.insert(category, value),
            "total" => self.total_overrides.insert(category, value),
            other => return Err(syntax(&format!("unknown directive `{other}`"))),
        };
        Ok(())
    }

    pub fn load(path: &Path) -> Result<KeywordDatabase, FeatureError> {
        KeywordDatabase::parse(&std::fs::read_to_string(path)?)
    }

    /// The bundled starter database.
    pub fn starter() -> KeywordDatabase {
        KeywordDatabase::parse(STARTER_KEYWORDS).expect("bundled keyword db must parse")
    }
}

/// Lowercased alphanumeric token runs.
fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Total keyword occurrences per group plus per-category totals, in schema
/// order (each category's groups followed by its total).
pub fn keyword_counts(text: &str, db: &KeywordDatabase) -> Vec<(String, u64)> {
    let lower = text.to_lowercase();
    let toks = tokens(text);
    let mut per_group: Vec<u64> = Vec::with_capacity(db.groups().len());
    for group in db.groups() {
        let mut count = 0u64;
        for kw in &group.keywords {
            if kw.contains(' ') {
                count += lower.match_indices(kw.as_str()).count() as u64;
            } else {
                count += toks.iter().filter(|t| *t == kw).count() as u64;
            }
        }
        per_group.push(count);
    }
    let mut out = Vec::new();
    for category in db.categories() {
        let mut total = 0u64;
        for (group, &count) in db.groups().iter().zip(&per_group) {
            if &group.category == category {
                out.push((db.group_feature_name(group), count));
                total += count;
            }
        }
        out.push((db.total_feature_name(category), total));
    }
    out
}

/// Surface statistics of one message text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TextFeatures {
    pub char_count: u64,
    pub word_count: u64,
    pub sentence_count: u64,
    pub question_count: u64,
    pub exclamation_count: u64,
    pub hashtag_count: u64,
    pub digit_count: u64,
    pub uppercase_ratio: f64,
    pub avg_word_length: f64,
    pub tag_username_count: u64,
    pub tag_url_count: u64,
}

pub const TEXT_FEATURE_NAMES: [&str; 11] = [
    "char_count",
    "word_count",
    "sentence_count",
    "question_count",
    "exclamation_count",
    "hashtag_count",
    "digit_count",
    "uppercase_ratio",
    "avg_word_length",
    "tag_username_count",
    "tag_url_count",
];

pub fn text_features(text: &str) -> TextFeatures {
    let char_count = text.chars().count() as u64;
    let words: Vec<&str> = text.split_whitespace().collect();
    let word_count = words.len() as u64;
    let avg_word_length = if words.is_empty() {
        0.0
    } else {
        words.iter().map(|w| w.chars().count() as f64).sum::<f64>() / words.len() as f64
    };

    // A sentence boundary is a maximal run of `.`, `!`, `?`.
    let mut sentence_count = 0u64;
    let mut in_run = false;
    for c in text.chars() {
        let boundary = matches!(c, '.' | '!' | '?');
        if boundary && !in_run {
            sentence_count += 1;
        }
        in_run = boundary;
    }
    if char_count > 0 {
        sentence_count = sentence_count.max(1);
    }

    let letters = text.chars().filter(|c| c.is_alphabetic()).count();
    let upper = text.chars().filter(|c| c.is_uppercase()).count();
    let uppercase_ratio = if letters == 0 { 0.0 } else { upper as f64 / letters as f64 };

    TextFeatures {
        char_count,
        word_count,
        sentence_count,
        question_count: text.chars().filter(|&c| c == '?').count() as u64,
        exclamation_count: text.chars().filter(|&c| c == '!').count() as u64,
        hashtag_count: text.chars().filter(|&c| c == '#').count() as u64,
        digit_count: text.chars().filter(|c| c.is_ascii_digit()).count() as u64,
        uppercase_ratio,
        avg_word_length,
        tag_username_count: text.match_indices("<USERNAME>").count() as u64,
        tag_url_count: text.match_indices("<URL>").count() as u64,
    }
}

/// Absolute times, their difference, and cumulative gap buckets.
///
/// All bucket flags are strict `<` tests on the difference except
/// `is_long_gap`, which is the complement of `is_within_quarter`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TemporalFeatures {
    pub first_relative_integer_time: i64,
    pub second_relative_integer_time: i64,
    pub time_diff: i64,
    pub is_immediate_reply: bool,
    pub is_fast_reply: bool,
    pub is_same_day: bool,
    pub is_within_week: bool,
    pub is_within_month: bool,
    pub is_within_quarter: bool,
    pub is_long_gap: bool,
    pub is_same_user: bool,
}

pub const TEMPORAL_FEATURE_NAMES: [&str; 12] = [
    "first_relative_integer_time",
    "second_relative_integer_time",
    "time_diff",
    "is_immediate_reply",
    "is_fast_reply",
    "is_same_day",
    "is_within_week",
    "is_within_month",
    "is_within_quarter",
    "is_long_gap",
    "is_same_user",
    "missing_second_time",
];

pub fn temporal_features(
    first_time: i64,
    second_time: i64,
    same_user: bool,
) -> Result<TemporalFeatures, FeatureError> {
    if second_time < first_time {
        return Err(FeatureError::TimeOrder { first: first_time, second: second_time });
    }
    let diff = second_time - first_time;
    Ok(TemporalFeatures {
        first_relative_integer_time: first_time,
        second_relative_integer_time: second_time,
        time_diff: diff,
        is_immediate_reply: diff < 60,
        is_fast_reply: diff < 3_600,
        is_same_day: diff < SECONDS_PER_DAY,
        is_within_week: diff < 7 * SECONDS_PER_DAY,
        is_within_month: diff < 30 * SECONDS_PER_DAY,
        is_within_quarter: diff < 90 * SECONDS_PER_DAY,
        is_long_gap: diff >= 90 * SECONDS_PER_DAY,
        is_same_user: same_user,
    })
}

/// Length of the temporal vector consumed by the rare-action classifier.
pub const NEURAL_TEMPORAL_DIM: usize = 12;

/// Unscaled 12-value temporal vector:
/// `[first, second, log1p(diff), sin/cos second time-of-day,
///   sin/cos first time-of-day, sin/cos second day-of-week,
///   is_immediate_reply, is_same_day, is_long_gap]`.
///
/// The three leading scalars are standardized by the consuming model with
/// statistics fit on its training split.
pub fn neural_temporal_vector(
    first_time: i64,
    second_time: i64,
) -> Result<[f64; NEURAL_TEMPORAL_DIM], FeatureError> {
    let t = temporal_features(first_time, second_time, false)?;
    let (sin_tod2, cos_tod2) = time_of_day_phase(second_time);
    let (sin_tod1, cos_tod1) = time_of_day_phase(first_time);
    let (sin_dow2, cos_dow2) = day_of_week_phase(second_time);
    Ok([
        first_time as f64,
        second_time as f64,
        (t.time_diff as f64).ln_1p(),
        sin_tod2,
        cos_tod2,
        sin_tod1,
        cos_tod1,
        sin_dow2,
        cos_dow2,
        t.is_immediate_reply as u8 as f64,
        t.is_same_day as u8 as f64,
        t.is_long_gap as u8 as f64,
    ])
}

fn time_of_day_phase(t: i64) -> (f64, f64) {
    let phase = (t.rem_euclid(SECONDS_PER_DAY)) as f64 / SECONDS_PER_DAY as f64 * TAU;
    (phase.sin(), phase.cos())
}

fn day_of_week_phase(t: i64) -> (f64, f64) {
    let day = t as f64 / SECONDS_PER_DAY as f64;
    let phase = (day % 7.0) / 7.0 * TAU;
    (phase.sin(), phase.cos())
}

/// Fixed, persisted column order for assembled feature rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    format_version: u32,
    columns: Vec<String>,
}

impl FeatureSchema {
    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureSchema, FeatureError> {
        let schema: FeatureSchema = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if schema.format_version != 1 {
            return Err(FeatureError::Schema(format!(
                "unsupported schema version {}",
                schema.format_version
            )));
        }
        Ok(schema)
    }
}

/// Assembles feature rows: text features of the first message, keyword
/// counts of the first message, then temporal features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    db: KeywordDatabase,
    schema: FeatureSchema,
}

impl FeatureExtractor {
    pub fn new(db: KeywordDatabase) -> FeatureExtractor {
        let mut columns: Vec<String> = TEXT_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        for category in db.categories() {
            for group in db.groups().iter().filter(|g| &g.category == category) {
                columns.push(db.group_feature_name(group));
            }
            columns.push(db.total_feature_name(category));
        }
        columns.extend(TEMPORAL_FEATURE_NAMES.iter().map(|s| s.to_string()));
        FeatureExtractor { db, schema: FeatureSchema { format_version: 1, columns } }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn db(&self) -> &KeywordDatabase {
        &self.db
    }

    /// Feature row for a 2-message thread.
    pub fn assemble(&self, thread: &ConversationThread) -> Result<Vec<f64>, FeatureError> {
        if thread.len() != 2 {
            return Err(FeatureError::WrongThreadLength(thread.len()));
        }
        let first = &thread.messages[0];
        let second = &thread.messages[1];
        self.assemble_query(first, Some((second.time, second.user_id.as_str())))
    }

    /// Feature row for a query with an optional responder event. Without a
    /// responder the time difference is zero and `missing_second_time` is set.
    pub fn assemble_query(
        &self,
        first: &Message,
        second: Option<(i64, &str)>,
    ) -> Result<Vec<f64>, FeatureError> {
        let text = first.text.as_deref().unwrap_or("");
        let tf = text_features(text);
        let (second_time, same_user, missing) = match second {
            Some((t, user)) => (t, user == first.user_id, false),
            None => (first.time, false, true),
        };
        let temporal = temporal_features(first.time, second_time, same_user)?;

        let mut row = Vec::with_capacity(self.schema.len());
        row.extend_from_slice(&[
            tf.char_count as f64,
            tf.word_count as f64,
            tf.sentence_count as f64,
            tf.question_count as f64,
            tf.exclamation_count as f64,
            tf.hashtag_count as f64,
            tf.digit_count as f64,
            tf.uppercase_ratio,
            tf.avg_word_length,
            tf.tag_username_count as f64,
            tf.tag_url_count as f64,
        ]);
        for (_, count) in keyword_counts(text, &self.db) {
            row.push(count as f64);
        }
        row.extend_from_slice(&[
            temporal.first_relative_integer_time as f64,
            temporal.second_relative_integer_time as f64,
            temporal.time_diff as f64,
            temporal.is_immediate_reply as u8 as f64,
            temporal.is_fast_reply as u8 as f64,
            temporal.is_same_day as u8 as f64,
            temporal.is_within_week as u8 as f64,
            temporal.is_within_month as u8 as f64,
            temporal.is_within_quarter as u8 as f64,
            temporal.is_long_gap as u8 as f64,
            temporal.is_same_user as u8 as f64,
            missing as u8 as f64,
        ]);
        debug_assert_eq!(row.len(), self.schema.len());
        Ok(row)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn extractors_are_pure(text in "\\PC{0,80}") {
            prop_assert_eq!(text_features(&text), text_features(&text));
            let db = KeywordDatabase::starter();
            prop_assert_eq!(keyword_counts(&text, &db), keyword_counts(&text, &db));
        }

        #[test]
        fn category_totals_equal_group_sums(text in "[a-zA-Z #!?]{0,120}") {
            let db = KeywordDatabase::starter();
            let counts = keyword_counts(&text, &db);
            for category in db.categories() {
                let total_name = db.total_feature_name(category);
                let total = counts.iter().find(|(n, _)| *n == total_name).unwrap().1;
                let sum: u64 = db
                    .groups()
                    .iter()
                    .filter(|g| &g.category == category)
                    .map(|g| {
                        let name = db.group_feature_name(g);
                        counts.iter().find(|(n, _)| *n == name).unwrap().1
                    })
                    .sum();
                prop_assert_eq!(total, sum);
            }
        }

        #[test]
        fn cyclical_pairs_unit_norm(first in 0i64..10_000_000, delta in 0i64..10_000_000) {
            let v = neural_temporal_vector(first, first + delta).unwrap();
            for (s, c) in [(3, 4), (5, 6), (7, 8)] {
                prop_assert!((v[s] * v[s] + v[c] * v[c] - 1.0).abs() < 1e-9);
            }
        }
    }
}
