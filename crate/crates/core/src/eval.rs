//! Scoring: confusion matrices, per-class/macro/weighted F1, cosine
//! similarity of generated replies, and full run reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ActionLabel, ConversationThread};
use crate::encoder::{EncoderError, TextEncoder};
use crate::gbdt::coarsen;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {preds} predictions vs {golds} golds")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("label `{0}` is not in the declared label set")]
    UnknownLabel(String),
    #[error("prediction index {0} is out of range")]
    BadIndex(usize),
    #[error("duplicate prediction index {0}")]
    DuplicateIndex(usize),
    #[error("gold thread {0} has no action label")]
    UnlabeledGold(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Square count matrix over a declared label set; rows are gold labels,
/// columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn count(&self, gold: &str, pred: &str) -> u64 {
        let g = self.labels.iter().position(|l| l == gold).expect("unknown gold label");
        let p = self.labels.iter().position(|l| l == pred).expect("unknown pred label");
        self.counts[g][p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, gold: &str) -> u64 {
        let g = self.labels.iter().position(|l| l == gold).expect("unknown gold label");
        self.counts[g].iter().sum()
    }
}

/// Tallies (gold, pred) pairs over `label_set`.
pub fn confusion(
    preds: &[&str],
    golds: &[&str],
    label_set: &[&str],
) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    let index = |label: &str| {
        label_set
            .iter()
            .position(|l| *l == label)
            .ok_or_else(|| EvalError::UnknownLabel(label.to_string()))
    };
    let n = label_set.len();
    let mut counts = vec![vec![0u64; n]; n];
    for (p, g) in preds.iter().zip(golds) {
        counts[index(g)?][index(p)?] += 1;
    }
    Ok(ConfusionMatrix { labels: label_set.iter().map(|s| s.to_string()).collect(), counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class precision/recall/F1 plus macro and support-weighted means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub classes: Vec<ClassScore>,
    /// Unweighted mean over all declared classes (zero-support included).
    pub macro_f1: f64,
    /// Support-weighted mean.
    pub weighted_f1: f64,
}

impl F1Report {
    /// Macro mean over classes that actually occur in the gold labels.
    pub fn macro_f1_excluding_zero_support(&self) -> f64 {
        let present: Vec<&ClassScore> = self.classes.iter().filter(|c| c.support > 0).collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| c.f1).sum::<f64>() / present.len() as f64
        }
    }
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class F1 with 0/0 treated as 0, macro over the declared label set,
/// weighted by gold support.
pub fn f1_report(m: &ConfusionMatrix) -> F1Report {
    let n = m.labels.len();
    let total = m.total();
    let mut classes = Vec::with_capacity(n);
    for c in 0..n {
        let tp = m.counts[c][c] as f64;
        let fp: f64 = (0..n).filter(|&g| g != c).map(|g| m.counts[g][c] as f64).sum();
        let fn_: f64 = (0..n).filter(|&p| p != c).map(|p| m.counts[c][p] as f64).sum();
        let precision = safe_div(tp, tp + fp);
        let recall = safe_div(tp, tp + fn_);
        let f1 = safe_div(2.0 * precision * recall, precision + recall);
        classes.push(ClassScore {
            label: m.labels[c].clone(),
            precision,
            recall,
            f1,
            support: m.counts[c].iter().sum(),
        });
    }
    let macro_f1 = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| c.f1).sum::<f64>() / classes.len() as f64
    };
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        classes.iter().map(|c| c.support as f64 / total as f64 * c.f1).sum()
    };
    F1Report { classes, macro_f1, weighted_f1 }
}

/// Cosine similarity of two embedded texts. `degenerate` flags a zero-vector
/// embedding, in which case the score is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CosineScore {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(
    a: &str,
    b: &str,
    provider: &dyn TextEncoder,
) -> Result<CosineScore, EvalError> {
    let u = provider.embed(a)?;
    let v = provider.embed(b)?;
    let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        Ok(CosineScore { value: 0.0, degenerate: true })
    } else {
        Ok(CosineScore { value: dot / (nu * nv), degenerate: false })
    }
}

/// One prediction row as emitted by the predict stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub action: ActionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<String>,
}

/// One generated reply row, keyed by prediction index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyRow {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RareReport {
    pub per_class: Vec<ClassScore>,
    /// Mean F1 over all 10 rare classes, zero-support classes included.
    pub macro_f1_with_zero_support: f64,
    /// Mean F1 over rare classes that occur in the gold labels.
    pub macro_f1_without_zero_support: f64,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub min: f64,
    pub max: f64,
    pub avg: f64,
}

fn spread(values: &[f64]) -> Option<Spread> {
    if values.is_empty() {
        return None;
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(Spread { min, max, avg: values.iter().sum::<f64>() / values.len() as f64 })
}

/// Coarse-label scores computed per cluster and pooled, since both
/// aggregations are informative and they can differ substantially.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerClusterReport {
    pub clusters_evaluated: usize,
    pub pooled_macro_f1: f64,
    pub pooled_weighted_f1: f64,
    pub macro_f1: Option<Spread>,
    pub weighted_f1: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub provider: String,
    pub pairs_scored: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Pairs where an embedding degenerated to the zero vector.
    pub zero_flagged: usize,
}

/// Full evaluation of a prediction run against gold threads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub pairs: usize,
    pub full: F1Report,
    pub coarse: F1Report,
    pub rare: RareReport,
    pub per_cluster: PerClusterReport,
    pub route_counts: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilarityReport>,
}

/// Scores predictions against gold threads; reply similarity is computed
/// when both replies and an embedding provider are supplied.
pub fn evaluate_run(
    preds: &[PredictionRow],
    golds: &[ConversationThread],
    replies: Option<&[ReplyRow]>,
    provider: Option<&dyn TextEncoder>,
) -> Result<RunReport, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    let mut seen = vec![false; golds.len()];
    for p in preds {
        if p.index >= golds.len() {
            return Err(EvalError::BadIndex(p.index));
        }
        if seen[p.index] {
            return Err(EvalError::DuplicateIndex(p.index));
        }
        seen[p.index] = true;
    }

    let mut pred_actions = vec![ActionLabel::Follow; golds.len()];
    for p in preds {
        pred_actions[p.index] = p.action;
    }
    let mut gold_actions = Vec::with_capacity(golds.len());
    for (i, g) in golds.iter().enumerate() {
        gold_actions.push(g.action.ok_or(EvalError::UnlabeledGold(i))?);
    }

    // Full 12-action report.
    let all_names: Vec<&str> = ActionLabel::ALL.iter().map(|a| a.as_str()).collect();
    let pred_names: Vec<&str> = pred_actions.iter().map(|a| a.as_str()).collect();
    let gold_names: Vec<&str> = gold_actions.iter().map(|a| a.as_str()).collect();
    let full_matrix = confusion(&pred_names, &gold_names, &all_names)?;
    let full = f1_report(&full_matrix);

    // Coarse 3-label report.
    let coarse_names = ["follow", "like", "other"];
    let pred_coarse: Vec<&str> = pred_actions.iter().map(|&a| coarsen(a).as_str()).collect();
    let gold_coarse: Vec<&str> = gold_actions.iter().map(|&a| coarsen(a).as_str()).collect();
    let coarse_matrix = confusion(&pred_coarse, &gold_coarse, &coarse_names)?;
    let coarse = f1_report(&coarse_matrix);

    // Rare-action report, aggregated from the full matrix's per-class rows.
    let rare_scores: Vec<ClassScore> = full
        .classes
        .iter()
        .filter(|c| c.label.parse::<ActionLabel>().map(ActionLabel::is_rare).unwrap_or(false))
        .cloned()
        .collect();
    let rare_support: u64 = rare_scores.iter().map(|c| c.support).sum();
    let rare = RareReport {
        macro_f1_with_zero_support: rare_scores.iter().map(|c| c.f1).sum::<f64>()
            / rare_scores.len() as f64,
        macro_f1_without_zero_support: {
            let present: Vec<&ClassScore> =
                rare_scores.iter().filter(|c| c.support > 0).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|c| c.f1).sum::<f64>() / present.len() as f64
            }
        },
        weighted_f1: if rare_support == 0 {
            0.0
        } else {
            rare_scores
                .iter()
                .map(|c| c.support as f64 / rare_support as f64 * c.f1)
                .sum()
        },
        per_class: rare_scores,
    };

    // Per-cluster coarse scores.
    let mut macro_per_cluster = Vec::new();
    let mut weighted_per_cluster = Vec::new();
    for cluster in 0..crate::corpus::NUM_CLUSTERS as u8 {
        let idx: Vec<usize> =
            (0..golds.len()).filter(|&i| golds[i].cluster == cluster).collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<&str> = idx.iter().map(|&i| pred_coarse[i]).collect();
        let g: Vec<&str> = idx.iter().map(|&i| gold_coarse[i]).collect();
        let report = f1_report(&confusion(&p, &g, &coarse_names)?);
        macro_per_cluster.push(report.macro_f1);
        weighted_per_cluster.push(report.weighted_f1);
    }
    let per_cluster = PerClusterReport {
        clusters_evaluated: macro_per_cluster.len(),
        pooled_macro_f1: coarse.macro_f1,
        pooled_weighted_f1: coarse.weighted_f1,
        macro_f1: spread(&macro_per_cluster),
        weighted_f1: spread(&weighted_per_cluster),
    };

    let mut route_counts = BTreeMap::new();
    for p in preds {
        if let Some(route) = &p.route {
            *route_counts.entry(route.clone()).or_insert(0) += 1;
        }
    }

    // Reply similarity over pairs where gold is a reply with text.
    let similarity = match (replies, provider) {
        (Some(replies), Some(provider)) => {
            let by_index: BTreeMap<usize, &str> =
                replies.iter().map(|r| (r.index, r.text.as_str())).collect();
            let mut scores = Vec::new();
            let mut zero_flagged = 0usize;
            for (i, g) in golds.iter().enumerate() {
                if gold_actions[i] != ActionLabel::Reply {
                    continue;
                }
                let (Some(gold_text), Some(reply)) = (g.text.as_deref(), by_index.get(&i)) else {
                    continue;
                };
                let score = cosine_similarity(reply, gold_text, provider)?;
                if score.degenerate {
                    zero_flagged += 1;
                }
                scores.push(score.value);
            }
            spread(&scores).map(|s| SimilarityReport {
                provider: provider.identifier(),
                pairs_scored: scores.len(),
                mean: s.avg,
                min: s.min,
                max: s.max,
                zero_flagged,
            })
        }
        _ => None,
    };

    Ok(RunReport {
        pairs: golds.len(),
        full,
        coarse,
        rare,
        per_cluster,
        route_counts,
        similarity,
    })
}
