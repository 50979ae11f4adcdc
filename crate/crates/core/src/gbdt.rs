//! Per-cluster gradient-boosted decision trees on the coarse 3-label task
//! (`follow` / `like` / `other`).
//!
//! Training minimizes class-weighted multiclass cross-entropy (softmax) with
//! second-order leaf steps. Trees grow leaf-wise on histogram-binned features
//! with deterministic tie-breaking (lowest feature index, then lowest bin),
//! so identical data and seed produce bit-identical ensembles.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{self, BinError};
use crate::corpus::{stratified_fold_indices, ActionLabel};
use crate::eval;
use crate::features::FeatureSchema;

const MAGIC: &[u8; 4] = b"GBDT";
const VERSION: u32 = 1;

/// Raw leaf steps are clamped to this magnitude (logit units, before
/// shrinkage) to keep near-pure leaves from producing runaway margins.
const MAX_LEAF_STEP: f64 = 10.0;

const MIN_SPLIT_GAIN: f64 = 1e-12;

pub const NUM_COARSE: usize = 3;

/// The simplified 3-way target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CoarseLabel {
    Follow,
    Like,
    Other,
}

impl CoarseLabel {
    pub const ALL: [CoarseLabel; NUM_COARSE] =
        [CoarseLabel::Follow, CoarseLabel::Like, CoarseLabel::Other];

    pub fn index(self) -> usize {
        match self {
            CoarseLabel::Follow => 0,
            CoarseLabel::Like => 1,
            CoarseLabel::Other => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CoarseLabel::Follow => "follow",
            CoarseLabel::Like => "like",
            CoarseLabel::Other => "other",
        }
    }
}

/// `follow` and `like` stay themselves; the ten rare actions group to `other`.
pub fn coarsen(action: ActionLabel) -> CoarseLabel {
    match action {
        ActionLabel::Follow => CoarseLabel::Follow,
        ActionLabel::Like => CoarseLabel::Like,
        _ => CoarseLabel::Other,
    }
}

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("class {0:?} is absent from the training labels")]
    MissingClass(CoarseLabel),
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("row has {got} features, model expects {expected}")]
    SchemaMismatch { expected: usize, got: usize },
    #[error("rows and labels have different lengths")]
    LengthMismatch,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Bin(#[from] BinError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-class training weights: inverse occurrence frequency, scaled so the
/// mean per-sample weight is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    weights: [f64; NUM_COARSE],
}

impl ClassWeights {
    pub fn uniform() -> ClassWeights {
        ClassWeights { weights: [1.0; NUM_COARSE] }
    }

    pub fn weight(&self, label: CoarseLabel) -> f64 {
        self.weights[label.index()]
    }
}

/// `w(c) = N / (K * count(c))` over the `K` classes present in `labels`.
/// Errors if any of the three classes is missing; callers with degenerate
/// clusters fall back to [`class_weights_over_present`].
pub fn compute_class_weights(labels: &[CoarseLabel]) -> Result<ClassWeights, GbdtError> {
    let counts = label_counts(labels);
    for class in CoarseLabel::ALL {
        if counts[class.index()] == 0 {
            return Err(GbdtError::MissingClass(class));
        }
    }
    Ok(class_weights_over_present(labels))
}

/// Same formula restricted to the classes that occur; absent classes get
/// weight 1 (never consulted, since no sample carries them).
pub fn class_weights_over_present(labels: &[CoarseLabel]) -> ClassWeights {
    let counts = label_counts(labels);
    let present = counts.iter().filter(|&&c| c > 0).count();
    let n = labels.len() as f64;
    let mut weights = [1.0; NUM_COARSE];
    for class in CoarseLabel::ALL {
        let count = counts[class.index()];
        if count > 0 {
            weights[class.index()] = n / (present as f64 * count as f64);
        }
    }
    ClassWeights { weights }
}

fn label_counts(labels: &[CoarseLabel]) -> [u64; NUM_COARSE] {
    let mut counts = [0u64; NUM_COARSE];
    for &l in labels {
        counts[l.index()] += 1;
    }
    counts
}

/// One hyperparameter combination evaluated by the grid search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_estimators: usize,
    pub learning_rate: f64,
    /// `None` leaves depth unbounded (growth is still capped by max_leaves).
    pub max_depth: Option<u32>,
    pub max_leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: Option<u32>,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    pub histogram_bins: usize,
    pub l2_reg: f64,
    pub k_folds: usize,
    pub seed: u64,
    pub class_weighting: bool,
    /// Grid searched by cross validation; empty means "just the base point".
    pub grid: Vec<GridPoint>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_estimators: 100,
            learning_rate: 0.1,
            max_depth: None,
            max_leaves: 31,
            min_samples_leaf: 20,
            histogram_bins: 255,
            l2_reg: 1e-3,
            k_folds: 5,
            seed: 0,
            class_weighting: true,
            grid: TrainConfig::default_grid(),
        }
    }
}

impl TrainConfig {
    pub fn default_grid() -> Vec<GridPoint> {
        let mut grid = Vec::new();
        for &n_estimators in &[100usize, 300] {
            for &learning_rate in &[0.05f64, 0.1] {
                for &max_depth in &[None, Some(8u32)] {
                    for &max_leaves in &[31usize, 63] {
                        grid.push(GridPoint { n_estimators, learning_rate, max_depth, max_leaves });
                    }
                }
            }
        }
        grid
    }

    /// Single-point "grid" built from the base fields; useful for tests and
    /// for the smoke pipeline where a full sweep is not wanted.
    pub fn without_grid(mut self) -> Self {
        self.grid = vec![self.base_point()];
        self
    }

    pub fn base_point(&self) -> GridPoint {
        GridPoint {
            n_estimators: self.n_estimators,
            learning_rate: self.learning_rate,
            max_depth: self.max_depth,
            max_leaves: self.max_leaves,
        }
    }

    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |msg: &str| Err(GbdtError::BadConfig(msg.to_string()));
        if self.k_folds < 2 {
            return bad("k_folds must be >= 2");
        }
        if !(2..=255).contains(&self.histogram_bins) {
            return bad("histogram_bins must be in 2..=255");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be positive");
        }
        if self.l2_reg <= 0.0 {
            return bad("l2_reg must be positive");
        }
        for p in self.effective_grid() {
            if p.n_estimators == 0 || p.max_leaves < 2 {
                return bad("grid points need n_estimators >= 1 and max_leaves >= 2");
            }
            if !(p.learning_rate > 0.0 && p.learning_rate <= 1.0) {
                return bad("learning_rate must be in (0, 1]");
            }
        }
        Ok(())
    }

    pub fn effective_grid(&self) -> Vec<GridPoint> {
        if self.grid.is_empty() {
            vec![self.base_point()]
        } else {
            self.grid.clone()
        }
    }
}

/// Gradient and diagonal-hessian of the weighted softmax cross-entropy at
/// `margins` for a sample with true class slot `label_slot` and weight `w`:
/// `g_j = w (p_j - 1[j = label])`, `h_j = w p_j (1 - p_j)`.
pub fn softmax_ce_gradients(
    margins: &[f64],
    label_slot: usize,
    weight: f64,
) -> (Vec<f64>, Vec<f64>) {
    let p = softmax(margins);
    let mut g = Vec::with_capacity(margins.len());
    let mut h = Vec::with_capacity(margins.len());
    for (j, &pj) in p.iter().enumerate() {
        let y = if j == label_slot { 1.0 } else { 0.0 };
        g.push(weight * (pj - y));
        h.push(weight * pj * (1.0 - pj));
    }
    (g, h)
}

/// Weighted cross-entropy of one sample, `-w log p[label]`, computed through
/// a stable log-sum-exp.
pub fn softmax_ce_loss(margins: &[f64], label_slot: usize, weight: f64) -> f64 {
    -weight * log_softmax(margins, label_slot)
}

fn log_softmax(margins: &[f64], slot: usize) -> f64 {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = margins.iter().map(|&m| (m - max).exp()).sum::<f64>().ln() + max;
    margins[slot] - lse
}

fn softmax(margins: &[f64]) -> Vec<f64> {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = margins.iter().map(|&m| (m - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// Histogram binning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct FeatureBins {
    /// Threshold between bin i and bin i+1 (midpoint of adjacent values).
    cuts: Vec<f64>,
}

impl FeatureBins {
    fn bin_of(&self, value: f64) -> usize {
        self.cuts.partition_point(|&c| value > c)
    }

    fn n_bins(&self) -> usize {
        self.cuts.len() + 1
    }
}

#[derive(Debug, Clone)]
struct Binner {
    features: Vec<FeatureBins>,
}

impl Binner {
    /// Equal-frequency cuts over distinct values, at most `max_bins` bins
    /// per feature.
    fn fit(rows: &[Vec<f64>], n_features: usize, max_bins: usize) -> Binner {
        let n = rows.len();
        let mut features = Vec::with_capacity(n_features);
        let mut column = vec![0.0f64; n];
        for f in 0..n_features {
            for (i, row) in rows.iter().enumerate() {
                column[i] = row[f];
            }
            column.sort_by(|a, b| a.partial_cmp(b).expect("non-finite feature value"));
            let mut cuts = Vec::new();
            let target = (n + max_bins - 1) / max_bins;
            let mut in_bin = 0usize;
            for i in 0..n {
                in_bin += 1;
                let at_boundary = i + 1 < n && column[i] < column[i + 1];
                if at_boundary && in_bin >= target && cuts.len() + 1 < max_bins {
                    cuts.push((column[i] + column[i + 1]) / 2.0);
                    in_bin = 0;
                }
            }
            features.push(FeatureBins { cuts });
        }
        Binner { features }
    }

    fn bin_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<u8>> {
        self.features
            .iter()
            .enumerate()
            .map(|(f, bins)| rows.iter().map(|row| bins.bin_of(row[f]) as u8).collect())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split { feature: u32, threshold: f64, left: u32, right: u32 },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    at = if row[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    fn count_splits(&self, counts: &mut [u64]) {
        for node in &self.nodes {
            if let Node::Split { feature, .. } = node {
                counts[*feature as usize] += 1;
            }
        }
    }
}

struct GrowParams {
    max_leaves: usize,
    max_depth: Option<u32>,
    min_samples_leaf: usize,
    l2_reg: f64,
    learning_rate: f64,
}

struct BuilderNode {
    start: usize,
    len: usize,
    depth: u32,
    g_sum: f64,
    h_sum: f64,
    best: Option<(f64, usize, usize)>, // (gain, feature, bin)
    children: Option<(usize, usize)>,
}

/// Grows one tree, leaf-wise, on pre-binned features for a single class's
/// gradient/hessian vectors.
fn grow_tree(
    binned: &[Vec<u8>],
    bins: &Binner,
    grads: &[f64],
    hess: &[f64],
    positions: &mut Vec<u32>,
    params: &GrowParams,
) -> Tree {
    let n = positions.len();
    let root_g: f64 = positions.iter().map(|&i| grads[i as usize]).sum();
    let root_h: f64 = positions.iter().map(|&i| hess[i as usize]).sum();
    let mut nodes = vec![BuilderNode {
        start: 0,
        len: n,
        depth: 0,
        g_sum: root_g,
        h_sum: root_h,
        best: None,
        children: None,
    }];
    find_best_split(&mut nodes, 0, binned, bins, grads, hess, positions, params);

    let mut leaves = 1usize;
    while leaves < params.max_leaves {
        // Deterministic pick: highest gain, then lowest node id.
        let mut chosen: Option<(f64, usize)> = None;
        for (id, node) in nodes.iter().enumerate() {
            if node.children.is_some() {
                continue;
            }
            if let Some((gain, _, _)) = node.best {
                if chosen.map_or(true, |(best_gain, _)| gain > best_gain) {
                    chosen = Some((gain, id));
                }
            }
        }
        let Some((_, id)) = chosen else { break };

        let (feature, bin) = {
            let node = &nodes[id];
            let (_, f, b) = node.best.expect("chosen node has a split");
            (f, b)
        };
        let (start, len, depth) = (nodes[id].start, nodes[id].len, nodes[id].depth);

        // Stable partition keeps row order deterministic.
        let slice = &positions[start..start + len];
        let mut left_rows = Vec::with_capacity(len);
        let mut right_rows = Vec::with_capacity(len);
        for &row in slice {
            if binned[feature][row as usize] as usize <= bin {
                left_rows.push(row);
            } else {
                right_rows.push(row);
            }
        }
        let left_len = left_rows.len();
        positions[start..start + left_len].copy_from_slice(&left_rows);
        positions[start + left_len..start + len].copy_from_slice(&right_rows);

        let sums = |rows: &[u32]| {
            let g: f64 = rows.iter().map(|&i| grads[i as usize]).sum();
            let h: f64 = rows.iter().map(|&i| hess[i as usize]).sum();
            (g, h)
        };
        let (gl, hl) = sums(&positions[start..start + left_len]);
        let (g, h) = (nodes[id].g_sum, nodes[id].h_sum);

        let left_id = nodes.len();
        nodes.push(BuilderNode {
            start,
            len: left_len,
            depth: depth + 1,
            g_sum: gl,
            h_sum: hl,
            best: None,
            children: None,
        });
        let right_id = nodes.len();
        nodes.push(BuilderNode {
            start: start + left_len,
            len: len - left_len,
            depth: depth + 1,
            g_sum: g - gl,
            h_sum: h - hl,
            best: None,
            children: None,
        });
        nodes[id].children = Some((left_id, right_id));
        leaves += 1;

        find_best_split(&mut nodes, left_id, binned, bins, grads, hess, positions, params);
        find_best_split(&mut nodes, right_id, binned, bins, grads, hess, positions, params);
    }

    flatten(&nodes, params, bins)
}

#[allow(clippy::too_many_arguments)]
fn find_best_split(
    nodes: &mut [BuilderNode],
    id: usize,
    binned: &[Vec<u8>],
    bins: &Binner,
    grads: &[f64],
    hess: &[f64],
    positions: &[u32],
    params: &GrowParams,
) {
    let node = &nodes[id];
    if let Some(limit) = params.max_depth {
        if node.depth >= limit {
            return;
        }
    }
    if node.len < 2 * params.min_samples_leaf {
        return;
    }
    let rows = &positions[node.start..node.start + node.len];
    let lambda = params.l2_reg;
    let parent_score = node.g_sum * node.g_sum / (node.h_sum + lambda);

    let mut best: Option<(f64, usize, usize)> = None;
    let mut hist_g = vec![0.0f64; 256];
    let mut hist_h = vec![0.0f64; 256];
    let mut hist_n = vec![0u32; 256];
    for (feature, feature_bins) in bins.features.iter().enumerate() {
        let n_bins = feature_bins.n_bins();
        if n_bins < 2 {
            continue;
        }
        hist_g[..n_bins].fill(0.0);
        hist_h[..n_bins].fill(0.0);
        hist_n[..n_bins].fill(0);
        let col = &binned[feature];
        for &row in rows {
            let b = col[row as usize] as usize;
            hist_g[b] += grads[row as usize];
            hist_h[b] += hess[row as usize];
            hist_n[b] += 1;
        }
        let mut gl = 0.0f64;
        let mut hl = 0.0f64;
        let mut nl = 0u32;
        for bin in 0..n_bins - 1 {
            gl += hist_g[bin];
            hl += hist_h[bin];
            nl += hist_n[bin];
            let nr = node.len as u32 - nl;
            if (nl as usize) < params.min_samples_leaf || (nr as usize) < params.min_samples_leaf {
                continue;
            }
            let gr = node.g_sum - gl;
            let hr = node.h_sum - hl;
            let gain =
                gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent_score;
            if gain > MIN_SPLIT_GAIN && best.map_or(true, |(bg, _, _)| gain > bg) {
                best = Some((gain, feature, bin));
            }
        }
    }
    nodes[id].best = best;
}

fn flatten(builder: &[BuilderNode], params: &GrowParams, bins: &Binner) -> Tree {
    // Map builder ids to output ids in breadth-first order from the root.
    let mut nodes = Vec::with_capacity(builder.len());
    let mut queue = std::collections::VecDeque::from([0usize]);
    let mut out_id = vec![u32::MAX; builder.len()];
    let mut order = Vec::with_capacity(builder.len());
    while let Some(id) = queue.pop_front() {
        out_id[id] = order.len() as u32;
        order.push(id);
        if let Some((l, r)) = builder[id].children {
            queue.push_back(l);
            queue.push_back(r);
        }
    }
    for &id in &order {
        let node = &builder[id];
        match node.children {
            Some((l, r)) => {
                let (_, feature, bin) = node.best.expect("split node has best");
                nodes.push(Node::Split {
                    feature: feature as u32,
                    threshold: bins.features[feature].cuts[bin],
                    left: out_id[l],
                    right: out_id[r],
                });
            }
            None => {
                let raw = -node.g_sum / (node.h_sum + params.l2_reg);
                let clamped = raw.clamp(-MAX_LEAF_STEP, MAX_LEAF_STEP);
                nodes.push(Node::Leaf { value: clamped * params.learning_rate });
            }
        }
    }
    Tree { nodes }
}

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

/// A trained boosted-tree model for one persona cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub cluster: u8,
    n_features: usize,
    schema_hash: u64,
    /// Class slots actually trained, in coarse-label order.
    classes: Vec<CoarseLabel>,
    base_scores: Vec<f64>,
    /// trees[round][slot]
    trees: Vec<Vec<Tree>>,
    class_weights: ClassWeights,
    /// Weighted mean training log-loss after each round (round 0 = priors).
    pub train_loss_curve: Vec<f64>,
}

/// Hash of the schema's column names; persisted so predict-time schema
/// mismatches are detected.
pub fn schema_hash(schema: &FeatureSchema) -> u64 {
    let joined = schema.columns().join("\u{1f}");
    crate::encoder::fnv1a(joined.as_bytes())
}

#[derive(Debug, Clone, Copy)]
pub struct FitParams {
    pub point: GridPoint,
    pub min_samples_leaf: usize,
    pub histogram_bins: usize,
    pub l2_reg: f64,
    pub class_weighting: bool,
}

impl FitParams {
    pub fn from_config(cfg: &TrainConfig, point: GridPoint) -> FitParams {
        FitParams {
            point,
            min_samples_leaf: cfg.min_samples_leaf,
            histogram_bins: cfg.histogram_bins,
            l2_reg: cfg.l2_reg,
            class_weighting: cfg.class_weighting,
        }
    }
}

impl Ensemble {
    /// Boosts `point.n_estimators` rounds on the given rows. Classes absent
    /// from `labels` are excluded from the model; a single present class is
    /// an error.
    pub fn fit(
        cluster: u8,
        rows: &[Vec<f64>],
        labels: &[CoarseLabel],
        schema: &FeatureSchema,
        params: &FitParams,
    ) -> Result<Ensemble, GbdtError> {
        if rows.len() != labels.len() {
            return Err(GbdtError::LengthMismatch);
        }
        if rows.is_empty() {
            return Err(GbdtError::TooFewRows { needed: 1, got: 0 });
        }
        let n_features = schema.len();
        for row in rows {
            if row.len() != n_features {
                return Err(GbdtError::SchemaMismatch { expected: n_features, got: row.len() });
            }
        }
        let counts = label_counts(labels);
        let classes: Vec<CoarseLabel> =
            CoarseLabel::ALL.into_iter().filter(|c| counts[c.index()] > 0).collect();
        if classes.len() < 2 {
            return Err(GbdtError::DegenerateLabels);
        }
        let class_weights = if params.class_weighting {
            class_weights_over_present(labels)
        } else {
            ClassWeights::uniform()
        };

        let n = rows.len();
        let slots = classes.len();
        let slot_of_label: Vec<usize> = labels
            .iter()
            .map(|l| classes.iter().position(|c| c == l).expect("label class present"))
            .collect();
        let weights: Vec<f64> = labels.iter().map(|&l| class_weights.weight(l)).collect();

        // Unweighted empirical priors as base scores: a zero-tree model
        // predicts the class distribution.
        let base_scores: Vec<f64> = classes
            .iter()
            .map(|c| ((counts[c.index()] as f64) / n as f64).ln())
            .collect();

        let binner = Binner::fit(rows, n_features, params.histogram_bins);
        let binned = binner.bin_rows(rows);

        let mut margins: Vec<Vec<f64>> =
            base_scores.iter().map(|&b| vec![b; n]).collect();
        let grow = GrowParams {
            max_leaves: params.point.max_leaves,
            max_depth: params.point.max_depth,
            min_samples_leaf: params.min_samples_leaf,
            l2_reg: params.l2_reg,
            learning_rate: params.point.learning_rate,
        };

        let mut trees: Vec<Vec<Tree>> = Vec::with_capacity(params.point.n_estimators);
        let mut loss_curve = Vec::with_capacity(params.point.n_estimators + 1);
        let mut sample_margins = vec![0.0f64; slots];
        let mut grads = vec![vec![0.0f64; n]; slots];
        let mut hess = vec![vec![0.0f64; n]; slots];

        let mean_loss = |margins: &Vec<Vec<f64>>, buf: &mut Vec<f64>| {
            let mut total = 0.0;
            let mut wsum = 0.0;
            for i in 0..n {
                for (s, m) in buf.iter_mut().enumerate() {
                    *m = margins[s][i];
                }
                total += softmax_ce_loss(buf, slot_of_label[i], weights[i]);
                wsum += weights[i];
            }
            total / wsum
        };
        loss_curve.push(mean_loss(&margins, &mut sample_margins));

        let mut positions: Vec<u32> = (0..n as u32).collect();
        for _round in 0..params.point.n_estimators {
            for i in 0..n {
                for (s, m) in sample_margins.iter_mut().enumerate() {
                    *m = margins[s][i];
                }
                let (g, h) = softmax_ce_gradients(&sample_margins, slot_of_label[i], weights[i]);
                for s in 0..slots {
                    grads[s][i] = g[s];
                    hess[s][i] = h[s];
                }
            }
            let mut round_trees = Vec::with_capacity(slots);
            for s in 0..slots {
                positions.clear();
                positions.extend(0..n as u32);
                let tree = grow_tree(&binned, &binner, &grads[s], &hess[s], &mut positions, &grow);
                for (i, row) in rows.iter().enumerate() {
                    margins[s][i] += tree.predict(row);
                }
                round_trees.push(tree);
            }
            trees.push(round_trees);
            loss_curve.push(mean_loss(&margins, &mut sample_margins));
        }

        Ok(Ensemble {
            cluster,
            n_features,
            schema_hash: schema_hash(schema),
            classes,
            base_scores,
            trees,
            class_weights,
            train_loss_curve: loss_curve,
        })
    }

    pub fn classes(&self) -> &[CoarseLabel] {
        &self.classes
    }

    pub fn has_class(&self, label: CoarseLabel) -> bool {
        self.classes.contains(&label)
    }

    pub fn class_weights(&self) -> &ClassWeights {
        &self.class_weights
    }

    pub fn n_rounds(&self) -> usize {
        self.trees.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    fn margins(&self, row: &[f64]) -> Result<Vec<f64>, GbdtError> {
        if row.len() != self.n_features {
            return Err(GbdtError::SchemaMismatch { expected: self.n_features, got: row.len() });
        }
        let mut margins = self.base_scores.clone();
        for round in &self.trees {
            for (slot, tree) in round.iter().enumerate() {
                margins[slot] += tree.predict(row);
            }
        }
        Ok(margins)
    }

    /// Probabilities over the three coarse labels; classes the model was not
    /// trained on get probability 0.
    pub fn predict_proba(&self, row: &[f64]) -> Result<[f64; NUM_COARSE], GbdtError> {
        let margins = self.margins(row)?;
        let p = softmax(&margins);
        let mut out = [0.0f64; NUM_COARSE];
        for (slot, class) in self.classes.iter().enumerate() {
            out[class.index()] = p[slot];
        }
        Ok(out)
    }

    /// Split counts per feature, descending; features never split on are
    /// omitted.
    pub fn feature_importance(&self, schema: &FeatureSchema) -> Vec<(String, u64)> {
        let mut counts = vec![0u64; self.n_features];
        for round in &self.trees {
            for tree in round {
                tree.count_splits(&mut counts);
            }
        }
        let mut out: Vec<(String, u64)> = schema
            .columns()
            .iter()
            .zip(&counts)
            .filter(|(_, &c)| c > 0)
            .map(|(name, &c)| (name.clone(), c))
            .collect();
        out.sort_by(|a, b| b.1.cmp(&a.1));
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), GbdtError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), GbdtError> {
        binio::write_magic(w, MAGIC, VERSION)?;
        binio::write_u8(w, self.cluster)?;
        binio::write_u64(w, self.n_features as u64)?;
        binio::write_u64(w, self.schema_hash)?;
        binio::write_u8(w, self.classes.len() as u8)?;
        for (slot, class) in self.classes.iter().enumerate() {
            binio::write_u8(w, class.index() as u8)?;
            binio::write_f64(w, self.base_scores[slot])?;
            binio::write_f64(w, self.class_weights.weight(*class))?;
        }
        binio::write_u64(w, self.trees.len() as u64)?;
        for round in &self.trees {
            for tree in round {
                binio::write_u64(w, tree.nodes.len() as u64)?;
                for node in &tree.nodes {
                    match node {
                        Node::Leaf { value } => {
                            binio::write_u8(w, 1)?;
                            binio::write_f64(w, *value)?;
                        }
                        Node::Split { feature, threshold, left, right } => {
                            binio::write_u8(w, 0)?;
                            binio::write_u32(w, *feature)?;
                            binio::write_f64(w, *threshold)?;
                            binio::write_u32(w, *left)?;
                            binio::write_u32(w, *right)?;
                        }
                    }
                }
            }
        }
        binio::write_f64_slice(w, &self.train_loss_curve)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Ensemble, GbdtError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let e = Ensemble::read_from(&mut r)?;
        binio::expect_eof(&mut r)?;
        Ok(e)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Ensemble, GbdtError> {
        binio::read_magic(r, MAGIC, VERSION)?;
        let cluster = binio::read_u8(r)?;
        let n_features = binio::read_u64(r)? as usize;
        let schema_hash = binio::read_u64(r)?;
        let n_classes = binio::read_u8(r)? as usize;
        if n_classes == 0 || n_classes > NUM_COARSE {
            return Err(BinError::Corrupt("bad class count").into());
        }
        let mut classes = Vec::with_capacity(n_classes);
        let mut base_scores = Vec::with_capacity(n_classes);
        let mut weights = [1.0f64; NUM_COARSE];
        for _ in 0..n_classes {
            let idx = binio::read_u8(r)? as usize;
            let class = *CoarseLabel::ALL
                .get(idx)
                .ok_or(BinError::Corrupt("bad class index"))?;
            classes.push(class);
            base_scores.push(binio::read_f64(r)?);
            weights[idx] = binio::read_f64(r)?;
        }
        let n_rounds = binio::read_u64(r)? as usize;
        if n_rounds > 1_000_000 {
            return Err(BinError::Corrupt("implausible round count").into());
        }
        let mut trees = Vec::with_capacity(n_rounds);
        for _ in 0..n_rounds {
            let mut round = Vec::with_capacity(n_classes);
            for _ in 0..n_classes {
                let n_nodes = binio::read_u64(r)? as usize;
                if n_nodes > 10_000_000 {
                    return Err(BinError::Corrupt("implausible node count").into());
                }
                let mut nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    match binio::read_u8(r)? {
                        1 => nodes.push(Node::Leaf { value: binio::read_f64(r)? }),
                        0 => {
                            let feature = binio::read_u32(r)?;
                            let threshold = binio::read_f64(r)?;
                            let left = binio::read_u32(r)?;
                            let right = binio::read_u32(r)?;
                            if left as usize >= n_nodes || right as usize >= n_nodes {
                                return Err(BinError::Corrupt("child out of range").into());
                            }
                            nodes.push(Node::Split { feature, threshold, left, right });
                        }
                        _ => return Err(BinError::Corrupt("bad node tag").into()),
                    }
                }
                round.push(Tree { nodes });
            }
            trees.push(round);
        }
        let train_loss_curve = binio::read_f64_vec(r)?;
        Ok(Ensemble {
            cluster,
            n_features,
            schema_hash,
            classes,
            base_scores,
            trees,
            class_weights: ClassWeights { weights },
            train_loss_curve,
        })
    }
}

// ---------------------------------------------------------------------------
// Threshold optimization
// ---------------------------------------------------------------------------

/// Per-class decision thresholds with the validation F1 achieved at each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub thresholds: [f64; NUM_COARSE],
    pub f1_at_threshold: [f64; NUM_COARSE],
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Default for ThresholdSet {
    fn default() -> Self {
        ThresholdSet {
            thresholds: [1.0 / 3.0; NUM_COARSE],
            f1_at_threshold: [0.0; NUM_COARSE],
            warnings: Vec::new(),
        }
    }
}

/// Exact integer F1 comparison: f1 = 2tp / (2tp + fp + fn).
fn f1_cmp(tp_a: u64, fp_a: u64, fn_a: u64, tp_b: u64, fp_b: u64, fn_b: u64) -> std::cmp::Ordering {
    // 2a/(2a+x) vs 2b/(2b+y)  <=>  a*(2b+y) vs b*(2a+x)
    let lhs = 2 * tp_a * (2 * tp_b + fp_b + fn_b);
    let rhs = 2 * tp_b * (2 * tp_a + fp_a + fn_a);
    lhs.cmp(&rhs)
}

fn f1_value(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// Sweeps each class's one-vs-rest precision-recall curve over all realizable
/// cut points (midpoints between adjacent distinct scores, plus accept-all),
/// picking the threshold that maximizes that class's F1. Ties resolve to the
/// lower threshold. A class absent from the validation labels defaults to
/// 1/3 with a warning.
pub fn optimize_thresholds(
    probas: &[[f64; NUM_COARSE]],
    labels: &[CoarseLabel],
) -> Result<ThresholdSet, GbdtError> {
    if probas.len() != labels.len() {
        return Err(GbdtError::LengthMismatch);
    }
    let mut set = ThresholdSet::default();
    for class in CoarseLabel::ALL {
        let c = class.index();
        let positives = labels.iter().filter(|&&l| l == class).count() as u64;
        if positives == 0 {
            set.warnings.push(format!(
                "class {} absent from validation labels; threshold defaults to 1/3",
                class.as_str()
            ));
            continue;
        }
        let mut scored: Vec<(f64, bool)> =
            probas.iter().zip(labels).map(|(p, &l)| (p[c], l == class)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut best: Option<(u64, u64, u64, f64)> = None; // (tp, fp, fn, threshold)
        for j in 0..scored.len() {
            if scored[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            // A cut between equal scores is not realizable.
            if j + 1 < scored.len() && scored[j].0 == scored[j + 1].0 {
                continue;
            }
            let threshold = if j + 1 < scored.len() {
                (scored[j].0 + scored[j + 1].0) / 2.0
            } else {
                scored[j].0 / 2.0
            };
            let fn_ = positives - tp;
            let better = match best {
                None => true,
                // `>=` walks ties down to the lowest threshold.
                Some((btp, bfp, bfn, _)) => {
                    f1_cmp(tp, fp, fn_, btp, bfp, bfn) != std::cmp::Ordering::Less
                }
            };
            if better {
                best = Some((tp, fp, fn_, threshold));
            }
        }
        let (tp, fp, fn_, threshold) = best.expect("non-empty scores");
        set.thresholds[c] = threshold;
        set.f1_at_threshold[c] = f1_value(tp, fp, fn_);
    }
    Ok(set)
}

/// Thresholded 3-way decision: the `other` gate fires first; otherwise the
/// common classes compete on probability scaled by their thresholds.
pub fn classify(
    ensemble: &Ensemble,
    thresholds: &ThresholdSet,
    row: &[f64],
) -> Result<CoarseLabel, GbdtError> {
    let p = ensemble.predict_proba(row)?;
    let mut present = [false; NUM_COARSE];
    for class in ensemble.classes() {
        present[class.index()] = true;
    }
    Ok(classify_from_proba(&p, thresholds, &present))
}

/// The decision rule on bare probabilities. `present` masks classes the
/// model cannot emit (degenerate clusters).
pub fn classify_from_proba(
    p: &[f64; NUM_COARSE],
    thresholds: &ThresholdSet,
    present: &[bool; NUM_COARSE],
) -> CoarseLabel {
    let other = CoarseLabel::Other.index();
    if present[other] && p[other] >= thresholds.thresholds[other] {
        return CoarseLabel::Other;
    }
    let mut best: Option<(f64, CoarseLabel)> = None;
    for class in [CoarseLabel::Follow, CoarseLabel::Like] {
        if !present[class.index()] {
            continue;
        }
        let ratio = p[class.index()] / thresholds.thresholds[class.index()];
        if best.map_or(true, |(b, _)| ratio > b) {
            best = Some((ratio, class));
        }
    }
    best.map_or(CoarseLabel::Other, |(_, c)| c)
}

// ---------------------------------------------------------------------------
// Cross-validated training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GridPointReport {
    pub point: GridPoint,
    pub fold_macro_f1: Vec<f64>,
    pub mean_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassF1Row {
    pub label: String,
    pub per_fold: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub avg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub cluster: u8,
    pub rows: usize,
    pub grid: Vec<GridPointReport>,
    pub chosen: GridPoint,
    pub chosen_mean_macro_f1: f64,
    pub per_class: Vec<ClassF1Row>,
}

pub struct TrainOutcome {
    pub ensemble: Ensemble,
    pub thresholds: ThresholdSet,
    pub cv_report: CvReport,
}

fn argmax_label(p: &[f64; NUM_COARSE]) -> CoarseLabel {
    let mut best = CoarseLabel::Follow;
    let mut best_p = f64::NEG_INFINITY;
    for class in CoarseLabel::ALL {
        if p[class.index()] > best_p {
            best_p = p[class.index()];
            best = class;
        }
    }
    best
}

fn macro_f1_of(preds: &[CoarseLabel], golds: &[CoarseLabel]) -> f64 {
    let names = ["follow", "like", "other"];
    let p: Vec<&str> = preds.iter().map(|c| c.as_str()).collect();
    let g: Vec<&str> = golds.iter().map(|c| c.as_str()).collect();
    eval::f1_report(&eval::confusion(&p, &g, &names).expect("labels in set")).macro_f1
}

/// Stratified k-fold grid search, final refit on all rows with the winning
/// configuration, and PR-curve thresholds from the winner's out-of-fold
/// probabilities.
pub fn train(
    cluster: u8,
    rows: &[Vec<f64>],
    labels: &[CoarseLabel],
    schema: &FeatureSchema,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, GbdtError> {
    cfg.validate()?;
    if rows.len() != labels.len() {
        return Err(GbdtError::LengthMismatch);
    }
    let needed = 3 * cfg.k_folds;
    if rows.len() < needed {
        return Err(GbdtError::TooFewRows { needed, got: rows.len() });
    }
    let distinct = label_counts(labels).iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(GbdtError::DegenerateLabels);
    }

    let folds = stratified_fold_indices(labels, cfg.k_folds, cfg.seed)?;
    let grid = cfg.effective_grid();

    let mut reports: Vec<GridPointReport> = Vec::with_capacity(grid.len());
    let mut oof_per_point: Vec<Vec<[f64; NUM_COARSE]>> = Vec::with_capacity(grid.len());
    let mut fold_class_f1: Vec<Vec<[f64; NUM_COARSE]>> = Vec::with_capacity(grid.len());

    for &point in &grid {
        let params = FitParams::from_config(cfg, point);
        let mut oof = vec![[0.0f64; NUM_COARSE]; rows.len()];
        let mut fold_scores = Vec::with_capacity(folds.len());
        let mut class_scores = Vec::with_capacity(folds.len());
        for fold in &folds {
            let in_fold: std::collections::HashSet<usize> = fold.iter().copied().collect();
            let mut train_rows = Vec::with_capacity(rows.len() - fold.len());
            let mut train_labels = Vec::with_capacity(rows.len() - fold.len());
            for i in 0..rows.len() {
                if !in_fold.contains(&i) {
                    train_rows.push(rows[i].clone());
                    train_labels.push(labels[i]);
                }
            }
            let model = Ensemble::fit(cluster, &train_rows, &train_labels, schema, &params)?;
            let mut preds = Vec::with_capacity(fold.len());
            let mut golds = Vec::with_capacity(fold.len());
            for &i in fold {
                let p = model.predict_proba(&rows[i])?;
                oof[i] = p;
                preds.push(argmax_label(&p));
                golds.push(labels[i]);
            }
            fold_scores.push(macro_f1_of(&preds, &golds));

            let names = ["follow", "like", "other"];
            let p: Vec<&str> = preds.iter().map(|c| c.as_str()).collect();
            let g: Vec<&str> = golds.iter().map(|c| c.as_str()).collect();
            let rep = eval::f1_report(&eval::confusion(&p, &g, &names).expect("labels in set"));
            let mut by_class = [0.0f64; NUM_COARSE];
            for (i, c) in rep.classes.iter().enumerate() {
                by_class[i] = c.f1;
            }
            class_scores.push(by_class);
        }
        let mean = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
        reports.push(GridPointReport { point, fold_macro_f1: fold_scores, mean_macro_f1: mean });
        oof_per_point.push(oof);
        fold_class_f1.push(class_scores);
    }

    // Winner: max mean CV macro-F1, first in grid order on ties.
    let mut winner = 0usize;
    for (i, r) in reports.iter().enumerate() {
        if r.mean_macro_f1 > reports[winner].mean_macro_f1 {
            winner = i;
        }
    }

    let thresholds = optimize_thresholds(&oof_per_point[winner], labels)?;
    let final_params = FitParams::from_config(cfg, grid[winner]);
    let ensemble = Ensemble::fit(cluster, rows, labels, schema, &final_params)?;

    let per_class = CoarseLabel::ALL
        .iter()
        .map(|c| {
            let per_fold: Vec<f64> =
                fold_class_f1[winner].iter().map(|f| f[c.index()]).collect();
            let min = per_fold.iter().copied().fold(f64::INFINITY, f64::min);
            let max = per_fold.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let avg = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
            ClassF1Row { label: c.as_str().to_string(), per_fold, min, max, avg }
        })
        .collect();

    let cv_report = CvReport {
        cluster,
        rows: rows.len(),
        chosen: grid[winner],
        chosen_mean_macro_f1: reports[winner].mean_macro_f1,
        grid: reports,
        per_class,
    };

    Ok(TrainOutcome { ensemble, thresholds, cv_report })
}

// ---------------------------------------------------------------------------
// Model bundle (directory of per-cluster models)
// ---------------------------------------------------------------------------

pub struct ClusterModel {
    pub ensemble: Ensemble,
    pub thresholds: ThresholdSet,
}

/// Writes one `cluster_XX.gbm` per trained cluster plus `thresholds.json`,
/// `feature_schema.json`, and `cv_report.json`.
pub fn save_bundle(
    dir: &Path,
    models: &BTreeMap<u8, ClusterModel>,
    schema: &FeatureSchema,
    cv_reports: &[CvReport],
) -> Result<(), GbdtError> {
    std::fs::create_dir_all(dir)?;
    schema.save(&dir.join("feature_schema.json")).map_err(io_from_feature)?;
    let mut thresholds: BTreeMap<String, &ThresholdSet> = BTreeMap::new();
    for (cluster, model) in models {
        model.ensemble.save(&dir.join(format!("cluster_{cluster:02}.gbm")))?;
        thresholds.insert(format!("{cluster}"), &model.thresholds);
    }
    std::fs::write(dir.join("thresholds.json"), serde_json::to_string_pretty(&thresholds)?)?;
    std::fs::write(dir.join("cv_report.json"), serde_json::to_string_pretty(&cv_reports)?)?;
    Ok(())
}

fn io_from_feature(e: crate::features::FeatureError) -> GbdtError {
    match e {
        crate::features::FeatureError::Io(io) => GbdtError::Io(io),
        other => GbdtError::BadConfig(other.to_string()),
    }
}

pub fn load_bundle(dir: &Path) -> Result<(BTreeMap<u8, ClusterModel>, FeatureSchema), GbdtError> {
    let schema = FeatureSchema::load(&dir.join("feature_schema.json")).map_err(io_from_feature)?;
    let thresholds: BTreeMap<String, ThresholdSet> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("thresholds.json"))?)?;
    let mut models = BTreeMap::new();
    for cluster in 0..crate::corpus::NUM_CLUSTERS as u8 {
        let path = dir.join(format!("cluster_{cluster:02}.gbm"));
        if !path.exists() {
            continue;
        }
        let ensemble = Ensemble::load(&path)?;
        let th = thresholds
            .get(&format!("{cluster}"))
            .cloned()
            .ok_or_else(|| GbdtError::BadConfig(format!("no thresholds for cluster {cluster}")))?;
        models.insert(cluster, ClusterModel { ensemble, thresholds: th });
    }
    Ok((models, schema))
}
