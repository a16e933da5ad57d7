//! Model-based recursive partitioning over pooled-trial datasets.
//!
//! Each node fits a parametric treatment-effect model (pooled or
//! trial-stratified intercepts, optional baseline covariates, one treatment
//! coefficient), tests the requested splitting variables for parameter
//! instability via the score-based tests, Bonferroni-selects the most
//! unstable variable, and searches that variable exhaustively for the
//! objective-minimizing binary cut. Growth is breadth-first, so node ids are
//! level-order with the root at 1. Trial-intercept columns follow the
//! dataset's global trial coding: a child in which some trial level
//! disappears gets an all-zero column, fails the rank check, and the cut is
//! blocked — candidate children must keep at least two observations for
//! every trial level they contain.

use crate::dataset::{Dataset, SplitterColumn, MISSING_CODE};
use crate::linreg::{fit_ols, wald_inference, DesignMatrix, FittedLinearModel, LinRegError};
use crate::stability::{
    bonferroni_adjust, categorical_fluctuation_test, suplm_test, StabilityError,
};
use serde::Serialize;
use std::collections::VecDeque;
use thiserror::Error;

/// Largest number of categorical levels for which every binary partition is
/// enumerated; beyond this, levels are ordered by their mean treatment-score
/// contribution and only the prefix cuts of that ordering are scanned.
pub const EXHAUSTIVE_LEVEL_LIMIT: usize = 10;

/// How the node model handles intercepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum InterceptSpec {
    /// One shared intercept column.
    Pooled,
    /// One intercept column per trial level (global coding, never re-coded
    /// inside a node).
    StratifiedByTrial,
}

/// The parametric model fitted in every node: intercept(s), the listed
/// numeric baseline covariates, and the treatment indicator.
#[derive(Clone, Debug, Serialize)]
pub struct NodeModelSpec {
    pub intercept: InterceptSpec,
    pub covariates: Vec<String>,
}

impl NodeModelSpec {
    /// Number of design columns this node model produces on a dataset.
    pub fn n_params(&self, ds: &Dataset) -> usize {
        let intercepts = match self.intercept {
            InterceptSpec::Pooled => 1,
            InterceptSpec::StratifiedByTrial => ds.n_trials(),
        };
        intercepts + self.covariates.len() + 1
    }
}

/// Stopping and testing configuration for tree growth.
#[derive(Clone, Debug, Serialize)]
pub struct GrowControl {
    /// Significance level for the Bonferroni-adjusted instability tests.
    pub alpha: f64,
    /// Minimum rows per node; `None` means ten times the node model
    /// dimension, and any explicit value must be at least twice that
    /// dimension.
    pub min_node_size: Option<usize>,
    /// Maximum depth (root has depth 0); `None` means unbounded.
    pub max_depth: Option<usize>,
    /// Trimming fraction for the supremum test's admissible cut range.
    pub trim: f64,
    /// When set, callers (the CLI) echo the growth log as it is produced.
    pub verbose: bool,
}

impl Default for GrowControl {
    fn default() -> Self {
        GrowControl {
            alpha: 0.05,
            min_node_size: None,
            max_depth: None,
            trim: 0.10,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedControl {
    pub alpha: f64,
    pub min_node_size: usize,
    pub max_depth: Option<usize>,
    pub trim: f64,
}

/// Why a node became a leaf.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Termination {
    /// Smallest Bonferroni-adjusted instability p-value is above alpha (or
    /// there was nothing to test, which counts as vacuously stable).
    NoSignificantInstability,
    /// Too few rows to form two admissible children.
    TooSmallToSplit,
    MaxDepth,
    /// The selected variable had no size-admissible cut.
    NoAdmissibleCut,
    /// Every size-admissible cut was blocked because a child model could not
    /// be fitted; the counts say why.
    UnfittableChildren {
        rank_deficient_cuts: usize,
        underrepresented_trial_cuts: usize,
    },
}

impl Termination {
    /// Short machine-readable reason used in logs and reports.
    pub fn reason(&self) -> &'static str {
        match self {
            Termination::NoSignificantInstability => "no-significant-instability",
            Termination::TooSmallToSplit => "min-size",
            Termination::MaxDepth => "max-depth",
            Termination::NoAdmissibleCut => "no-valid-split",
            Termination::UnfittableChildren { .. } => "rank-deficient",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub enum SplitKind {
    /// Left child takes rows with value <= threshold.
    NumericThreshold { threshold: f64 },
    /// Left child takes rows whose level code is in this (sorted) set.
    CategoricalSubset { left_levels: Vec<u32> },
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitInfo {
    pub variable: String,
    pub kind: SplitKind,
    pub statistic: f64,
    pub p_value: f64,
    pub adjusted_p_value: f64,
    /// Sum of the two child objectives at the chosen cut.
    pub objective: f64,
    /// Where rows with a missing split value go.
    pub missing_to_left: bool,
}

#[derive(Clone, Debug, Serialize)]
pub enum NodeKind {
    Internal {
        split: SplitInfo,
        left: usize,
        right: usize,
    },
    Leaf {
        termination: Termination,
    },
}

/// One variable's instability test at one node.
#[derive(Clone, Debug, Serialize)]
pub struct VariableTestSummary {
    pub variable: String,
    pub statistic: f64,
    pub p_value: f64,
    pub adjusted_p_value: f64,
}

/// Fitted node model, reduced to what reports need.
#[derive(Clone, Debug, Serialize)]
pub struct NodeModelSummary {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub treatment_estimate: f64,
    pub treatment_std_error: f64,
    pub objective: f64,
    pub n_obs: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TreeNode {
    /// Level-order id; the root is 1.
    pub id: usize,
    pub depth: usize,
    #[serde(skip_serializing)]
    pub rows: Vec<usize>,
    pub n_obs: usize,
    pub model: NodeModelSummary,
    /// Instability tests run at this node, in schema order.
    pub diagnostics: Vec<VariableTestSummary>,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, Serialize)]
pub struct MobTree {
    pub spec: NodeModelSpec,
    pub control: ResolvedControl,
    /// Level-order: `nodes[id - 1].id == id`.
    pub nodes: Vec<TreeNode>,
    /// One line per processed node, in level order.
    pub growth_log: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("invalid control: {0}")]
    InvalidControl(String),
    #[error("`{0}` is not a splitter column of the dataset")]
    UnknownSplitter(String),
    #[error("covariate `{0}` is not a numeric column of the dataset")]
    UnknownCovariate(String),
    #[error("covariate `{name}` has {count} missing value(s); node models need complete covariates")]
    CovariateMissing { name: String, count: usize },
    #[error("root model cannot be fitted: {0}")]
    RootUnfittable(String),
}

/// Why a candidate child model could not be fitted.
pub(crate) enum ChildBlock {
    RankDeficient,
    UnderrepresentedTrial,
}

fn leaf(termination: Termination) -> NodeKind {
    NodeKind::Leaf { termination }
}

// ---------------------------------------------------------------------------
// Node model construction
// ---------------------------------------------------------------------------

pub(crate) fn build_design(ds: &Dataset, rows: &[usize], spec: &NodeModelSpec) -> DesignMatrix {
    let mut labels = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    match spec.intercept {
        InterceptSpec::Pooled => {
            labels.push("intercept".to_string());
            columns.push(vec![1.0; rows.len()]);
        }
        InterceptSpec::StratifiedByTrial => {
            for (k, level) in ds.trial_levels.iter().enumerate() {
                labels.push(format!("intercept[{level}]"));
                columns.push(
                    rows.iter()
                        .map(|&r| if ds.trial_code[r] as usize == k { 1.0 } else { 0.0 })
                        .collect(),
                );
            }
        }
    }
    for name in &spec.covariates {
        let col = match &ds.splitter(name).expect("validated covariate").column {
            SplitterColumn::Numeric(v) => rows.iter().map(|&r| v[r]).collect(),
            SplitterColumn::Categorical { .. } => unreachable!("validated numeric"),
        };
        labels.push(name.clone());
        columns.push(col);
    }
    labels.push("treatment".to_string());
    columns.push(rows.iter().map(|&r| ds.treatment[r] as f64).collect());
    DesignMatrix::new(labels, columns)
}

/// Fit the node model on a row subset, applying the stratified-intercept
/// policy: every trial level present in the subset needs at least two rows.
fn fit_node(
    ds: &Dataset,
    rows: &[usize],
    spec: &NodeModelSpec,
    offset: Option<&[f64]>,
) -> Result<FittedLinearModel, ChildBlock> {
    if spec.intercept == InterceptSpec::StratifiedByTrial {
        let counts = ds.trial_counts(rows);
        if counts.iter().any(|&c| c == 1) {
            return Err(ChildBlock::UnderrepresentedTrial);
        }
    }
    let design = build_design(ds, rows, spec);
    let y: Vec<f64> = rows.iter().map(|&r| ds.outcome[r]).collect();
    let off: Option<Vec<f64>> = offset.map(|o| rows.iter().map(|&r| o[r]).collect());
    fit_ols(&design, &y, off.as_deref()).map_err(|e| match e {
        LinRegError::RankDeficient { .. } => ChildBlock::RankDeficient,
        // Size admissibility is checked before fitting, so these are
        // defensive only.
        LinRegError::Underdetermined { .. } | LinRegError::EmptyDesign => {
            ChildBlock::RankDeficient
        }
    })
}

fn summarize(fit: &FittedLinearModel) -> NodeModelSummary {
    let inference = wald_inference(fit);
    let treatment_idx = fit
        .labels
        .iter()
        .position(|l| l == "treatment")
        .expect("node models always carry a treatment column");
    NodeModelSummary {
        labels: fit.labels.clone(),
        coefficients: fit.coefficients.clone(),
        std_errors: inference.iter().map(|c| c.std_error).collect(),
        treatment_estimate: fit.coefficients[treatment_idx],
        treatment_std_error: inference[treatment_idx].std_error,
        objective: fit.objective,
        n_obs: fit.n_obs,
    }
}

// ---------------------------------------------------------------------------
// Instability testing across candidate variables
// ---------------------------------------------------------------------------

/// Run the matching instability test for every requested splitter (visited
/// in schema order), using only rows where the candidate is observed.
/// Variables whose test cannot run are skipped; the Bonferroni multiplier
/// counts the tests that ran.
fn test_variables(
    ds: &Dataset,
    candidates: &[String],
    rows: &[usize],
    fit: &FittedLinearModel,
    trim: f64,
) -> Vec<VariableTestSummary> {
    let mut out = Vec::new();
    for splitter in &ds.splitters {
        if !candidates.contains(&splitter.name) {
            continue;
        }
        let result: Result<crate::stability::InstabilityTest, StabilityError> =
            match &splitter.column {
                SplitterColumn::Numeric(values) => {
                    let mut scores = Vec::new();
                    let mut z = Vec::new();
                    for (i, &r) in rows.iter().enumerate() {
                        if !values[r].is_nan() {
                            scores.push(fit.scores[i].clone());
                            z.push(values[r]);
                        }
                    }
                    if scores.len() < 2 {
                        continue;
                    }
                    suplm_test(&scores, &z, trim)
                }
                SplitterColumn::Categorical { codes, .. } => {
                    let mut scores = Vec::new();
                    let mut levels = Vec::new();
                    for (i, &r) in rows.iter().enumerate() {
                        if codes[r] != MISSING_CODE {
                            scores.push(fit.scores[i].clone());
                            levels.push(codes[r]);
                        }
                    }
                    if scores.len() < 2 {
                        continue;
                    }
                    categorical_fluctuation_test(&scores, &levels)
                }
            };
        if let Ok(test) = result {
            out.push(VariableTestSummary {
                variable: splitter.name.clone(),
                statistic: test.statistic,
                p_value: test.p_value,
                adjusted_p_value: f64::NAN, // filled in once the count is known
            });
        }
    }
    let m = out.len();
    for t in &mut out {
        t.adjusted_p_value = bonferroni_adjust(t.p_value, m);
    }
    out
}

// ---------------------------------------------------------------------------
// Exhaustive split search on the selected variable
// ---------------------------------------------------------------------------

/// The objective-minimizing cut found by a split search, with the exact row
/// partition it induces (missing-splitter rows already routed).
pub struct CandidateSplit {
    pub kind: SplitKind,
    pub missing_to_left: bool,
    /// Sum of the two child objectives at this cut.
    pub objective: f64,
    pub left_rows: Vec<usize>,
    pub right_rows: Vec<usize>,
}

/// Result of scanning one variable's admissible cuts: the best cut if any
/// exists, plus counts of size-admissible cuts that were discarded because a
/// child model could not be fitted.
pub struct SearchOutcome {
    pub best: Option<CandidateSplit>,
    pub rank_deficient_cuts: usize,
    pub underrepresented_trial_cuts: usize,
}

/// Evaluate one candidate partition of the observed rows: route missing rows
/// to the larger observed side (ties go left), enforce the size floor, fit
/// both children through `fit_child`, and keep the cut if its summed
/// objective strictly beats the incumbent (so earlier candidates win ties).
fn evaluate_cut(
    fit_child: &mut dyn FnMut(&[usize]) -> Result<f64, ChildBlock>,
    min_size: usize,
    left_obs: Vec<usize>,
    right_obs: Vec<usize>,
    missing: &[usize],
    outcome: &mut SearchOutcome,
    kind: impl FnOnce() -> SplitKind,
) {
    let missing_to_left = left_obs.len() >= right_obs.len();
    let mut left = left_obs;
    let mut right = right_obs;
    if missing_to_left {
        left.extend_from_slice(missing);
        left.sort_unstable();
    } else {
        right.extend_from_slice(missing);
        right.sort_unstable();
    }
    if left.len() < min_size || right.len() < min_size {
        return;
    }
    fn blocked(b: ChildBlock, outcome: &mut SearchOutcome) {
        match b {
            ChildBlock::RankDeficient => outcome.rank_deficient_cuts += 1,
            ChildBlock::UnderrepresentedTrial => outcome.underrepresented_trial_cuts += 1,
        }
    }
    let left_objective = match fit_child(&left) {
        Ok(o) => o,
        Err(b) => {
            blocked(b, outcome);
            return;
        }
    };
    let right_objective = match fit_child(&right) {
        Ok(o) => o,
        Err(b) => {
            blocked(b, outcome);
            return;
        }
    };
    let objective = left_objective + right_objective;
    if outcome
        .best
        .as_ref()
        .is_none_or(|b| objective < b.objective)
    {
        outcome.best = Some(CandidateSplit {
            kind: kind(),
            missing_to_left,
            objective,
            left_rows: left,
            right_rows: right,
        });
    }
}

/// Scan every admissible threshold of a numeric variable. Candidate
/// thresholds are midpoints of adjacent distinct observed values, visited in
/// ascending order so objective ties resolve toward the smaller threshold.
pub(crate) fn scan_numeric(
    values: &[f64],
    rows: &[usize],
    min_size: usize,
    fit_child: &mut dyn FnMut(&[usize]) -> Result<f64, ChildBlock>,
) -> SearchOutcome {
    let mut outcome = SearchOutcome {
        best: None,
        rank_deficient_cuts: 0,
        underrepresented_trial_cuts: 0,
    };
    let observed: Vec<usize> = rows.iter().copied().filter(|&r| !values[r].is_nan()).collect();
    let missing: Vec<usize> = rows.iter().copied().filter(|&r| values[r].is_nan()).collect();
    let mut distinct: Vec<f64> = observed.iter().map(|&r| values[r]).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    for w in distinct.windows(2) {
        let threshold = (w[0] + w[1]) / 2.0;
        let left_obs: Vec<usize> = observed
            .iter()
            .copied()
            .filter(|&r| values[r] <= threshold)
            .collect();
        let right_obs: Vec<usize> = observed
            .iter()
            .copied()
            .filter(|&r| values[r] > threshold)
            .collect();
        evaluate_cut(
            fit_child,
            min_size,
            left_obs,
            right_obs,
            &missing,
            &mut outcome,
            || SplitKind::NumericThreshold { threshold },
        );
    }
    outcome
}

/// Scan binary partitions of a categorical variable's observed levels. Up to
/// [`EXHAUSTIVE_LEVEL_LIMIT`] levels every partition is tried (each exactly
/// once, via subsets containing the smallest level); beyond that, levels are
/// ordered by their mean treatment-score contribution and only prefix cuts
/// of that ordering are scanned.
fn scan_categorical(
    codes: &[u32],
    rows: &[usize],
    min_size: usize,
    treatment_score: &dyn Fn(usize) -> f64,
    fit_child: &mut dyn FnMut(&[usize]) -> Result<f64, ChildBlock>,
) -> SearchOutcome {
    let mut outcome = SearchOutcome {
        best: None,
        rank_deficient_cuts: 0,
        underrepresented_trial_cuts: 0,
    };
    let observed: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| codes[r] != MISSING_CODE)
        .collect();
    let missing: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| codes[r] == MISSING_CODE)
        .collect();
    let mut present: Vec<u32> = observed.iter().map(|&r| codes[r]).collect();
    present.sort_unstable();
    present.dedup();
    let l = present.len();
    if l < 2 {
        return outcome;
    }

    let mut try_left_levels = |left_levels: Vec<u32>, outcome: &mut SearchOutcome| {
        let left_obs: Vec<usize> = observed
            .iter()
            .copied()
            .filter(|&r| left_levels.contains(&codes[r]))
            .collect();
        let right_obs: Vec<usize> = observed
            .iter()
            .copied()
            .filter(|&r| !left_levels.contains(&codes[r]))
            .collect();
        evaluate_cut(
            fit_child,
            min_size,
            left_obs,
            right_obs,
            &missing,
            outcome,
            || SplitKind::CategoricalSubset {
                left_levels: left_levels.clone(),
            },
        );
    };

    if l <= EXHAUSTIVE_LEVEL_LIMIT {
        let m = l - 1;
        for mask in 0..(1u32 << m) {
            let mut left_levels: Vec<u32> = std::iter::once(present[0])
                .chain(
                    (0..m)
                        .filter(|&b| mask >> b & 1 == 1)
                        .map(|b| present[b + 1]),
                )
                .collect();
            if left_levels.len() == l {
                continue;
            }
            left_levels.sort_unstable();
            try_left_levels(left_levels, &mut outcome);
        }
    } else {
        // Heuristic ordering: mean treatment-score per level, ascending,
        // ties toward the smaller code. `treatment_score` indexes positions
        // within `rows`.
        let mut means: Vec<(f64, u32)> = present
            .iter()
            .map(|&lev| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for (i, &r) in rows.iter().enumerate() {
                    if codes[r] == lev {
                        sum += treatment_score(i);
                        count += 1;
                    }
                }
                (sum / count as f64, lev)
            })
            .collect();
        means.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for cut in 1..l {
            let mut left_levels: Vec<u32> = means[..cut].iter().map(|&(_, lev)| lev).collect();
            left_levels.sort_unstable();
            try_left_levels(left_levels, &mut outcome);
        }
    }
    outcome
}

/// Exhaustive objective-minimizing split search on one variable: every
/// admissible cut (both children at least `min_size` rows after missing-value
/// routing, both child models fittable) is evaluated by refitting the node
/// model in each child, and the cut with the smallest summed objective wins;
/// ties keep the earliest candidate in scan order. The node model is first
/// fitted on `rows` to order levels for the large-categorical heuristic.
pub fn split_search(
    ds: &Dataset,
    rows: &[usize],
    spec: &NodeModelSpec,
    offset: Option<&[f64]>,
    min_size: usize,
    variable: &str,
) -> Result<SearchOutcome, TreeError> {
    assert!(min_size >= 1, "min_size must be at least 1");
    if ds.splitter(variable).is_none() {
        return Err(TreeError::UnknownSplitter(variable.to_string()));
    }
    let node_fit = fit_node(ds, rows, spec, offset).map_err(|b| {
        TreeError::RootUnfittable(match b {
            ChildBlock::RankDeficient => "design is rank deficient".to_string(),
            ChildBlock::UnderrepresentedTrial => {
                "a trial level has fewer than two observations".to_string()
            }
        })
    })?;
    Ok(search_split(
        ds, rows, spec, offset, min_size, variable, &node_fit,
    ))
}

fn search_split(
    ds: &Dataset,
    rows: &[usize],
    spec: &NodeModelSpec,
    offset: Option<&[f64]>,
    min_size: usize,
    variable: &str,
    node_fit: &FittedLinearModel,
) -> SearchOutcome {
    let mut fit_child =
        |child_rows: &[usize]| fit_node(ds, child_rows, spec, offset).map(|f| f.objective);
    let splitter = ds.splitter(variable).expect("selected variable exists");
    match &splitter.column {
        SplitterColumn::Numeric(values) => scan_numeric(values, rows, min_size, &mut fit_child),
        SplitterColumn::Categorical { codes, .. } => {
            let treatment_idx = node_fit
                .labels
                .iter()
                .position(|l| l == "treatment")
                .expect("treatment column present");
            let scores = &node_fit.scores;
            scan_categorical(
                codes,
                rows,
                min_size,
                &|i| scores[i][treatment_idx],
                &mut fit_child,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Growth
// ---------------------------------------------------------------------------

fn validate(
    ds: &Dataset,
    spec: &NodeModelSpec,
    splitters: &[String],
    control: &GrowControl,
) -> Result<ResolvedControl, TreeError> {
    if !(control.alpha > 0.0 && control.alpha < 1.0) {
        return Err(TreeError::InvalidControl(format!(
            "alpha must lie strictly between 0 and 1, got {}",
            control.alpha
        )));
    }
    if !(0.05..=0.25).contains(&control.trim) {
        return Err(TreeError::InvalidControl(format!(
            "trim must lie in [0.05, 0.25], got {}",
            control.trim
        )));
    }
    for name in splitters {
        if ds.splitter(name).is_none() {
            return Err(TreeError::UnknownSplitter(name.clone()));
        }
    }
    for name in &spec.covariates {
        match ds.splitter(name) {
            None => return Err(TreeError::UnknownCovariate(name.clone())),
            Some(s) => match &s.column {
                SplitterColumn::Numeric(v) => {
                    let count = v.iter().filter(|x| x.is_nan()).count();
                    if count > 0 {
                        return Err(TreeError::CovariateMissing {
                            name: name.clone(),
                            count,
                        });
                    }
                }
                SplitterColumn::Categorical { .. } => {
                    return Err(TreeError::UnknownCovariate(name.clone()))
                }
            },
        }
    }
    let p = spec.n_params(ds);
    let min_node_size = control.min_node_size.unwrap_or(10 * p);
    if min_node_size < 2 * p {
        return Err(TreeError::InvalidControl(format!(
            "min_node_size {min_node_size} is below twice the node model dimension {p}"
        )));
    }
    Ok(ResolvedControl {
        alpha: control.alpha,
        min_node_size,
        max_depth: control.max_depth,
        trim: control.trim,
    })
}

/// Grow a tree on the full dataset, splitting only on the named candidate
/// variables (an empty list yields a single vacuously stable leaf), and
/// optionally against a per-row offset that is subtracted from the outcome
/// in every node and split fit.
pub fn grow_tree(
    ds: &Dataset,
    spec: &NodeModelSpec,
    splitters: &[String],
    control: &GrowControl,
    offset: Option<&[f64]>,
) -> Result<MobTree, TreeError> {
    let resolved = validate(ds, spec, splitters, control)?;
    if let Some(o) = offset {
        assert_eq!(o.len(), ds.n_rows(), "offset must cover every dataset row");
    }
    let all_rows: Vec<usize> = (0..ds.n_rows()).collect();
    let root_fit = fit_node(ds, &all_rows, spec, offset).map_err(|b| {
        TreeError::RootUnfittable(match b {
            ChildBlock::RankDeficient => "design is rank deficient".to_string(),
            ChildBlock::UnderrepresentedTrial => {
                "a trial level has fewer than two observations".to_string()
            }
        })
    })?;

    struct Pending {
        id: usize,
        depth: usize,
        rows: Vec<usize>,
        fit: FittedLinearModel,
    }

    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut growth_log: Vec<String> = Vec::new();
    let mut queue: VecDeque<Pending> = VecDeque::new();
    let mut next_id = 1usize;
    queue.push_back(Pending {
        id: next_id,
        depth: 0,
        rows: all_rows,
        fit: root_fit,
    });

    while let Some(pending) = queue.pop_front() {
        let Pending {
            id,
            depth,
            rows,
            fit,
        } = pending;
        let model = summarize(&fit);
        let n_obs = rows.len();
        let mut diagnostics = Vec::new();

        let kind = 'decide: {
            if resolved.max_depth.is_some_and(|d| depth >= d) {
                break 'decide leaf(Termination::MaxDepth);
            }
            if n_obs < 2 * resolved.min_node_size {
                break 'decide leaf(Termination::TooSmallToSplit);
            }
            diagnostics = test_variables(ds, splitters, &rows, &fit, resolved.trim);
            // An empty test set (no candidates, or none testable) is
            // vacuously stable. Ties keep the earliest variable in schema
            // order via strict comparison.
            let Some(selected) = diagnostics
                .iter()
                .min_by(|a, b| a.p_value.total_cmp(&b.p_value))
            else {
                break 'decide leaf(Termination::NoSignificantInstability);
            };
            if selected.adjusted_p_value > resolved.alpha {
                break 'decide leaf(Termination::NoSignificantInstability);
            }
            let selected = selected.clone();
            let outcome = search_split(
                ds,
                &rows,
                spec,
                offset,
                resolved.min_node_size,
                &selected.variable,
                &fit,
            );
            match outcome.best {
                None => {
                    if outcome.rank_deficient_cuts + outcome.underrepresented_trial_cuts > 0 {
                        break 'decide leaf(Termination::UnfittableChildren {
                            rank_deficient_cuts: outcome.rank_deficient_cuts,
                            underrepresented_trial_cuts: outcome.underrepresented_trial_cuts,
                        });
                    }
                    break 'decide leaf(Termination::NoAdmissibleCut);
                }
                Some(best) => {
                    let left_fit = fit_node(ds, &best.left_rows, spec, offset)
                        .unwrap_or_else(|_| unreachable!("search fitted this child"));
                    let right_fit = fit_node(ds, &best.right_rows, spec, offset)
                        .unwrap_or_else(|_| unreachable!("search fitted this child"));
                    let left_id = next_id + 1;
                    let right_id = next_id + 2;
                    next_id += 2;
                    queue.push_back(Pending {
                        id: left_id,
                        depth: depth + 1,
                        rows: best.left_rows,
                        fit: left_fit,
                    });
                    queue.push_back(Pending {
                        id: right_id,
                        depth: depth + 1,
                        rows: best.right_rows,
                        fit: right_fit,
                    });
                    NodeKind::Internal {
                        split: SplitInfo {
                            variable: selected.variable.clone(),
                            kind: best.kind,
                            statistic: selected.statistic,
                            p_value: selected.p_value,
                            adjusted_p_value: selected.adjusted_p_value,
                            objective: best.objective,
                            missing_to_left: best.missing_to_left,
                        },
                        left: left_id,
                        right: right_id,
                    }
                }
            }
        };

        growth_log.push(match &kind {
            NodeKind::Internal { split, left, right } => format!(
                "node {id} (depth {depth}, n={n_obs}): split {} (adjusted p {:.3e}) -> nodes {left}/{right}",
                split.variable, split.adjusted_p_value
            ),
            NodeKind::Leaf { termination } => format!(
                "node {id} (depth {depth}, n={n_obs}): leaf ({})",
                termination.reason()
            ),
        });
        nodes.push(TreeNode {
            id,
            depth,
            rows,
            n_obs,
            model,
            diagnostics,
            kind,
        });
    }

    Ok(MobTree {
        spec: spec.clone(),
        control: resolved,
        nodes,
        growth_log,
    })
}

impl MobTree {
    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id - 1]
    }

    pub fn root(&self) -> &TreeNode {
        self.node(1)
    }

    pub fn leaves(&self) -> Vec<&TreeNode> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Route one dataset row to its leaf id. Rows with a missing (or, for
    /// categorical splits, previously unseen) value follow the stored
    /// missing-direction of each split.
    pub fn route_row(&self, ds: &Dataset, row: usize) -> usize {
        let mut id = 1;
        loop {
            match &self.node(id).kind {
                NodeKind::Leaf { .. } => return id,
                NodeKind::Internal { split, left, right } => {
                    let go_left = match &split.kind {
                        SplitKind::NumericThreshold { threshold } => {
                            match &ds.splitter(&split.variable).expect("split variable").column {
                                SplitterColumn::Numeric(v) => {
                                    if v[row].is_nan() {
                                        split.missing_to_left
                                    } else {
                                        v[row] <= *threshold
                                    }
                                }
                                _ => unreachable!("numeric split on numeric column"),
                            }
                        }
                        SplitKind::CategoricalSubset { left_levels } => {
                            match &ds.splitter(&split.variable).expect("split variable").column {
                                SplitterColumn::Categorical { codes, .. } => {
                                    if codes[row] == MISSING_CODE {
                                        split.missing_to_left
                                    } else if left_levels.contains(&codes[row]) {
                                        true
                                    } else {
                                        let seen_right = self
                                            .node(*right)
                                            .rows
                                            .iter()
                                            .any(|&rr| codes[rr] == codes[row]);
                                        if seen_right {
                                            false
                                        } else {
                                            // Unseen level: fall back to the
                                            // missing direction.
                                            split.missing_to_left
                                        }
                                    }
                                }
                                _ => unreachable!("categorical split on categorical column"),
                            }
                        }
                    };
                    id = if go_left { *left } else { *right };
                }
            }
        }
    }

    /// Leaf id per dataset row.
    pub fn leaf_assignment(&self, ds: &Dataset) -> Vec<usize> {
        (0..ds.n_rows()).map(|r| self.route_row(ds, r)).collect()
    }

    /// Canonical structural fingerprint: split variables, exact cut points
    /// (bit patterns), and missing directions, in level order. Two trees with
    /// the same key partition any dataset identically.
    pub fn structure_key(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Leaf { .. } => out.push('L'),
                NodeKind::Internal { split, .. } => {
                    out.push_str("N(");
                    out.push_str(&split.variable);
                    out.push(',');
                    match &split.kind {
                        SplitKind::NumericThreshold { threshold } => {
                            out.push_str(&format!("{:016x}", threshold.to_bits()));
                        }
                        SplitKind::CategoricalSubset { left_levels } => {
                            for l in left_levels {
                                out.push_str(&format!("{l},"));
                            }
                        }
                    }
                    out.push(',');
                    out.push(if split.missing_to_left { 'l' } else { 'r' });
                    out.push(')');
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ColumnRole, ColumnSpec, IngestOptions, Schema};

    /// Build a dataset directly from columns via the CSV path (keeps one
    /// ingestion code path).
    fn dataset_from_rows(
        header: &str,
        rows: impl IntoIterator<Item = String>,
        schema: &Schema,
    ) -> Dataset {
        let mut text = String::from(header);
        text.push('\n');
        for r in rows {
            text.push_str(&r);
            text.push('\n');
        }
        crate::dataset::ingest_csv_reader(text.as_bytes(), schema, &IngestOptions::default())
            .unwrap()
    }

    fn all_splitters(ds: &Dataset) -> Vec<String> {
        ds.splitters.iter().map(|s| s.name.clone()).collect()
    }

    fn planted_schema() -> Schema {
        Schema::new(vec![
            ColumnSpec {
                name: "y".into(),
                role: ColumnRole::OutcomeNumeric,
            },
            ColumnSpec {
                name: "treat".into(),
                role: ColumnRole::TreatmentBinary,
            },
            ColumnSpec {
                name: "trial".into(),
                role: ColumnRole::TrialId,
            },
            ColumnSpec {
                name: "age".into(),
                role: ColumnRole::SplitterNumeric,
            },
            ColumnSpec {
                name: "marker".into(),
                role: ColumnRole::SplitterNumeric,
            },
        ])
        .unwrap()
    }

    /// One trial, treatment effect -3 when age > 50, else 0; age spread over
    /// [30, 70]; marker is noise.
    fn planted_dataset(seed: u64, n: usize) -> Dataset {
        let mut rng = oracles::DeskRng::new(seed);
        let rows = (0..n).map(|i| {
            let age = 30.0 + ((i * 7919) % 41) as f64;
            let t = i % 2;
            let marker = rng.normal();
            let effect = if age > 50.0 { -3.0 } else { 0.0 };
            let y = 5.0 + effect * t as f64 + 0.8 * rng.normal();
            format!("{y},{t},T1,{age},{marker}")
        });
        dataset_from_rows("y,treat,trial,age,marker", rows.collect::<Vec<_>>(), &planted_schema())
    }

    fn pooled_spec() -> NodeModelSpec {
        NodeModelSpec {
            intercept: InterceptSpec::Pooled,
            covariates: vec![],
        }
    }

    #[test]
    fn planted_threshold_is_recovered_and_matches_exhaustive_oracle() {
        let ds = planted_dataset(71, 400);
        let tree = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            None,
        )
        .unwrap();
        let NodeKind::Internal { split, .. } = &tree.root().kind else {
            panic!("root should split");
        };
        assert_eq!(split.variable, "age");
        let SplitKind::NumericThreshold { threshold } = split.kind else {
            panic!("numeric split expected");
        };
        assert!(
            (49.0..=52.0).contains(&threshold),
            "threshold {threshold} far from planted 50"
        );

        // The chosen cut must agree with the literal exhaustive re-fit scan.
        let design = build_design(&ds, &(0..ds.n_rows()).collect::<Vec<_>>(), &pooled_spec());
        let age: Vec<f64> = match &ds.splitter("age").unwrap().column {
            SplitterColumn::Numeric(v) => v.clone(),
            _ => unreachable!(),
        };
        let oracle = oracles::split_scan(
            design.columns(),
            &ds.outcome,
            None,
            &age,
            tree.control.min_node_size,
        )
        .unwrap();
        assert_eq!(threshold, oracle.threshold);
        assert!((split.objective - oracle.objective).abs() <= 1e-9 * (1.0 + oracle.objective.abs()));
    }

    #[test]
    fn intercept_only_scan_finds_the_obvious_separation() {
        // Four observations, two per side, perfectly separable: the best
        // threshold is the midpoint 2.5 and each child attains the
        // perfect-fit floor objective.
        let y = [0.0, 0.0, 10.0, 10.0];
        let z = [1.0, 2.0, 3.0, 4.0];
        let rows = [0usize, 1, 2, 3];
        let mut fit_child = |child: &[usize]| -> Result<f64, ChildBlock> {
            let cols = vec![vec![1.0; child.len()]];
            let ys: Vec<f64> = child.iter().map(|&i| y[i]).collect();
            oracles::ols_normal_equations(&cols, &ys, None)
                .map(|s| s.objective)
                .ok_or(ChildBlock::RankDeficient)
        };
        let outcome = scan_numeric(&z, &rows, 2, &mut fit_child);
        let best = outcome.best.expect("a cut exists");
        let SplitKind::NumericThreshold { threshold } = best.kind else {
            panic!("numeric cut expected");
        };
        assert_eq!(threshold, 2.5);
        let floor = oracles::gaussian_nll(0.0, 2);
        assert!((best.objective - 2.0 * floor).abs() < 1e-12);
    }

    #[test]
    fn split_objective_equals_sum_of_child_objectives() {
        let ds = planted_dataset(72, 300);
        let tree = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            None,
        )
        .unwrap();
        for node in &tree.nodes {
            if let NodeKind::Internal { split, left, right } = &node.kind {
                let sum = tree.node(*left).model.objective + tree.node(*right).model.objective;
                assert_eq!(split.objective, sum, "node {}", node.id);
            }
        }
        // Each executed split weakly decreases the total objective, so the
        // leaves in aggregate fit no worse than the root.
        let leaf_sum: f64 = tree.leaves().iter().map(|l| l.model.objective).sum();
        assert!(leaf_sum <= tree.root().model.objective + 1e-9);
    }

    #[test]
    fn node_ids_are_level_order_from_one() {
        let ds = planted_dataset(73, 500);
        let control = GrowControl {
            min_node_size: Some(40),
            ..GrowControl::default()
        };
        let tree = grow_tree(&ds, &pooled_spec(), &all_splitters(&ds), &control, None).unwrap();
        for (i, node) in tree.nodes.iter().enumerate() {
            assert_eq!(node.id, i + 1);
        }
        for node in &tree.nodes {
            if let NodeKind::Internal { left, right, .. } = &node.kind {
                assert_eq!(right - left, 1, "children are consecutive ids");
                assert!(*left > node.id);
                assert_eq!(tree.node(*left).depth, node.depth + 1);
            }
        }
        // Depths never decrease in id order (level order).
        for w in tree.nodes.windows(2) {
            assert!(w[0].depth <= w[1].depth);
        }
        assert_eq!(tree.growth_log.len(), tree.nodes.len());
    }

    #[test]
    fn identical_candidates_tie_break_toward_schema_order() {
        // Two identical copies of the informative variable: equal p-values,
        // the first in schema order must win.
        let schema = Schema::new(vec![
            ColumnSpec {
                name: "y".into(),
                role: ColumnRole::OutcomeNumeric,
            },
            ColumnSpec {
                name: "treat".into(),
                role: ColumnRole::TreatmentBinary,
            },
            ColumnSpec {
                name: "trial".into(),
                role: ColumnRole::TrialId,
            },
            ColumnSpec {
                name: "first_copy".into(),
                role: ColumnRole::SplitterNumeric,
            },
            ColumnSpec {
                name: "second_copy".into(),
                role: ColumnRole::SplitterNumeric,
            },
        ])
        .unwrap();
        let mut rng = oracles::DeskRng::new(74);
        let rows: Vec<String> = (0..300)
            .map(|i| {
                let age = 30.0 + ((i * 7919) % 41) as f64;
                let t = i % 2;
                let effect = if age > 50.0 { -3.0 } else { 0.0 };
                let y = 5.0 + effect * t as f64 + 0.8 * rng.normal();
                format!("{y},{t},T1,{age},{age}")
            })
            .collect();
        let ds = dataset_from_rows("y,treat,trial,first_copy,second_copy", rows, &schema);
        let tree = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            None,
        )
        .unwrap();
        let NodeKind::Internal { split, .. } = &tree.root().kind else {
            panic!("root should split");
        };
        assert_eq!(split.variable, "first_copy");
        // Both candidates were tested and recorded with equal p-values.
        let d = &tree.root().diagnostics;
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].p_value, d[1].p_value);
        assert_eq!(d[0].adjusted_p_value, bonferroni_adjust(d[0].p_value, 2));
    }

    #[test]
    fn candidate_list_restricts_testing_and_empty_list_is_vacuous() {
        let ds = planted_dataset(84, 400);
        // Only the uninformative marker is offered: no significant split.
        let tree = grow_tree(
            &ds,
            &pooled_spec(),
            &["marker".to_string()],
            &GrowControl::default(),
            None,
        )
        .unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.root().diagnostics.len(), 1);
        assert_eq!(tree.root().diagnostics[0].variable, "marker");
        // No candidates at all: vacuously stable single leaf.
        let vacuous = grow_tree(&ds, &pooled_spec(), &[], &GrowControl::default(), None).unwrap();
        assert_eq!(vacuous.nodes.len(), 1);
        assert!(matches!(
            vacuous.root().kind,
            NodeKind::Leaf {
                termination: Termination::NoSignificantInstability
            }
        ));
        assert!(vacuous.root().diagnostics.is_empty());
        // Unknown names are rejected.
        let unknown = grow_tree(
            &ds,
            &pooled_spec(),
            &["bogus".to_string()],
            &GrowControl::default(),
            None,
        );
        assert!(matches!(unknown, Err(TreeError::UnknownSplitter(_))));
    }

    #[test]
    fn missing_split_values_route_to_the_majority_side() {
        // Planted split at 50 with a lopsided observed partition plus rows
        // whose age is missing.
        let mut rng = oracles::DeskRng::new(75);
        let rows: Vec<String> = (0..300)
            .map(|i| {
                if i % 10 == 9 {
                    let t = i % 2;
                    let y = 5.0 + 0.8 * rng.normal();
                    format!("{y},{t},T1,NA,{}", rng.normal())
                } else {
                    // 70% of observed rows below the threshold.
                    let age = if i % 10 < 7 {
                        30.0 + (i % 20) as f64
                    } else {
                        51.0 + (i % 19) as f64
                    };
                    let t = i % 2;
                    let effect = if age > 50.0 { -4.0 } else { 0.0 };
                    let y = 5.0 + effect * t as f64 + 0.8 * rng.normal();
                    format!("{y},{t},T1,{age},{}", rng.normal())
                }
            })
            .collect();
        let ds = dataset_from_rows("y,treat,trial,age,marker", rows, &planted_schema());
        let tree = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            None,
        )
        .unwrap();
        let NodeKind::Internal { split, left, right } = &tree.root().kind else {
            panic!("root should split");
        };
        assert_eq!(split.variable, "age");
        assert!(split.missing_to_left, "majority of observed rows sit left");
        let age = match &ds.splitter("age").unwrap().column {
            SplitterColumn::Numeric(v) => v.clone(),
            _ => unreachable!(),
        };
        let left_rows = &tree.node(*left).rows;
        let right_rows = &tree.node(*right).rows;
        for r in 0..ds.n_rows() {
            if age[r].is_nan() {
                assert!(left_rows.contains(&r), "missing row {r} must go left");
                assert!(!right_rows.contains(&r));
            }
        }
        // Routing agrees with the stored partition for every training row.
        let assignment = tree.leaf_assignment(&ds);
        for leaf in tree.leaves() {
            for &r in &leaf.rows {
                assert_eq!(assignment[r], leaf.id);
            }
        }
    }

    #[test]
    fn pure_noise_keeps_the_root_a_leaf() {
        let mut rng = oracles::DeskRng::new(76);
        let rows: Vec<String> = (0..250)
            .map(|i| {
                let y = rng.normal();
                let age = 30.0 + ((i * 7919) % 41) as f64;
                format!("{y},{},T1,{age},{}", i % 2, rng.normal())
            })
            .collect();
        let ds = dataset_from_rows("y,treat,trial,age,marker", rows, &planted_schema());
        let tree = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            None,
        )
        .unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert!(matches!(
            tree.root().kind,
            NodeKind::Leaf {
                termination: Termination::NoSignificantInstability
            }
        ));
    }

    #[test]
    fn depth_and_size_stops_are_reported() {
        let ds = planted_dataset(77, 400);
        let shallow = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl {
                max_depth: Some(0),
                ..GrowControl::default()
            },
            None,
        )
        .unwrap();
        assert!(matches!(
            shallow.root().kind,
            NodeKind::Leaf {
                termination: Termination::MaxDepth
            }
        ));

        let tiny = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl {
                min_node_size: Some(300),
                ..GrowControl::default()
            },
            None,
        )
        .unwrap();
        assert!(matches!(
            tiny.root().kind,
            NodeKind::Leaf {
                termination: Termination::TooSmallToSplit
            }
        ));
    }

    #[test]
    fn stratified_guard_blocks_cuts_that_strand_a_trial() {
        // Trial B has exactly two rows, at the extreme low and high ends of
        // age: every admissible cut separates them, leaving one B row per
        // side, so no cut can be realized and the counts say why.
        let mut rng = oracles::DeskRng::new(78);
        let mut rows: Vec<String> = (0..200)
            .map(|i| {
                let age = 30.0 + ((i * 7919) % 41) as f64;
                let t = i % 2;
                let effect = if age > 50.0 { -4.0 } else { 0.0 };
                let y = 5.0 + effect * t as f64 + 0.8 * rng.normal();
                format!("{y},{t},A,{age},{}", rng.normal())
            })
            .collect();
        rows.push(format!("5.0,0,B,1.0,{}", rng.normal()));
        rows.push(format!("5.0,1,B,99.0,{}", rng.normal()));
        let ds = dataset_from_rows("y,treat,trial,age,marker", rows, &planted_schema());
        let spec = NodeModelSpec {
            intercept: InterceptSpec::StratifiedByTrial,
            covariates: vec![],
        };
        let tree = grow_tree(&ds, &spec, &all_splitters(&ds), &GrowControl::default(), None)
            .unwrap();
        assert_eq!(tree.nodes.len(), 1);
        match &tree.root().kind {
            NodeKind::Leaf {
                termination:
                    termination @ Termination::UnfittableChildren {
                        rank_deficient_cuts,
                        underrepresented_trial_cuts,
                    },
            } => {
                assert!(
                    *underrepresented_trial_cuts > 0,
                    "expected underrepresented-trial blocks, got rank={rank_deficient_cuts}"
                );
                assert_eq!(termination.reason(), "rank-deficient");
            }
            other => panic!("expected an unfittable-children leaf, got {other:?}"),
        }
    }

    #[test]
    fn growth_is_deterministic() {
        let ds = planted_dataset(79, 350);
        let t1 = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            None,
        )
        .unwrap();
        let t2 = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            None,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&t1).unwrap(),
            serde_json::to_string(&t2).unwrap()
        );
        assert_eq!(t1.structure_key(), t2.structure_key());
    }

    #[test]
    fn stricter_alpha_grows_a_prefix_of_the_looser_tree() {
        let ds = planted_dataset(80, 600);
        let loose = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl {
                alpha: 0.2,
                min_node_size: Some(30),
                ..GrowControl::default()
            },
            None,
        )
        .unwrap();
        let strict = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl {
                alpha: 0.001,
                min_node_size: Some(30),
                ..GrowControl::default()
            },
            None,
        )
        .unwrap();
        assert!(strict.nodes.len() <= loose.nodes.len());
        // Every internal node of the strict tree appears in the loose tree
        // with the identical split (matched by row set, since level-order ids
        // can shift when subtrees differ in size).
        for s in &strict.nodes {
            if let NodeKind::Internal { split, .. } = &s.kind {
                let twin = loose
                    .nodes
                    .iter()
                    .find(|l| l.rows == s.rows)
                    .expect("strict node exists in loose tree");
                match &twin.kind {
                    NodeKind::Internal { split: lsplit, .. } => {
                        assert_eq!(split.variable, lsplit.variable);
                        match (&split.kind, &lsplit.kind) {
                            (
                                SplitKind::NumericThreshold { threshold: a },
                                SplitKind::NumericThreshold { threshold: b },
                            ) => assert_eq!(a, b),
                            (
                                SplitKind::CategoricalSubset { left_levels: a },
                                SplitKind::CategoricalSubset { left_levels: b },
                            ) => assert_eq!(a, b),
                            _ => panic!("split kinds disagree"),
                        }
                    }
                    NodeKind::Leaf { .. } => panic!("loose tree must also split this node"),
                }
            }
        }
    }

    #[test]
    fn invalid_controls_are_rejected() {
        let ds = planted_dataset(81, 100);
        let splitters = all_splitters(&ds);
        let bad_alpha = grow_tree(
            &ds,
            &pooled_spec(),
            &splitters,
            &GrowControl {
                alpha: 0.0,
                ..GrowControl::default()
            },
            None,
        );
        assert!(matches!(bad_alpha, Err(TreeError::InvalidControl(_))));
        let bad_trim = grow_tree(
            &ds,
            &pooled_spec(),
            &splitters,
            &GrowControl {
                trim: 0.3,
                ..GrowControl::default()
            },
            None,
        );
        assert!(matches!(bad_trim, Err(TreeError::InvalidControl(_))));
        // The floor is twice the node model dimension (here p = 2).
        let bad_min = grow_tree(
            &ds,
            &pooled_spec(),
            &splitters,
            &GrowControl {
                min_node_size: Some(3),
                ..GrowControl::default()
            },
            None,
        );
        assert!(matches!(bad_min, Err(TreeError::InvalidControl(_))));
        let bad_covariate = grow_tree(
            &ds,
            &NodeModelSpec {
                intercept: InterceptSpec::Pooled,
                covariates: vec!["nonexistent".into()],
            },
            &splitters,
            &GrowControl::default(),
            None,
        );
        assert!(matches!(bad_covariate, Err(TreeError::UnknownCovariate(_))));
    }

    #[test]
    fn categorical_splits_partition_levels() {
        // Outcome depends on a three-level group: {a} vs {b, c} in treatment
        // effect.
        let schema = Schema::new(vec![
            ColumnSpec {
                name: "y".into(),
                role: ColumnRole::OutcomeNumeric,
            },
            ColumnSpec {
                name: "treat".into(),
                role: ColumnRole::TreatmentBinary,
            },
            ColumnSpec {
                name: "trial".into(),
                role: ColumnRole::TrialId,
            },
            ColumnSpec {
                name: "grp".into(),
                role: ColumnRole::SplitterCategorical,
            },
        ])
        .unwrap();
        let mut rng = oracles::DeskRng::new(82);
        let rows: Vec<String> = (0..360)
            .map(|i| {
                let grp = ["a", "b", "c"][i % 3];
                let t = (i / 3) % 2;
                let effect = if grp == "a" { -4.0 } else { 0.0 };
                let y = 3.0 + effect * t as f64 + 0.7 * rng.normal();
                format!("{y},{t},T1,{grp}")
            })
            .collect();
        let ds = dataset_from_rows("y,treat,trial,grp", rows, &schema);
        let tree = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            None,
        )
        .unwrap();
        let NodeKind::Internal { split, .. } = &tree.root().kind else {
            panic!("root should split");
        };
        assert_eq!(split.variable, "grp");
        let SplitKind::CategoricalSubset { left_levels } = &split.kind else {
            panic!("categorical split expected");
        };
        // Level "a" has code 0 (first seen); it must sit alone on one side.
        let levels = match &ds.splitter("grp").unwrap().column {
            SplitterColumn::Categorical { levels, .. } => levels.clone(),
            _ => unreachable!(),
        };
        let left_names: Vec<&str> = left_levels
            .iter()
            .map(|&c| levels[c as usize].as_str())
            .collect();
        assert!(
            left_names == ["a"] || left_names == ["b", "c"],
            "unexpected partition {left_names:?}"
        );
    }

    #[test]
    fn offset_shifts_the_fitted_intercept() {
        let ds = planted_dataset(83, 200);
        let offset = vec![2.5; ds.n_rows()];
        let with = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            Some(&offset),
        )
        .unwrap();
        let without = grow_tree(
            &ds,
            &pooled_spec(),
            &all_splitters(&ds),
            &GrowControl::default(),
            None,
        )
        .unwrap();
        // A constant offset cannot change instability tests or split choice,
        // only intercepts.
        assert_eq!(with.structure_key(), without.structure_key());
        let a = with.root().model.coefficients[0];
        let b = without.root().model.coefficients[0];
        assert!((b - a - 2.5).abs() < 1e-10, "intercepts {a} vs {b}");
    }
}
