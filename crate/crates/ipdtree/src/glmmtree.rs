//! Alternating tree/global-model estimation.
//!
//! The tree engine captures subgroup structure; a global model captures
//! between-trial structure. Each conditions on the other through an offset:
//! the tree is grown on the outcome minus the global model's trial-level
//! predictions, then the global model is refit on a fixed-effect design
//! spanned by the tree's leaves. Two flavors share the loop: a mixed model
//! with random trial intercepts and/or random treatment slopes, and a plain
//! linear model with fixed, reference-coded trial intercepts.
//!
//! The loop stops when two consecutive trees are structurally identical
//! (preferred — the tree is the meaningful fixed point; the returned global
//! model is the one fitted on that structure), when the global objective
//! moves by less than the tolerance, or at the iteration cap, in which case
//! the last iterate is returned and `converged` is false.

use crate::dataset::Dataset;
use crate::linreg::{fit_ols, DesignMatrix, FittedLinearModel, LinRegError};
use crate::mixed::{fit_lmm, predict_random_offset, MixedError, MixedModelFit, RandomSpec};
use crate::mobtree::{
    grow_tree, GrowControl, MobTree, NodeKind, NodeModelSpec, Termination, TreeError,
};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Clone, Debug, Serialize)]
pub struct AlternationControl {
    pub max_iterations: usize,
    /// Absolute tolerance on the change of the global model's objective.
    pub objective_tolerance: f64,
    /// Stop as soon as two consecutive trees are structurally identical.
    pub tree_stability_stop: bool,
}

impl Default for AlternationControl {
    fn default() -> Self {
        AlternationControl {
            max_iterations: 100,
            objective_tolerance: 1e-4,
            tree_stability_stop: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StopReason {
    /// Two consecutive trees were structurally identical.
    TreeStable,
    /// The global objective changed by less than the tolerance.
    ObjectiveConverged,
    /// The iteration cap was reached; the last iterate is returned.
    IterationLimit,
}

/// The global model fitted between tree growths.
#[derive(Clone, Debug, Serialize)]
pub enum GlobalModel {
    Mixed(MixedModelFit),
    FixedTrialIntercepts(FittedLinearModel),
}

impl GlobalModel {
    pub fn objective(&self) -> f64 {
        match self {
            GlobalModel::Mixed(m) => m.reml_objective,
            GlobalModel::FixedTrialIntercepts(f) => f.objective,
        }
    }

    pub fn labels(&self) -> &[String] {
        match self {
            GlobalModel::Mixed(m) => &m.labels,
            GlobalModel::FixedTrialIntercepts(f) => &f.labels,
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        match self {
            GlobalModel::Mixed(m) => &m.fixed_coefficients,
            GlobalModel::FixedTrialIntercepts(f) => &f.coefficients,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GlmmTreeFit {
    pub tree: MobTree,
    pub global: GlobalModel,
    pub iterations_used: usize,
    pub converged: bool,
    pub stop: StopReason,
    /// Global-model objective per iteration (not necessarily monotone — the
    /// alternation has no joint objective; logged for diagnostics).
    pub per_iteration_log: Vec<f64>,
    /// (intercept variance, slope variance) per global mixed-model fit, in
    /// iteration order; empty for fixed-intercept fits. Lets callers check
    /// whether every iteration sat on the zero-variance boundary.
    pub variance_log: Vec<(f64, f64)>,
}

impl GlmmTreeFit {
    /// The mixed global model, when this fit has one.
    pub fn mixed(&self) -> Option<&MixedModelFit> {
        match &self.global {
            GlobalModel::Mixed(m) => Some(m),
            GlobalModel::FixedTrialIntercepts(_) => None,
        }
    }

    /// Estimated variance components (random intercept, random slope), when
    /// the global model has them.
    pub fn variance_components(&self) -> Option<(f64, f64)> {
        self.mixed().map(|m| (m.tau0_sq, m.tau1_sq))
    }

    /// The per-row offset the returned global model implies — the offset
    /// under which re-growing the tree reproduces `self.tree` whenever the
    /// loop stopped on tree stability.
    pub fn trial_offset(&self, ds: &Dataset) -> Vec<f64> {
        offset_from_global(&self.global, ds)
    }
}

/// One leaf's treatment effect from the final global model, with per-trial
/// support counts for the underrepresentation diagnostic.
#[derive(Clone, Debug, Serialize)]
pub struct LeafEffect {
    pub leaf_id: usize,
    pub n_obs: usize,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub p_value: Option<f64>,
    /// The leaf has rows from one treatment arm only, so its effect is not
    /// estimable and the fields above are absent.
    pub degenerate_variance: bool,
    /// Rows per trial level (dataset trial order) inside this leaf.
    pub trial_counts: Vec<usize>,
    /// Trial levels contributing exactly one row to this leaf.
    pub underrepresented_trials: Vec<String>,
    /// True when this leaf stopped splitting because candidate children
    /// would have stranded a trial level with a single observation.
    pub split_blocked_by_underrepresentation: bool,
}

impl LeafEffect {
    /// Any trial-support warning: a level with a single row in the leaf, or
    /// further splitting blocked by trial-level support.
    pub fn underrepresentation_flag(&self) -> bool {
        !self.underrepresented_trials.is_empty() || self.split_blocked_by_underrepresentation
    }
}

#[derive(Debug, Error)]
pub enum GlmmError {
    #[error("invalid control: {0}")]
    InvalidControl(String),
    #[error("tree growth failed at iteration {iteration}: {source}")]
    Tree {
        iteration: usize,
        #[source]
        source: TreeError,
    },
    #[error("global mixed model failed at iteration {iteration}: {source}")]
    GlobalMixed {
        iteration: usize,
        #[source]
        source: MixedError,
    },
    #[error("global linear model failed at iteration {iteration}: {source}")]
    GlobalLinear {
        iteration: usize,
        #[source]
        source: LinRegError,
    },
}

// ---------------------------------------------------------------------------
// Global design construction
// ---------------------------------------------------------------------------

/// Build the global fixed-effect design spanned by a tree's leaves: one
/// main indicator per leaf, optional reference-coded trial dummies, and one
/// `leaf[id]:treatment` interaction per leaf that contains both arms.
/// One-armed leaves keep their main column but get no interaction (it would
/// be zero or collinear); downstream reporting flags them as degenerate by
/// the absence of their interaction label.
pub(crate) fn build_global_design(
    ds: &Dataset,
    tree: &MobTree,
    include_trial_dummies: bool,
) -> DesignMatrix {
    let n = ds.n_rows();
    let leaves = tree.leaves();
    let mut labels: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();

    for leaf in &leaves {
        let mut main = vec![0.0; n];
        for &r in &leaf.rows {
            main[r] = 1.0;
        }
        labels.push(format!("leaf[{}]", leaf.id));
        columns.push(main);
    }
    if include_trial_dummies {
        for (k, level) in ds.trial_levels.iter().enumerate().skip(1) {
            labels.push(format!("trial[{level}]"));
            columns.push(
                (0..n)
                    .map(|r| if ds.trial_code[r] as usize == k { 1.0 } else { 0.0 })
                    .collect(),
            );
        }
    }
    for leaf in &leaves {
        let arms = leaf.rows.iter().filter(|&&r| ds.treatment[r] == 1).count();
        if arms == 0 || arms == leaf.rows.len() {
            continue;
        }
        let mut interaction = vec![0.0; n];
        for &r in &leaf.rows {
            interaction[r] = ds.treatment[r] as f64;
        }
        labels.push(format!("leaf[{}]:treatment", leaf.id));
        columns.push(interaction);
    }
    DesignMatrix::new(labels, columns)
}

fn offset_from_global(global: &GlobalModel, ds: &Dataset) -> Vec<f64> {
    match global {
        GlobalModel::Mixed(m) => {
            predict_random_offset(m, &ds.trial_code, &ds.treatment_f64())
        }
        GlobalModel::FixedTrialIntercepts(f) => {
            // The trial-dummy part of the fitted mean: gamma_k for rows of
            // trial k >= 2, literal zero for the reference trial.
            let mut gamma = vec![0.0; ds.n_trials()];
            for (k, level) in ds.trial_levels.iter().enumerate().skip(1) {
                let label = format!("trial[{level}]");
                if let Some(i) = f.labels.iter().position(|l| *l == label) {
                    gamma[k] = f.coefficients[i];
                }
            }
            ds.trial_code
                .iter()
                .map(|&k| gamma[k as usize])
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// The alternation loop
// ---------------------------------------------------------------------------

enum GlobalFitter {
    Mixed(RandomSpec),
    FixedTrialIntercepts,
}

fn alternate(
    ds: &Dataset,
    node_model: &NodeModelSpec,
    splitters: &[String],
    grow_control: &GrowControl,
    alt_control: &AlternationControl,
    fitter: GlobalFitter,
) -> Result<GlmmTreeFit, GlmmError> {
    if alt_control.max_iterations < 1 {
        return Err(GlmmError::InvalidControl(
            "max_iterations must be at least 1".to_string(),
        ));
    }
    let include_trial_dummies = match fitter {
        // Stratified node intercepts need estimable trial structure in the
        // global step; random-intercept specs carry it in the random part.
        GlobalFitter::Mixed(_) => node_model.intercept == crate::mobtree::InterceptSpec::StratifiedByTrial,
        GlobalFitter::FixedTrialIntercepts => true,
    };
    let treatment = ds.treatment_f64();

    let mut offset: Option<Vec<f64>> = None;
    let mut prev: Option<(String, MobTree, GlobalModel)> = None;
    let mut log: Vec<f64> = Vec::new();
    let mut variance_log: Vec<(f64, f64)> = Vec::new();

    for iteration in 1..=alt_control.max_iterations {
        let tree = grow_tree(ds, node_model, splitters, grow_control, offset.as_deref())
            .map_err(|source| GlmmError::Tree { iteration, source })?;
        let key = tree.structure_key();
        if alt_control.tree_stability_stop {
            if let Some((prev_key, _, prev_global)) = &prev {
                if *prev_key == key {
                    // The stored global model was fitted on the identical
                    // structure, so it already encodes this tree's leaves.
                    return Ok(GlmmTreeFit {
                        tree,
                        global: prev_global.clone(),
                        iterations_used: iteration,
                        converged: true,
                        stop: StopReason::TreeStable,
                        per_iteration_log: log,
                        variance_log,
                    });
                }
            }
        }
        let design = build_global_design(ds, &tree, include_trial_dummies);
        let global = match fitter {
            GlobalFitter::Mixed(spec) => GlobalModel::Mixed(
                fit_lmm(
                    &design,
                    &ds.outcome,
                    &ds.trial_code,
                    &treatment,
                    ds.n_trials(),
                    spec,
                )
                .map_err(|source| GlmmError::GlobalMixed { iteration, source })?,
            ),
            GlobalFitter::FixedTrialIntercepts => GlobalModel::FixedTrialIntercepts(
                fit_ols(&design, &ds.outcome, None)
                    .map_err(|source| GlmmError::GlobalLinear { iteration, source })?,
            ),
        };
        log.push(global.objective());
        if let GlobalModel::Mixed(m) = &global {
            variance_log.push((m.tau0_sq, m.tau1_sq));
        }
        if log.len() >= 2
            && (log[log.len() - 1] - log[log.len() - 2]).abs() < alt_control.objective_tolerance
        {
            return Ok(GlmmTreeFit {
                tree,
                global,
                iterations_used: iteration,
                converged: true,
                stop: StopReason::ObjectiveConverged,
                per_iteration_log: log,
                variance_log,
            });
        }
        offset = Some(offset_from_global(&global, ds));
        prev = Some((key, tree, global));
    }

    let (_, tree, global) = prev.expect("max_iterations >= 1 guarantees one iterate");
    Ok(GlmmTreeFit {
        tree,
        global,
        iterations_used: alt_control.max_iterations,
        converged: false,
        stop: StopReason::IterationLimit,
        per_iteration_log: log,
        variance_log,
    })
}

/// Alternate tree growth with a global mixed model carrying the requested
/// random components. Stratified node intercepts additionally put
/// reference-coded trial dummies into the global fixed part so the design
/// stays estimable.
pub fn fit_glmm_tree(
    ds: &Dataset,
    node_model: &NodeModelSpec,
    spec: RandomSpec,
    splitters: &[String],
    grow_control: &GrowControl,
    alt_control: &AlternationControl,
) -> Result<GlmmTreeFit, GlmmError> {
    alternate(
        ds,
        node_model,
        splitters,
        grow_control,
        alt_control,
        GlobalFitter::Mixed(spec),
    )
}

/// Alternate tree growth with a global linear model whose trial intercepts
/// are fixed, reference-coded effects shared across leaves. With a single
/// trial there are no dummies, the offset is identically zero, and the
/// result collapses to the plain tree.
pub fn fit_palmtree(
    ds: &Dataset,
    splitters: &[String],
    grow_control: &GrowControl,
    alt_control: &AlternationControl,
) -> Result<GlmmTreeFit, GlmmError> {
    let node_model = NodeModelSpec {
        intercept: crate::mobtree::InterceptSpec::Pooled,
        covariates: vec![],
    };
    alternate(
        ds,
        &node_model,
        splitters,
        grow_control,
        alt_control,
        GlobalFitter::FixedTrialIntercepts,
    )
}

// ---------------------------------------------------------------------------
// Leaf effects
// ---------------------------------------------------------------------------

const Z_975: f64 = 1.959963984540054;

/// Per-trial support of one leaf: row counts by trial level, the levels
/// contributing exactly one row, and whether the leaf stopped splitting
/// because candidate children would have stranded a trial.
fn leaf_support(ds: &Dataset, leaf: &crate::mobtree::TreeNode) -> (Vec<usize>, Vec<String>, bool) {
    let trial_counts = ds.trial_counts(&leaf.rows);
    let underrepresented_trials: Vec<String> = trial_counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c == 1)
        .map(|(k, _)| ds.trial_levels[k].clone())
        .collect();
    let blocked = matches!(
        &leaf.kind,
        NodeKind::Leaf {
            termination: Termination::UnfittableChildren {
                underrepresented_trial_cuts,
                ..
            }
        } if *underrepresented_trial_cuts > 0
    );
    (trial_counts, underrepresented_trials, blocked)
}

/// Wald inference on each leaf's treatment coefficient in the final global
/// model: normal reference for the mixed model (its covariance already
/// reflects the estimated variance components), Student-t for the fixed
/// model. One-armed leaves carry no interaction column and come back with
/// `degenerate_variance` set and empty inference.
pub fn leaf_treatment_effects(fit: &GlmmTreeFit, ds: &Dataset) -> Vec<LeafEffect> {
    let labels = fit.global.labels();
    let coefficients = fit.global.coefficients();
    let mut out = Vec::new();
    for leaf in fit.tree.leaves() {
        let (trial_counts, underrepresented_trials, split_blocked_by_underrepresentation) =
            leaf_support(ds, leaf);

        let label = format!("leaf[{}]:treatment", leaf.id);
        let index = labels.iter().position(|l| *l == label);
        let effect = match index {
            None => LeafEffect {
                leaf_id: leaf.id,
                n_obs: leaf.n_obs,
                estimate: None,
                std_error: None,
                ci_lower: None,
                ci_upper: None,
                p_value: None,
                degenerate_variance: true,
                trial_counts,
                underrepresented_trials,
                split_blocked_by_underrepresentation,
            },
            Some(i) => {
                let estimate = coefficients[i];
                let (std_error, half_width, p_value) = match &fit.global {
                    GlobalModel::Mixed(m) => {
                        let se = m.covariance[i][i].max(0.0).sqrt();
                        let p = if se > 0.0 {
                            let normal = Normal::new(0.0, 1.0).unwrap();
                            2.0 * normal.cdf(-(estimate / se).abs())
                        } else if estimate == 0.0 {
                            1.0
                        } else {
                            0.0
                        };
                        (se, Z_975 * se, p)
                    }
                    GlobalModel::FixedTrialIntercepts(f) => {
                        let se = f.covariance[i][i].max(0.0).sqrt();
                        let df = f.df_residual as f64;
                        let (q, p) = if se > 0.0 && df > 0.0 {
                            let t = StudentsT::new(0.0, 1.0, df).unwrap();
                            (
                                t.inverse_cdf(0.975),
                                2.0 * t.cdf(-(estimate / se).abs()),
                            )
                        } else if estimate == 0.0 {
                            (0.0, 1.0)
                        } else {
                            (0.0, 0.0)
                        };
                        (se, q * se, p)
                    }
                };
                LeafEffect {
                    leaf_id: leaf.id,
                    n_obs: leaf.n_obs,
                    estimate: Some(estimate),
                    std_error: Some(std_error),
                    ci_lower: Some(estimate - half_width),
                    ci_upper: Some(estimate + half_width),
                    p_value: Some(p_value),
                    degenerate_variance: false,
                    trial_counts,
                    underrepresented_trials,
                    split_blocked_by_underrepresentation,
                }
            }
        };
        out.push(effect);
    }
    out
}

/// Leaf effects read directly from each leaf's own fitted node model, for
/// trees grown without a global model. Student-t inference on the node's
/// residual degrees of freedom.
pub fn node_model_leaf_effects(tree: &MobTree, ds: &Dataset) -> Vec<LeafEffect> {
    tree.leaves()
        .iter()
        .map(|leaf| {
            let (trial_counts, underrepresented_trials, split_blocked_by_underrepresentation) =
                leaf_support(ds, leaf);
            let estimate = leaf.model.treatment_estimate;
            let std_error = leaf.model.treatment_std_error;
            let df = (leaf.model.n_obs - leaf.model.labels.len()) as f64;
            let (half_width, p_value) = if std_error > 0.0 && df > 0.0 {
                let t = StudentsT::new(0.0, 1.0, df).expect("positive df");
                (
                    t.inverse_cdf(0.975) * std_error,
                    (2.0 * t.cdf(-(estimate / std_error).abs())).clamp(0.0, 1.0),
                )
            } else if estimate == 0.0 {
                (0.0, 1.0)
            } else {
                (0.0, 0.0)
            };
            LeafEffect {
                leaf_id: leaf.id,
                n_obs: leaf.n_obs,
                estimate: Some(estimate),
                std_error: Some(std_error),
                ci_lower: Some(estimate - half_width),
                ci_upper: Some(estimate + half_width),
                p_value: Some(p_value),
                degenerate_variance: false,
                trial_counts,
                underrepresented_trials,
                split_blocked_by_underrepresentation,
            }
        })
        .collect()
}
