//! The six named subgroup-discovery methods and the three pooled-analysis
//! models, each a thin validated binding of the engines.
//!
//! Method bindings (node model, global part):
//! `MOB` = (pooled intercept, none); `MOB-SI` = (stratified, none);
//! `MOB-RI` = (pooled, random intercept); `metaMOB-RI` = (pooled, random
//! intercept + random slope); `metaMOB-SI` = (stratified, random slope);
//! `palmtree` = (pooled, fixed trial intercepts).
//!
//! Node models regress the outcome on intercept(s) and treatment only; the
//! pooled analysis models additionally adjust for the designated baseline
//! column. Both choices are locked by conformance tests.

use crate::dataset::Dataset;
use crate::glmmtree::{
    fit_glmm_tree, fit_palmtree, leaf_treatment_effects, node_model_leaf_effects,
    AlternationControl, GlmmError, GlmmTreeFit, LeafEffect,
};
use crate::linreg::{fit_ols, wald_inference, DesignMatrix, FittedLinearModel, LinRegError};
use crate::mixed::{fit_lmm, lmm_inference, MixedError, RandomSpec};
use crate::mobtree::{grow_tree, GrowControl, InterceptSpec, MobTree, NodeModelSpec, TreeError};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

const Z_975: f64 = 1.959963984540054;

/// The six named method configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Method {
    Mob,
    MobSi,
    MobRi,
    MetaMobRi,
    MetaMobSi,
    Palmtree,
}

/// The global part a method binds between tree growths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GlobalPart {
    None,
    RandomIntercept,
    RandomInterceptAndSlope,
    RandomSlope,
    FixedTrialIntercepts,
}

impl GlobalPart {
    pub fn random_spec(self) -> Option<RandomSpec> {
        match self {
            GlobalPart::None | GlobalPart::FixedTrialIntercepts => None,
            GlobalPart::RandomIntercept => Some(RandomSpec::InterceptOnly),
            GlobalPart::RandomInterceptAndSlope => Some(RandomSpec::InterceptAndTreatment),
            GlobalPart::RandomSlope => Some(RandomSpec::TreatmentOnly),
        }
    }
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Mob,
        Method::MobSi,
        Method::MobRi,
        Method::MetaMobRi,
        Method::MetaMobSi,
        Method::Palmtree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mob => "MOB",
            Method::MobSi => "MOB-SI",
            Method::MobRi => "MOB-RI",
            Method::MetaMobRi => "metaMOB-RI",
            Method::MetaMobSi => "metaMOB-SI",
            Method::Palmtree => "palmtree",
        }
    }

    /// Parse one of the six canonical names.
    pub fn parse(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    /// The per-node model this method fits: intercept handling plus the
    /// treatment regressor, no further covariates.
    pub fn node_model(self) -> NodeModelSpec {
        let intercept = match self {
            Method::Mob | Method::MobRi | Method::MetaMobRi | Method::Palmtree => {
                InterceptSpec::Pooled
            }
            Method::MobSi | Method::MetaMobSi => InterceptSpec::StratifiedByTrial,
        };
        NodeModelSpec {
            intercept,
            covariates: vec![],
        }
    }

    pub fn global_part(self) -> GlobalPart {
        match self {
            Method::Mob | Method::MobSi => GlobalPart::None,
            Method::MobRi => GlobalPart::RandomIntercept,
            Method::MetaMobRi => GlobalPart::RandomInterceptAndSlope,
            Method::MetaMobSi => GlobalPart::RandomSlope,
            Method::Palmtree => GlobalPart::FixedTrialIntercepts,
        }
    }

    /// Every method except plain `MOB` models trial structure and needs at
    /// least two trials.
    pub fn needs_multiple_trials(self) -> bool {
        self != Method::Mob
    }
}

/// Growth and alternation configuration shared by every method.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MethodControls {
    pub grow: GrowControl,
    pub alternation: AlternationControl,
}

#[derive(Clone, Debug, Serialize)]
pub enum MethodFit {
    /// A directly grown tree (methods without a global part).
    Tree(MobTree),
    /// An alternating fit carrying both the tree and its global model.
    Alternating(GlmmTreeFit),
}

impl MethodFit {
    pub fn tree(&self) -> &MobTree {
        match self {
            MethodFit::Tree(t) => t,
            MethodFit::Alternating(g) => &g.tree,
        }
    }

    pub fn alternating(&self) -> Option<&GlmmTreeFit> {
        match self {
            MethodFit::Tree(_) => None,
            MethodFit::Alternating(g) => Some(g),
        }
    }
}

/// Per-leaf effects plus the method-level diagnostics a reader of the fit
/// needs: leaf count, estimated variance components where the binding has
/// them, and alternation convergence where the binding alternates.
#[derive(Clone, Debug, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub n_leaves: usize,
    pub leaf_effects: Vec<LeafEffect>,
    pub tau0_sq: Option<f64>,
    pub tau1_sq: Option<f64>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodOutcome {
    pub fit: MethodFit,
    pub report: MethodReport,
}

#[derive(Debug, Error)]
pub enum MethodError {
    #[error("IncompatibleSpec: {method} models trial structure and requires at least two trials, dataset has {n_trials}")]
    IncompatibleSpec {
        method: &'static str,
        n_trials: usize,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Alternation(#[from] GlmmError),
}

/// Fit one named method: dispatches to direct growth or the alternating
/// estimators per the binding table and assembles the leaf-effects report.
pub fn run_method(
    ds: &Dataset,
    method: Method,
    splitters: &[String],
    controls: &MethodControls,
) -> Result<MethodOutcome, MethodError> {
    if method.needs_multiple_trials() && ds.n_trials() < 2 {
        return Err(MethodError::IncompatibleSpec {
            method: method.name(),
            n_trials: ds.n_trials(),
        });
    }
    let node_model = method.node_model();
    let global_part = method.global_part();

    let (fit, tau0_sq, tau1_sq, converged, iterations) = match global_part {
        GlobalPart::None => {
            let tree = grow_tree(ds, &node_model, splitters, &controls.grow, None)?;
            (MethodFit::Tree(tree), None, None, None, None)
        }
        GlobalPart::FixedTrialIntercepts => {
            let fit = fit_palmtree(ds, splitters, &controls.grow, &controls.alternation)?;
            let (converged, iterations) = (fit.converged, fit.iterations_used);
            (
                MethodFit::Alternating(fit),
                None,
                None,
                Some(converged),
                Some(iterations),
            )
        }
        part => {
            let spec = part.random_spec().expect("random global part");
            let fit = fit_glmm_tree(
                ds,
                &node_model,
                spec,
                splitters,
                &controls.grow,
                &controls.alternation,
            )?;
            let mixed = fit.mixed().expect("mixed global part");
            let tau0 = matches!(
                part,
                GlobalPart::RandomIntercept | GlobalPart::RandomInterceptAndSlope
            )
            .then_some(mixed.tau0_sq);
            let tau1 = matches!(
                part,
                GlobalPart::RandomSlope | GlobalPart::RandomInterceptAndSlope
            )
            .then_some(mixed.tau1_sq);
            let (converged, iterations) = (fit.converged, fit.iterations_used);
            (
                MethodFit::Alternating(fit),
                tau0,
                tau1,
                Some(converged),
                Some(iterations),
            )
        }
    };

    let leaf_effects = match &fit {
        MethodFit::Tree(tree) => node_model_leaf_effects(tree, ds),
        MethodFit::Alternating(g) => leaf_treatment_effects(g, ds),
    };
    let report = MethodReport {
        method: method.name().to_string(),
        n_leaves: fit.tree().n_leaves(),
        leaf_effects,
        tau0_sq,
        tau1_sq,
        converged,
        iterations,
    };
    Ok(MethodOutcome { fit, report })
}

// ---------------------------------------------------------------------------
// Pooled analysis models
// ---------------------------------------------------------------------------

/// One coefficient of a pooled analysis: estimate with Wald standard error,
/// 95% confidence interval, and two-sided p-value.
#[derive(Clone, Debug, Serialize)]
pub struct InferenceRow {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
}

/// An inference table for one pooled model. Rows cover every non-intercept
/// coefficient in design order; the between-trial treatment variance appears
/// when the model has a random treatment component.
#[derive(Clone, Debug, Serialize)]
pub struct PooledAnalysis {
    pub model_label: String,
    pub rows: Vec<InferenceRow>,
    pub n_obs: usize,
    pub n_trials: usize,
    pub variance_intervention: Option<f64>,
    pub residual_variance: f64,
}

impl PooledAnalysis {
    pub fn row(&self, label: &str) -> Option<&InferenceRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Error)]
pub enum PooledError {
    #[error("no baseline column is designated in the schema, cannot adjust for baseline")]
    NoBaseline,
    #[error("trial-adjusted pooled models require at least two trials, dataset has {0}")]
    SingleTrial(usize),
    #[error(transparent)]
    LinReg(#[from] LinRegError),
    #[error(transparent)]
    Mixed(#[from] MixedError),
}

fn pooled_design(ds: &Dataset, include_baseline: bool, include_trials: bool) -> DesignMatrix {
    let n = ds.n_rows();
    let mut labels = vec!["intercept".to_string(), "treatment".to_string()];
    let mut columns = vec![vec![1.0; n], ds.treatment_f64()];
    if include_baseline {
        let (name, values) = ds.baseline_values().expect("checked by caller");
        labels.push(name.to_string());
        columns.push(values.to_vec());
    }
    if include_trials {
        for (k, level) in ds.trial_levels.iter().enumerate().skip(1) {
            labels.push(format!("trial[{level}]"));
            columns.push(
                (0..n)
                    .map(|r| if ds.trial_code[r] as usize == k { 1.0 } else { 0.0 })
                    .collect(),
            );
        }
    }
    DesignMatrix::new(labels, columns)
}

fn rows_from_ols(fit: &FittedLinearModel) -> Vec<InferenceRow> {
    let df = fit.df_residual as f64;
    let q = if df > 0.0 {
        StudentsT::new(0.0, 1.0, df)
            .expect("positive df")
            .inverse_cdf(0.975)
    } else {
        0.0
    };
    wald_inference(fit)
        .into_iter()
        .filter(|r| r.label != "intercept")
        .map(|r| {
            let half = q * r.std_error;
            InferenceRow {
                label: r.label,
                estimate: r.estimate,
                std_error: r.std_error,
                ci_lower: r.estimate - half,
                ci_upper: r.estimate + half,
                p_value: r.p_value,
            }
        })
        .collect()
}

/// Pooled linear model ignoring trial structure: outcome on intercept and
/// treatment, plus the designated baseline column when `adjust_baseline`.
pub fn pooled_lm(ds: &Dataset, adjust_baseline: bool) -> Result<PooledAnalysis, PooledError> {
    if adjust_baseline && ds.baseline_values().is_none() {
        return Err(PooledError::NoBaseline);
    }
    let design = pooled_design(ds, adjust_baseline, false);
    let fit = fit_ols(&design, &ds.outcome, None)?;
    Ok(PooledAnalysis {
        model_label: "pooled-lm".to_string(),
        rows: rows_from_ols(&fit),
        n_obs: fit.n_obs,
        n_trials: ds.n_trials(),
        variance_intervention: None,
        residual_variance: fit.rss / fit.df_residual as f64,
    })
}

/// Pooled linear model with fixed, reference-coded trial intercepts. The
/// designated baseline column joins the design when the schema names one.
pub fn pooled_lm_trial_adjusted(ds: &Dataset) -> Result<PooledAnalysis, PooledError> {
    if ds.n_trials() < 2 {
        return Err(PooledError::SingleTrial(ds.n_trials()));
    }
    let design = pooled_design(ds, ds.baseline_values().is_some(), true);
    let fit = fit_ols(&design, &ds.outcome, None)?;
    Ok(PooledAnalysis {
        model_label: "pooled-lm-trial-adjusted".to_string(),
        rows: rows_from_ols(&fit),
        n_obs: fit.n_obs,
        n_trials: ds.n_trials(),
        variance_intervention: None,
        residual_variance: fit.rss / fit.df_residual as f64,
    })
}

/// Pooled linear mixed model: fixed part as in the trial-adjusted model,
/// plus a random per-trial treatment effect whose estimated variance is
/// reported as `variance_intervention`. At a zero variance estimate the fit
/// collapses to the trial-adjusted model's coefficients.
pub fn pooled_lmm_random_treatment(ds: &Dataset) -> Result<PooledAnalysis, PooledError> {
    if ds.n_trials() < 2 {
        return Err(PooledError::SingleTrial(ds.n_trials()));
    }
    let design = pooled_design(ds, ds.baseline_values().is_some(), true);
    let treatment = ds.treatment_f64();
    let fit = fit_lmm(
        &design,
        &ds.outcome,
        &ds.trial_code,
        &treatment,
        ds.n_trials(),
        RandomSpec::TreatmentOnly,
    )?;
    let rows = lmm_inference(&fit)
        .into_iter()
        .filter(|r| r.label != "intercept")
        .map(|r| {
            let half = Z_975 * r.std_error;
            InferenceRow {
                label: r.label,
                estimate: r.estimate,
                std_error: r.std_error,
                ci_lower: r.estimate - half,
                ci_upper: r.estimate + half,
                p_value: r.p_value,
            }
        })
        .collect();
    Ok(PooledAnalysis {
        model_label: "pooled-lmm-random-treatment".to_string(),
        rows,
        n_obs: fit.n_obs,
        n_trials: ds.n_trials(),
        variance_intervention: Some(fit.tau1_sq),
        residual_variance: fit.sigma_sq,
    })
}
