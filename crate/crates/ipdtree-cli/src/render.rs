//! Artifact renderers: JSON tree envelopes, indented text trees, DOT graphs
//! with per-arm leaf summaries, and the CSV reports.

use ipdtree::dataset::{Dataset, SplitterColumn};
use ipdtree::glmmtree::{GlmmTreeFit, GlobalModel, LeafEffect};
use ipdtree::methods::{Method, MethodOutcome, PooledAnalysis};
use ipdtree::mobtree::{MobTree, NodeKind, SplitKind, TreeNode};

/// Version stamp for the JSON tree artifact; bumped on schema changes.
const TREE_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

/// Envelope: version, method name, the tree (identical shape for every
/// method), the global between-trial model when one exists, and the leaf
/// report.
pub fn tree_json(outcome: &MethodOutcome) -> serde_json::Value {
    let global = outcome.fit.alternating().map(global_json);
    serde_json::json!({
        "tree_format_version": TREE_FORMAT_VERSION,
        "method": outcome.report.method,
        "tree": outcome.fit.tree(),
        "global": global,
        "report": outcome.report,
    })
}

fn global_json(fit: &GlmmTreeFit) -> serde_json::Value {
    let (model, tau0_sq, tau1_sq, sigma_sq) = match &fit.global {
        GlobalModel::Mixed(m) => ("mixed", Some(m.tau0_sq), Some(m.tau1_sq), m.sigma_sq),
        GlobalModel::FixedTrialIntercepts(m) => (
            "fixed-trial-intercepts",
            None,
            None,
            m.rss / m.df_residual as f64,
        ),
    };
    serde_json::json!({
        "model": model,
        "labels": fit.global.labels(),
        "coefficients": fit.global.coefficients(),
        "tau0_sq": tau0_sq,
        "tau1_sq": tau1_sq,
        "sigma_sq": sigma_sq,
        "stop": fit.stop,
        "iterations": fit.iterations_used,
        "converged": fit.converged,
        "objective_log": fit.per_iteration_log,
        "variance_log": fit.variance_log,
    })
}

// ---------------------------------------------------------------------------
// Split descriptions
// ---------------------------------------------------------------------------

/// Map a categorical split's level codes back to level names.
pub fn level_names(ds: &Dataset, variable: &str, codes: &[u32]) -> Vec<String> {
    let Some(splitter) = ds.splitter(variable) else {
        return codes.iter().map(|c| c.to_string()).collect();
    };
    match &splitter.column {
        SplitterColumn::Categorical { levels, .. } => codes
            .iter()
            .map(|&c| {
                levels
                    .get(c as usize)
                    .cloned()
                    .unwrap_or_else(|| c.to_string())
            })
            .collect(),
        SplitterColumn::Numeric(_) => codes.iter().map(|c| c.to_string()).collect(),
    }
}

fn split_description(ds: &Dataset, node: &TreeNode) -> Option<String> {
    let NodeKind::Internal { split, .. } = &node.kind else {
        return None;
    };
    Some(match &split.kind {
        SplitKind::NumericThreshold { threshold } => {
            format!("{} <= {threshold}", split.variable)
        }
        SplitKind::CategoricalSubset { left_levels } => format!(
            "{} in {{{}}}",
            split.variable,
            level_names(ds, &split.variable, left_levels).join(", ")
        ),
    })
}

// ---------------------------------------------------------------------------
// Text
// ---------------------------------------------------------------------------

fn fmt_opt(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Human-readable fit summary: header, indented tree, any global model,
/// the leaf-effect table, and the growth log.
pub fn tree_text(outcome: &MethodOutcome, ds: &Dataset) -> String {
    let tree = outcome.fit.tree();
    let report = &outcome.report;
    let mut out = String::new();
    out.push_str(&format!("method: {}\n", report.method));
    out.push_str(&format!(
        "data: {} rows, {} trial(s), {} splitter(s)\n",
        ds.n_rows(),
        ds.n_trials(),
        ds.splitters.len()
    ));
    out.push_str(&format!(
        "tree: {} leaves, depth {}\n\n",
        tree.n_leaves(),
        tree.depth()
    ));
    render_node(&mut out, tree, ds, 1, 0);

    if let Some(fit) = outcome.fit.alternating() {
        out.push_str("\nglobal model:\n");
        match &fit.global {
            GlobalModel::Mixed(m) => {
                out.push_str(&format!(
                    "  between-trial variances: intercept {:.6}, treatment {:.6}, residual {:.6}\n",
                    m.tau0_sq, m.tau1_sq, m.sigma_sq
                ));
            }
            GlobalModel::FixedTrialIntercepts(m) => {
                for (label, coef) in m.labels.iter().zip(&m.coefficients) {
                    if label.starts_with("trial[") {
                        out.push_str(&format!("  {label} = {coef:.4}\n"));
                    }
                }
            }
        }
        out.push_str(&format!(
            "  alternation: {} iteration(s), converged = {}, stop = {:?}\n",
            fit.iterations_used, fit.converged, fit.stop
        ));
    }

    out.push_str("\nleaf treatment effects:\n");
    out.push_str("  leaf      n   estimate  std.err   95% CI               p\n");
    for effect in &report.leaf_effects {
        let ci = match (effect.ci_lower, effect.ci_upper) {
            (Some(lo), Some(hi)) => format!("[{lo:.4}, {hi:.4}]"),
            _ => "-".into(),
        };
        let mut line = format!(
            "  {:<4} {:>6}   {:>8}  {:>7}   {:<20} {}",
            effect.leaf_id,
            effect.n_obs,
            fmt_opt(effect.estimate),
            fmt_opt(effect.std_error),
            ci,
            fmt_opt(effect.p_value),
        );
        if effect.underrepresentation_flag() {
            line.push_str("  [underrepresented trials]");
        }
        if effect.degenerate_variance {
            line.push_str("  [single-arm leaf]");
        }
        out.push_str(&line);
        out.push('\n');
    }

    out.push_str("\ngrowth log:\n");
    for line in &tree.growth_log {
        out.push_str("  ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn render_node(out: &mut String, tree: &MobTree, ds: &Dataset, id: usize, indent: usize) {
    let node = &tree.nodes[id - 1];
    let pad = "  ".repeat(indent);
    match &node.kind {
        NodeKind::Internal { split, left, right } => {
            out.push_str(&format!(
                "{pad}[{id}] {} (stat = {:.3}, adj. p = {:.3e}, n = {})\n",
                split_description(ds, node).expect("internal node"),
                split.statistic,
                split.adjusted_p_value,
                node.n_obs
            ));
            render_node(out, tree, ds, *left, indent + 1);
            render_node(out, tree, ds, *right, indent + 1);
        }
        NodeKind::Leaf { termination } => {
            out.push_str(&format!(
                "{pad}[{id}] leaf: n = {}, effect = {:.4} (se {:.4}), stopped: {}\n",
                node.n_obs,
                node.model.treatment_estimate,
                node.model.treatment_std_error,
                termination.reason()
            ));
        }
    }
}

// ---------------------------------------------------------------------------
// DOT
// ---------------------------------------------------------------------------

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz export. Internal nodes are ellipses labeled with the split;
/// leaves are boxes summarizing each arm (count and mean outcome).
pub fn tree_dot(outcome: &MethodOutcome, ds: &Dataset) -> String {
    let tree = outcome.fit.tree();
    let mut out = String::new();
    out.push_str("digraph tree {\n");
    out.push_str("  graph [fontname=\"Helvetica\"];\n");
    out.push_str("  node [fontname=\"Helvetica\"];\n");
    out.push_str("  edge [fontname=\"Helvetica\"];\n");
    for node in &tree.nodes {
        match &node.kind {
            NodeKind::Internal { split, left, right } => {
                out.push_str(&format!(
                    "  n{} [shape=ellipse, label=\"[{}] {}\\nadj. p = {:.3e}\"];\n",
                    node.id,
                    node.id,
                    dot_escape(&split_description(ds, node).expect("internal node")),
                    split.adjusted_p_value
                ));
                out.push_str(&format!("  n{} -> n{left} [label=\"yes\"];\n", node.id));
                out.push_str(&format!("  n{} -> n{right} [label=\"no\"];\n", node.id));
            }
            NodeKind::Leaf { .. } => {
                let mut label = format!("leaf {}\\nn = {}", node.id, node.n_obs);
                for (arm, name) in [(0u8, "control"), (1u8, "intervention")] {
                    let rows: Vec<usize> = node
                        .rows
                        .iter()
                        .copied()
                        .filter(|&r| ds.treatment[r] == arm)
                        .collect();
                    if rows.is_empty() {
                        label.push_str(&format!("\\n{name}: n = 0"));
                    } else {
                        let mean =
                            rows.iter().map(|&r| ds.outcome[r]).sum::<f64>() / rows.len() as f64;
                        label.push_str(&format!(
                            "\\n{name}: n = {}, mean = {mean:.2}",
                            rows.len()
                        ));
                    }
                }
                out.push_str(&format!("  n{} [shape=box, label=\"{label}\"];\n", node.id));
            }
        }
    }
    out.push_str("}\n");
    out
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

fn csv_string(records: Vec<Vec<String>>) -> Result<String, String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for record in records {
        writer.write_record(&record).map_err(|e| e.to_string())?;
    }
    String::from_utf8(writer.into_inner().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())
}

fn opt_cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-leaf treatment effects with trial support counts.
pub fn leaf_effects_csv(outcome: &MethodOutcome, ds: &Dataset) -> Result<String, String> {
    let mut records = vec![vec![
        "leaf_id".to_string(),
        "n_obs".into(),
        "estimate".into(),
        "std_error".into(),
        "ci_lower".into(),
        "ci_upper".into(),
        "p_value".into(),
        "degenerate_variance".into(),
        "per_trial_counts".into(),
        "underrepresented_trials".into(),
        "split_blocked_by_underrepresentation".into(),
    ]];
    for effect in &outcome.report.leaf_effects {
        records.push(leaf_effect_record(effect, ds));
    }
    csv_string(records)
}

fn leaf_effect_record(effect: &LeafEffect, ds: &Dataset) -> Vec<String> {
    let counts = ds
        .trial_levels
        .iter()
        .zip(&effect.trial_counts)
        .map(|(level, n)| format!("{level}={n}"))
        .collect::<Vec<_>>()
        .join(";");
    vec![
        effect.leaf_id.to_string(),
        effect.n_obs.to_string(),
        opt_cell(effect.estimate),
        opt_cell(effect.std_error),
        opt_cell(effect.ci_lower),
        opt_cell(effect.ci_upper),
        opt_cell(effect.p_value),
        effect.degenerate_variance.to_string(),
        counts,
        effect.underrepresented_trials.join(";"),
        effect.split_blocked_by_underrepresentation.to_string(),
    ]
}

/// One pooled model's outcome in the artifacts: fitted, or skipped with
/// the reason recorded.
#[derive(serde::Serialize)]
pub struct PooledEntry {
    pub model: String,
    pub status: String,
    pub analysis: Option<PooledAnalysis>,
}

/// Flattened inference rows of the pooled one-stage models.
pub fn pooled_csv(entries: &[PooledEntry]) -> Result<String, String> {
    let mut records = vec![vec![
        "model".to_string(),
        "status".into(),
        "term".into(),
        "estimate".into(),
        "std_error".into(),
        "ci_lower".into(),
        "ci_upper".into(),
        "p_value".into(),
    ]];
    for entry in entries {
        match &entry.analysis {
            None => {
                let mut record = vec![entry.model.clone(), entry.status.clone()];
                record.extend(std::iter::repeat(String::new()).take(6));
                records.push(record);
            }
            Some(analysis) => {
                for row in &analysis.rows {
                    records.push(vec![
                        entry.model.clone(),
                        entry.status.clone(),
                        row.label.clone(),
                        row.estimate.to_string(),
                        row.std_error.to_string(),
                        row.ci_lower.to_string(),
                        row.ci_upper.to_string(),
                        row.p_value.to_string(),
                    ]);
                }
            }
        }
    }
    csv_string(records)
}

// ---------------------------------------------------------------------------
// Replicate CSVs
// ---------------------------------------------------------------------------

/// One (seed, method) outcome; failed fits carry their error in `status`
/// and leave the model fields empty.
pub struct RepRow {
    pub seed: u64,
    pub method: &'static str,
    pub status: String,
    pub n_leaves: Option<usize>,
    pub root_variable: Option<String>,
    pub root_cut: Option<String>,
    pub leaf_effects: Option<String>,
    pub tau0_sq: Option<f64>,
    pub tau1_sq: Option<f64>,
    pub converged: Option<bool>,
    pub runtime_ms: f64,
}

impl RepRow {
    pub fn failed(seed: u64, method: &'static str, status: String, runtime_ms: f64) -> RepRow {
        RepRow {
            seed,
            method,
            status,
            n_leaves: None,
            root_variable: None,
            root_cut: None,
            leaf_effects: None,
            tau0_sq: None,
            tau1_sq: None,
            converged: None,
            runtime_ms,
        }
    }
}

/// Per-(seed, method) rows. `runtime_ms` is wall-clock and therefore the
/// one volatile column; everything else is deterministic.
pub fn replicate_csv(rows: &[RepRow]) -> Result<String, String> {
    let mut records = vec![vec![
        "seed".to_string(),
        "method".into(),
        "status".into(),
        "n_leaves".into(),
        "root_variable".into(),
        "root_cut".into(),
        "leaf_effects".into(),
        "tau0_sq".into(),
        "tau1_sq".into(),
        "converged".into(),
        "runtime_ms".into(),
    ]];
    for row in rows {
        records.push(vec![
            row.seed.to_string(),
            row.method.to_string(),
            row.status.clone(),
            opt_cell(row.n_leaves),
            opt_cell(row.root_variable.clone()),
            opt_cell(row.root_cut.clone()),
            opt_cell(row.leaf_effects.clone()),
            opt_cell(row.tau0_sq),
            opt_cell(row.tau1_sq),
            opt_cell(row.converged),
            format!("{:.3}", row.runtime_ms),
        ]);
    }
    csv_string(records)
}

/// Per-method aggregates over the completed rows: completion and leaf
/// counts, how often the root split matched the scenario's planted rule,
/// and mean variance components. Fully deterministic.
pub fn replicate_summary_csv(
    rows: &[RepRow],
    methods: &[Method],
    rule_variable: Option<&str>,
) -> Result<String, String> {
    let mut records = vec![vec![
        "method".to_string(),
        "n_runs".into(),
        "n_ok".into(),
        "mean_n_leaves".into(),
        "root_split_rate".into(),
        "rule_recovery_rate".into(),
        "mean_tau0_sq".into(),
        "mean_tau1_sq".into(),
    ]];
    for method in methods {
        let name = method.name();
        let all: Vec<&RepRow> = rows.iter().filter(|r| r.method == name).collect();
        let ok: Vec<&RepRow> = all.iter().copied().filter(|r| r.status == "ok").collect();
        let mean = |values: Vec<f64>| -> String {
            if values.is_empty() {
                String::new()
            } else {
                (values.iter().sum::<f64>() / values.len() as f64).to_string()
            }
        };
        let rate = |count: usize| -> String {
            if ok.is_empty() {
                String::new()
            } else {
                (count as f64 / ok.len() as f64).to_string()
            }
        };
        let splits = ok.iter().filter(|r| r.root_variable.is_some()).count();
        let recovered = match rule_variable {
            None => String::new(),
            Some(rule) => rate(
                ok.iter()
                    .filter(|r| r.root_variable.as_deref() == Some(rule))
                    .count(),
            ),
        };
        records.push(vec![
            name.to_string(),
            all.len().to_string(),
            ok.len().to_string(),
            mean(ok.iter().filter_map(|r| r.n_leaves.map(|n| n as f64)).collect()),
            rate(splits),
            recovered,
            mean(ok.iter().filter_map(|r| r.tau0_sq).collect()),
            mean(ok.iter().filter_map(|r| r.tau1_sq).collect()),
        ]);
    }
    csv_string(records)
}
