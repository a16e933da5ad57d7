//! Flat key=value scenario files: a named library scenario as the base plus
//! overrides of its scalar knobs, per-trial effects, and planted rule.
//!
//! ```text
//! # four exchangeable trials, but noisier and with a planted age rule
//! base = null
//! error_sd = 6.0
//! rule_variable = age
//! rule_threshold = 50
//! rule_effect_inside = -2.0
//! rule_effect_outside = 0.0
//! seed = 3
//! ```
//!
//! Supported keys: `base` (required), `name`, `seed`, `error_sd`,
//! `baseline_slope`, `trial_effects` (comma-separated, one per trial),
//! `effect_mean` + `effect_tau` (switch to drawn per-trial effects),
//! `rule_variable`, `rule_threshold`, `rule_effect_inside`,
//! `rule_effect_outside`, and `rule = none` to remove the base's rule.
//! Structural changes (trial sizes, covariate distributions, allocation)
//! are deliberately out of scope — those are new scenarios, not overrides.

use ipdtree::synthgen::{scenario as library_scenario, GenScenario, SubgroupRule, TrialEffects};
use std::path::Path;

fn parse_list(value: &str, key: &str) -> Result<Vec<f64>, String> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| format!("{key}: `{v}` is not a number ({e})"))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| format!("{key}: `{value}` is not valid ({e})"))
}

pub fn parse(path: &Path) -> Result<GenScenario, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read scenario file `{}`: {e}", path.display()))?;

    let mut pairs: Vec<(String, String)> = Vec::new();
    for (number, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "scenario file line {}: `{line}` is not of the form key = value",
                number + 1
            ));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }

    let base_name = pairs
        .iter()
        .find(|(k, _)| k == "base")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| "scenario file needs a `base = <library scenario>` line".to_string())?;
    let mut scenario = library_scenario(&base_name)
        .ok_or_else(|| format!("base `{base_name}` is not a library scenario"))?;

    let mut effect_mean: Option<f64> = None;
    let mut effect_tau: Option<f64> = None;
    let mut rule_parts: Option<SubgroupRule> = None;

    // Rule overrides start from the base's rule so a file can adjust a
    // single field of an existing rule.
    let rule_edit = |scenario: &GenScenario,
                         parts: &mut Option<SubgroupRule>|
     -> SubgroupRule {
        parts
            .take()
            .or_else(|| scenario.subgroup_rule.clone())
            .unwrap_or(SubgroupRule {
                variable: "rmdq0".into(),
                threshold: 0.0,
                effect_inside: 0.0,
                effect_outside: 0.0,
            })
    };

    for (key, value) in &pairs {
        match key.as_str() {
            "base" => {}
            "name" => scenario.name = value.clone(),
            "seed" => scenario.seed = parse_num(value, key)?,
            "error_sd" => scenario.error_sd = parse_num(value, key)?,
            "baseline_slope" => scenario.baseline_slope = parse_num(value, key)?,
            "trial_effects" => {
                scenario.trial_effects = TrialEffects::Fixed(parse_list(value, key)?);
            }
            "effect_mean" => effect_mean = Some(parse_num(value, key)?),
            "effect_tau" => effect_tau = Some(parse_num(value, key)?),
            "rule" if value == "none" => {
                scenario.subgroup_rule = None;
                rule_parts = None;
            }
            "rule_variable" => {
                let mut rule = rule_edit(&scenario, &mut rule_parts);
                rule.variable = value.clone();
                rule_parts = Some(rule);
            }
            "rule_threshold" => {
                let mut rule = rule_edit(&scenario, &mut rule_parts);
                rule.threshold = parse_num(value, key)?;
                rule_parts = Some(rule);
            }
            "rule_effect_inside" => {
                let mut rule = rule_edit(&scenario, &mut rule_parts);
                rule.effect_inside = parse_num(value, key)?;
                rule_parts = Some(rule);
            }
            "rule_effect_outside" => {
                let mut rule = rule_edit(&scenario, &mut rule_parts);
                rule.effect_outside = parse_num(value, key)?;
                rule_parts = Some(rule);
            }
            other => {
                return Err(format!(
                    "unknown scenario key `{other}` (supported: base, name, seed, error_sd, \
                     baseline_slope, trial_effects, effect_mean, effect_tau, rule, \
                     rule_variable, rule_threshold, rule_effect_inside, rule_effect_outside)"
                ))
            }
        }
    }

    match (effect_mean, effect_tau) {
        (None, None) => {}
        (Some(mean), Some(tau)) => {
            if matches!(
                pairs.iter().find(|(k, _)| k == "trial_effects"),
                Some(_)
            ) {
                return Err(
                    "give either trial_effects or effect_mean/effect_tau, not both".into(),
                );
            }
            scenario.trial_effects = TrialEffects::Drawn { mean, tau };
        }
        _ => return Err("effect_mean and effect_tau must be given together".into()),
    }
    if let Some(rule) = rule_parts {
        scenario.subgroup_rule = Some(rule);
    }
    Ok(scenario)
}
