//! Typed pooled-trial datasets: schema declaration, CSV ingestion, and
//! row subsetting.
//!
//! A dataset holds one outcome column, one binary treatment column, one trial
//! identifier, and any number of splitting variables (numeric or
//! categorical). Rows missing outcome, treatment, or trial are dropped at
//! ingestion and counted in [`DroppedRowReport`]; rows missing a splitter
//! value are kept (each instability test excludes them on its own). Trial
//! labels are coded in first-seen order and the coding is frozen: subsets
//! carry the full level list verbatim so trial-indexed designs stay aligned
//! across nodes no matter how rows are partitioned.

use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

/// Role a column plays in the analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ColumnRole {
    OutcomeNumeric,
    TreatmentBinary,
    TrialId,
    SplitterNumeric,
    SplitterCategorical,
}

#[derive(Clone, Debug, Serialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: ColumnRole,
}

/// Validated column layout: exactly one outcome, treatment, and trial column,
/// plus zero or more splitters, all under unique non-empty names. One numeric
/// splitter may additionally be designated as the baseline measurement of the
/// outcome instrument; pooled analysis models adjust for it.
#[derive(Clone, Debug, Serialize)]
pub struct Schema {
    columns: Vec<ColumnSpec>,
    baseline: Option<String>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self, DatasetError> {
        let mut names = std::collections::BTreeSet::new();
        for c in &columns {
            if c.name.trim().is_empty() {
                return Err(DatasetError::SchemaInvalid(
                    "column names must be non-empty".into(),
                ));
            }
            if !names.insert(c.name.clone()) {
                return Err(DatasetError::SchemaInvalid(format!(
                    "duplicate column name `{}`",
                    c.name
                )));
            }
        }
        for (role, label) in [
            (ColumnRole::OutcomeNumeric, "outcome"),
            (ColumnRole::TreatmentBinary, "treatment"),
            (ColumnRole::TrialId, "trial"),
        ] {
            let count = columns.iter().filter(|c| c.role == role).count();
            if count != 1 {
                return Err(DatasetError::SchemaInvalid(format!(
                    "schema needs exactly one {label} column, found {count}"
                )));
            }
        }
        Ok(Schema {
            columns,
            baseline: None,
        })
    }

    /// Designate one numeric splitter as the baseline measurement; it stays
    /// available for splitting.
    pub fn with_baseline(mut self, name: &str) -> Result<Self, DatasetError> {
        match self.columns.iter().find(|c| c.name == name) {
            None => Err(DatasetError::SchemaInvalid(format!(
                "baseline column `{name}` is not in the schema"
            ))),
            Some(c) if c.role != ColumnRole::SplitterNumeric => Err(DatasetError::SchemaInvalid(
                format!("baseline column `{name}` must be a numeric splitter"),
            )),
            Some(_) => {
                self.baseline = Some(name.to_string());
                Ok(self)
            }
        }
    }

    pub fn baseline_name(&self) -> Option<&str> {
        self.baseline.as_deref()
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    fn name_of(&self, role: ColumnRole) -> &str {
        &self
            .columns
            .iter()
            .find(|c| c.role == role)
            .expect("validated")
            .name
    }

    pub fn outcome_name(&self) -> &str {
        self.name_of(ColumnRole::OutcomeNumeric)
    }

    pub fn treatment_name(&self) -> &str {
        self.name_of(ColumnRole::TreatmentBinary)
    }

    pub fn trial_name(&self) -> &str {
        self.name_of(ColumnRole::TrialId)
    }

    /// Splitter columns in schema order (the tie-break order for variable
    /// selection).
    pub fn splitter_specs(&self) -> Vec<&ColumnSpec> {
        self.columns
            .iter()
            .filter(|c| {
                matches!(
                    c.role,
                    ColumnRole::SplitterNumeric | ColumnRole::SplitterCategorical
                )
            })
            .collect()
    }
}

/// Storage for one splitting variable. Missing entries are NaN (numeric) or
/// [`MISSING_CODE`] (categorical).
#[derive(Clone, Debug, Serialize)]
pub enum SplitterColumn {
    Numeric(Vec<f64>),
    Categorical { codes: Vec<u32>, levels: Vec<String> },
}

pub const MISSING_CODE: u32 = u32::MAX;

#[derive(Clone, Debug, Serialize)]
pub struct Splitter {
    pub name: String,
    pub column: SplitterColumn,
}

/// Ingestion accounting: how many raw rows were read, kept, dropped per
/// required column, and how many kept outcomes fell outside the declared
/// plausible range.
#[derive(Clone, Debug, Default, Serialize)]
pub struct DroppedRowReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub missing_outcome: usize,
    pub missing_treatment: usize,
    pub missing_trial: usize,
    pub outcome_out_of_range: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Dataset {
    pub schema: Schema,
    pub outcome: Vec<f64>,
    pub treatment: Vec<u8>,
    /// Trial code per row; index into `trial_levels`.
    pub trial_code: Vec<u32>,
    /// All trial labels in first-seen order. Never re-coded by `subset`.
    pub trial_levels: Vec<String>,
    pub splitters: Vec<Splitter>,
    pub dropped: DroppedRowReport,
}

/// Knobs for CSV ingestion.
#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// Field values treated as missing (after whitespace trimming).
    pub na_markers: Vec<String>,
    pub delimiter: u8,
    /// Kept outcomes outside this closed range are counted (not rejected) in
    /// the report; `None` disables the check.
    pub outcome_range: Option<(f64, f64)>,
    /// Treatment coding as (control label, intervention label); defaults to
    /// literal "0"/"1".
    pub treatment_levels: Option<(String, String)>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            na_markers: vec![String::new(), "NA".into()],
            delimiter: b',',
            outcome_range: Some((0.0, 24.0)),
            treatment_levels: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("required column `{0}` is missing from the input header")]
    MissingColumn(String),
    #[error("treatment column `{column}` holds non-binary value `{value}` at data row {row}")]
    NonBinaryTreatment {
        column: String,
        value: String,
        row: usize,
    },
    #[error("no rows remain after filtering rows with missing outcome, treatment, or trial")]
    EmptyAfterFiltering,
    #[error("column `{column}` holds unparseable value `{value}` at data row {row}")]
    InvalidValue {
        column: String,
        value: String,
        row: usize,
    },
    #[error("schema invalid: {0}")]
    SchemaInvalid(String),
    #[error("CSV read failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Read a CSV file into a [`Dataset`] under the given schema.
pub fn ingest_csv(
    path: &Path,
    schema: &Schema,
    options: &IngestOptions,
) -> Result<Dataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    ingest_csv_reader(file, schema, options)
}

/// Reader-based variant of [`ingest_csv`].
pub fn ingest_csv_reader<R: Read>(
    reader: R,
    schema: &Schema,
    options: &IngestOptions,
) -> Result<Dataset, DatasetError> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .from_reader(reader);

    let headers = csv_reader.headers()?.clone();
    let position_of = |name: &str| -> Result<usize, DatasetError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };

    let outcome_pos = position_of(schema.outcome_name())?;
    let treatment_pos = position_of(schema.treatment_name())?;
    let trial_pos = position_of(schema.trial_name())?;
    let splitter_specs = schema.splitter_specs();
    let splitter_pos: Vec<usize> = splitter_specs
        .iter()
        .map(|s| position_of(&s.name))
        .collect::<Result<_, _>>()?;

    let is_na = |field: &str| options.na_markers.iter().any(|m| m == field);
    let (control_label, intervention_label) = options
        .treatment_levels
        .clone()
        .unwrap_or_else(|| ("0".into(), "1".into()));

    let mut outcome = Vec::new();
    let mut treatment = Vec::new();
    let mut trial_code = Vec::new();
    let mut trial_levels: Vec<String> = Vec::new();
    let mut trial_index: BTreeMap<String, u32> = BTreeMap::new();
    let mut splitter_numeric: Vec<Vec<f64>> = Vec::new();
    let mut splitter_codes: Vec<Vec<u32>> = Vec::new();
    let mut splitter_levels: Vec<Vec<String>> = Vec::new();
    let mut splitter_level_index: Vec<BTreeMap<String, u32>> = Vec::new();
    for spec in &splitter_specs {
        match spec.role {
            ColumnRole::SplitterNumeric => {
                splitter_numeric.push(Vec::new());
                splitter_codes.push(Vec::new());
            }
            ColumnRole::SplitterCategorical => {
                splitter_numeric.push(Vec::new());
                splitter_codes.push(Vec::new());
            }
            _ => unreachable!(),
        }
        splitter_levels.push(Vec::new());
        splitter_level_index.push(BTreeMap::new());
    }

    let mut report = DroppedRowReport::default();

    for (row_idx, record) in csv_reader.records().enumerate() {
        let record = record?;
        report.rows_read += 1;
        let field = |pos: usize| record.get(pos).unwrap_or("").trim().to_string();

        let outcome_raw = field(outcome_pos);
        let treatment_raw = field(treatment_pos);
        let trial_raw = field(trial_pos);

        // Required columns: missing values drop the row (first miss wins the
        // count so every dropped row is counted exactly once).
        let outcome_val = if is_na(&outcome_raw) {
            None
        } else {
            let v: f64 = outcome_raw.parse().map_err(|_| DatasetError::InvalidValue {
                column: schema.outcome_name().into(),
                value: outcome_raw.clone(),
                row: row_idx + 1,
            })?;
            v.is_finite().then_some(v)
        };
        let Some(outcome_val) = outcome_val else {
            report.missing_outcome += 1;
            continue;
        };
        if is_na(&treatment_raw) {
            report.missing_treatment += 1;
            continue;
        }
        if is_na(&trial_raw) {
            report.missing_trial += 1;
            continue;
        }

        let treated = if treatment_raw == intervention_label {
            1u8
        } else if treatment_raw == control_label {
            0u8
        } else {
            return Err(DatasetError::NonBinaryTreatment {
                column: schema.treatment_name().into(),
                value: treatment_raw,
                row: row_idx + 1,
            });
        };

        let code = *trial_index.entry(trial_raw.clone()).or_insert_with(|| {
            trial_levels.push(trial_raw.clone());
            (trial_levels.len() - 1) as u32
        });

        outcome.push(outcome_val);
        treatment.push(treated);
        trial_code.push(code);
        report.rows_kept += 1;
        if let Some((lo, hi)) = options.outcome_range {
            if outcome_val < lo || outcome_val > hi {
                report.outcome_out_of_range += 1;
            }
        }

        for (slot, (spec, &pos)) in splitter_specs.iter().zip(&splitter_pos).enumerate() {
            let raw = field(pos);
            match spec.role {
                ColumnRole::SplitterNumeric => {
                    let v = if is_na(&raw) {
                        f64::NAN
                    } else {
                        raw.parse().map_err(|_| DatasetError::InvalidValue {
                            column: spec.name.clone(),
                            value: raw.clone(),
                            row: row_idx + 1,
                        })?
                    };
                    splitter_numeric[slot].push(v);
                }
                ColumnRole::SplitterCategorical => {
                    let code = if is_na(&raw) {
                        MISSING_CODE
                    } else {
                        *splitter_level_index[slot].entry(raw.clone()).or_insert_with(|| {
                            splitter_levels[slot].push(raw.clone());
                            (splitter_levels[slot].len() - 1) as u32
                        })
                    };
                    splitter_codes[slot].push(code);
                }
                _ => unreachable!(),
            }
        }
    }

    if outcome.is_empty() {
        return Err(DatasetError::EmptyAfterFiltering);
    }

    let splitters = splitter_specs
        .iter()
        .enumerate()
        .map(|(slot, spec)| Splitter {
            name: spec.name.clone(),
            column: match spec.role {
                ColumnRole::SplitterNumeric => {
                    SplitterColumn::Numeric(std::mem::take(&mut splitter_numeric[slot]))
                }
                ColumnRole::SplitterCategorical => SplitterColumn::Categorical {
                    codes: std::mem::take(&mut splitter_codes[slot]),
                    levels: std::mem::take(&mut splitter_levels[slot]),
                },
                _ => unreachable!(),
            },
        })
        .collect();

    Ok(Dataset {
        schema: schema.clone(),
        outcome,
        treatment,
        trial_code,
        trial_levels,
        splitters,
        dropped: report,
    })
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.outcome.len()
    }

    pub fn n_trials(&self) -> usize {
        self.trial_levels.len()
    }

    pub fn splitter(&self, name: &str) -> Option<&Splitter> {
        self.splitters.iter().find(|s| s.name == name)
    }

    /// The designated baseline column as (name, values), when the schema
    /// names one (always a numeric splitter by schema validation).
    pub fn baseline_values(&self) -> Option<(&str, &[f64])> {
        let name = self.schema.baseline_name()?;
        let splitter = self.splitter(name)?;
        match &splitter.column {
            SplitterColumn::Numeric(v) => Some((name, v.as_slice())),
            SplitterColumn::Categorical { .. } => None,
        }
    }

    /// Treatment as 0.0/1.0 regressor values.
    pub fn treatment_f64(&self) -> Vec<f64> {
        self.treatment.iter().map(|&t| t as f64).collect()
    }

    /// Per-trial row counts over a row subset, indexed like `trial_levels`.
    pub fn trial_counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.trial_levels.len()];
        for &r in rows {
            counts[self.trial_code[r] as usize] += 1;
        }
        counts
    }

    /// Trial labels that have no rows in this dataset (possible after
    /// subsetting, since the level list is preserved verbatim).
    pub fn empty_trial_levels(&self) -> Vec<String> {
        let all: Vec<usize> = (0..self.n_rows()).collect();
        self.trial_counts(&all)
            .iter()
            .zip(&self.trial_levels)
            .filter(|(&c, _)| c == 0)
            .map(|(_, l)| l.clone())
            .collect()
    }

    /// Select rows (by index, in the given order) into a new dataset. Schema,
    /// trial levels, and the ingestion report are preserved verbatim; an
    /// empty selection is allowed. Panics if any index is out of range
    /// (caller contract).
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        for &r in rows {
            assert!(r < self.n_rows(), "subset row index {r} out of range");
        }
        Dataset {
            schema: self.schema.clone(),
            outcome: rows.iter().map(|&r| self.outcome[r]).collect(),
            treatment: rows.iter().map(|&r| self.treatment[r]).collect(),
            trial_code: rows.iter().map(|&r| self.trial_code[r]).collect(),
            trial_levels: self.trial_levels.clone(),
            splitters: self
                .splitters
                .iter()
                .map(|s| Splitter {
                    name: s.name.clone(),
                    column: match &s.column {
                        SplitterColumn::Numeric(v) => {
                            SplitterColumn::Numeric(rows.iter().map(|&r| v[r]).collect())
                        }
                        SplitterColumn::Categorical { codes, levels } => {
                            SplitterColumn::Categorical {
                                codes: rows.iter().map(|&r| codes[r]).collect(),
                                levels: levels.clone(),
                            }
                        }
                    },
                })
                .collect(),
            dropped: self.dropped.clone(),
        }
    }

    /// Write the dataset as CSV in schema column order. Numeric values are
    /// printed in shortest round-trip form, so re-ingesting reproduces the
    /// dataset exactly; missing splitter entries are written as "NA".
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<&str> = self.schema.columns().iter().map(|c| c.name.as_str()).collect();
        w.write_record(&header)?;
        for row in 0..self.n_rows() {
            let mut record: Vec<String> = Vec::with_capacity(header.len());
            for spec in self.schema.columns() {
                let field = match spec.role {
                    ColumnRole::OutcomeNumeric => format!("{}", self.outcome[row]),
                    ColumnRole::TreatmentBinary => format!("{}", self.treatment[row]),
                    ColumnRole::TrialId => {
                        self.trial_levels[self.trial_code[row] as usize].clone()
                    }
                    ColumnRole::SplitterNumeric | ColumnRole::SplitterCategorical => {
                        match &self.splitter(&spec.name).expect("schema-aligned").column {
                            SplitterColumn::Numeric(v) => {
                                if v[row].is_nan() {
                                    "NA".into()
                                } else {
                                    format!("{}", v[row])
                                }
                            }
                            SplitterColumn::Categorical { codes, levels } => {
                                if codes[row] == MISSING_CODE {
                                    "NA".into()
                                } else {
                                    levels[codes[row] as usize].clone()
                                }
                            }
                        }
                    }
                };
                record.push(field);
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}
