//! Long-format panel data: ingestion, validation, and treatment-path queries.
//!
//! A [`PanelData`] is an immutable, indexed view of a long panel
//! `(unit, time) -> (outcome, treatment, covariates)`. Units are interned to
//! dense indices; all downstream stages work on indices and only resolve the
//! original identifiers for display and export. Missing outcomes are explicit
//! (`None`), never silently zero, and missing rows are recorded as per-unit
//! time gaps so window-completeness checks can exclude them.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Compare unit identifiers: integers sort numerically and before any
/// non-numeric identifier; everything else sorts lexicographically. This is
/// the deterministic order used for all tie-breaking downstream.
pub fn unit_id_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// First treatment time of a unit under absorbing adoption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adoption {
    /// First period with `D = 1`.
    At(i64),
    /// No observed treated period.
    Never,
}

impl Adoption {
    /// True when the adoption time is strictly later than `t`
    /// (never-treated counts as infinitely late).
    pub fn after(&self, t: i64) -> bool {
        match self {
            Adoption::At(a) => *a > t,
            Adoption::Never => true,
        }
    }
}

/// One observation being added to a [`PanelBuilder`].
#[derive(Debug, Clone)]
pub struct PanelRow {
    pub unit: String,
    pub time: i64,
    pub outcome: Option<f64>,
    pub treatment: Option<u8>,
    pub covariates: Vec<(String, Option<f64>)>,
}

/// Incremental constructor for [`PanelData`]; collects duplicate keys so the
/// final error can list every offender at once.
#[derive(Debug, Default)]
pub struct PanelBuilder {
    rows: BTreeMap<(String, i64), (Option<f64>, Option<u8>)>,
    covariates: BTreeMap<String, BTreeMap<(String, i64), f64>>,
    covariate_names: BTreeSet<String>,
    duplicates: Vec<(String, i64)>,
}

impl PanelBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: PanelRow) {
        let key = (row.unit.clone(), row.time);
        match self.rows.entry(key) {
            Entry::Occupied(_) => self.duplicates.push((row.unit, row.time)),
            Entry::Vacant(slot) => {
                slot.insert((row.outcome, row.treatment));
                for (name, value) in row.covariates {
                    self.covariate_names.insert(name.clone());
                    if let Some(v) = value {
                        self.covariates
                            .entry(name)
                            .or_default()
                            .insert((row.unit.clone(), row.time), v);
                    }
                }
            }
        }
    }

    pub fn finish(self) -> Result<PanelData> {
        if !self.duplicates.is_empty() {
            return Err(Error::DuplicateKeys(self.duplicates));
        }
        if self.rows.is_empty() {
            return Err(Error::Row {
                row: 0,
                msg: "panel has no rows".into(),
            });
        }

        let mut units: Vec<String> = self
            .rows
            .keys()
            .map(|(u, _)| u.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        units.sort_by(|a, b| unit_id_cmp(a, b));
        let index: BTreeMap<String, u32> = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i as u32))
            .collect();

        let times: Vec<i64> = self
            .rows
            .keys()
            .map(|&(_, t)| t)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let n = units.len();
        let mut observed = vec![BTreeSet::new(); n];
        let mut outcome = vec![BTreeMap::new(); n];
        let mut treatment = vec![BTreeMap::new(); n];
        for ((u, t), (y, d)) in &self.rows {
            let i = index[u] as usize;
            observed[i].insert(*t);
            if let Some(y) = y {
                outcome[i].insert(*t, *y);
            }
            if let Some(d) = d {
                treatment[i].insert(*t, *d);
            }
        }

        let mut covariates: BTreeMap<String, Vec<BTreeMap<i64, f64>>> = self
            .covariate_names
            .iter()
            .map(|name| (name.clone(), vec![BTreeMap::new(); n]))
            .collect();
        for (name, cells) in &self.covariates {
            let store = covariates.get_mut(name).expect("name registered");
            for ((u, t), v) in cells {
                store[index[u] as usize].insert(*t, *v);
            }
        }

        Ok(PanelData {
            units,
            index,
            times,
            observed,
            outcome,
            treatment,
            covariates,
        })
    }
}

/// Validated long-format panel. Immutable after construction and safe to
/// share across parallel workers.
#[derive(Debug, Clone)]
pub struct PanelData {
    units: Vec<String>,
    index: BTreeMap<String, u32>,
    times: Vec<i64>,
    observed: Vec<BTreeSet<i64>>,
    outcome: Vec<BTreeMap<i64, f64>>,
    treatment: Vec<BTreeMap<i64, u8>>,
    covariates: BTreeMap<String, Vec<BTreeMap<i64, f64>>>,
}

impl PanelData {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Unit identifiers in canonical order; positions are the dense indices
    /// used everywhere else.
    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn unit_id(&self, unit: u32) -> &str {
        &self.units[unit as usize]
    }

    pub fn unit_index(&self, id: &str) -> Result<u32> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    /// Sorted union of observed periods across units.
    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn time_range(&self) -> (i64, i64) {
        (self.times[0], *self.times.last().expect("nonempty"))
    }

    /// Whether a row exists for `(unit, t)` (even if its outcome is missing).
    pub fn is_observed(&self, unit: u32, t: i64) -> bool {
        self.observed[unit as usize].contains(&t)
    }

    /// Periods in the panel's global time set with no row for this unit.
    pub fn unit_gaps(&self, unit: u32) -> Vec<i64> {
        self.times
            .iter()
            .copied()
            .filter(|t| !self.is_observed(unit, *t))
            .collect()
    }

    pub fn outcome_at(&self, unit: u32, t: i64) -> Option<f64> {
        self.outcome[unit as usize].get(&t).copied()
    }

    pub fn treatment_at(&self, unit: u32, t: i64) -> Option<u8> {
        self.treatment[unit as usize].get(&t).copied()
    }

    pub fn covariate_names(&self) -> impl Iterator<Item = &str> {
        self.covariates.keys().map(|s| s.as_str())
    }

    pub fn has_covariate(&self, name: &str) -> bool {
        self.covariates.contains_key(name)
    }

    pub fn covariate_at(&self, name: &str, unit: u32, t: i64) -> Result<Option<f64>> {
        let store = self
            .covariates
            .get(name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))?;
        Ok(store[unit as usize].get(&t).copied())
    }

    /// First observed treated period per unit. Fails if any unit's observed
    /// treatment path is non-monotone (a 1 followed by a later 0), since that
    /// breaks the absorbing-adoption reading of the data.
    pub fn adoption_times(&self) -> Result<Vec<Adoption>> {
        let mut out = Vec::with_capacity(self.n_units());
        for unit in 0..self.n_units() as u32 {
            let path = &self.treatment[unit as usize];
            let mut first_on: Option<i64> = None;
            for (&t, &d) in path {
                match (first_on, d) {
                    (None, 1) => first_on = Some(t),
                    (Some(_), 0) => {
                        return Err(Error::NonMonotoneTreatment {
                            unit: self.unit_id(unit).to_string(),
                            time: t,
                        });
                    }
                    _ => {}
                }
            }
            out.push(match first_on {
                Some(a) => Adoption::At(a),
                None => Adoption::Never,
            });
        }
        Ok(out)
    }

    /// Recent treatment history `(D_{t-l}, ..., D_{t-1})` before period `tau`.
    /// Returns `None` when any lag is unobserved — undefined, not an error.
    pub fn treatment_history(&self, unit: u32, tau: i64, lags: u32) -> Option<Vec<u8>> {
        debug_assert!(lags >= 1);
        let mut h = Vec::with_capacity(lags as usize);
        for offset in (1..=lags as i64).rev() {
            h.push(self.treatment_at(unit, tau - offset)?);
        }
        Some(h)
    }

    /// A copy of the panel with `D -> 1 - D` wherever treatment is observed.
    pub fn flip_treatment(&self) -> PanelData {
        let mut flipped = self.clone();
        for path in &mut flipped.treatment {
            for d in path.values_mut() {
                *d = 1 - *d;
            }
        }
        flipped
    }

    /// Serialize back to delimited text with the given schema. Rows are
    /// emitted in (unit, time) canonical order; missing cells are empty.
    pub fn write_csv<W: Write>(&self, writer: W, schema: &PanelSchema) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(schema.delimiter)
            .from_writer(writer);
        let mut header = vec![
            schema.unit.clone(),
            schema.time.clone(),
            schema.outcome.clone(),
            schema.treatment.clone(),
        ];
        header.extend(schema.covariates.iter().cloned());
        w.write_record(&header)?;

        for unit in 0..self.n_units() as u32 {
            for &t in &self.observed[unit as usize] {
                let mut record = vec![
                    self.unit_id(unit).to_string(),
                    t.to_string(),
                    self.outcome_at(unit, t)
                        .map(format_cell)
                        .unwrap_or_default(),
                    self.treatment_at(unit, t)
                        .map(|d| d.to_string())
                        .unwrap_or_default(),
                ];
                for name in &schema.covariates {
                    record.push(
                        self.covariate_at(name, unit, t)?
                            .map(format_cell)
                            .unwrap_or_default(),
                    );
                }
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path, schema: &PanelSchema) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file, schema)
    }
}

fn format_cell(v: f64) -> String {
    // Shortest round-trip representation keeps files stable and re-loadable.
    format!("{v}")
}

/// Column-name mapping for delimited input/output.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PanelSchema {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: u8,
}

fn default_delimiter() -> u8 {
    b','
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "outcome".into(),
            treatment: "treatment".into(),
            covariates: Vec::new(),
            delimiter: b',',
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na")
}

/// Load and validate a delimited panel. Non-numeric outcome cells become
/// missing observations; rows with a missing unit or time are rejected with
/// their row number; treatment cells must be 0, 1, or missing.
pub fn load_panel<R: Read>(reader: R, schema: &PanelSchema) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let unit_col = col(&schema.unit)?;
    let time_col = col(&schema.time)?;
    let outcome_col = col(&schema.outcome)?;
    let treatment_col = col(&schema.treatment)?;
    let covariate_cols: Vec<(String, usize)> = schema
        .covariates
        .iter()
        .map(|name| col(name).map(|i| (name.clone(), i)))
        .collect::<Result<_>>()?;

    let mut builder = PanelBuilder::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let row = row_idx + 2; // 1-based, counting the header line
        let record = record?;
        let unit = record.get(unit_col).unwrap_or("").trim();
        if unit.is_empty() {
            return Err(Error::Row {
                row,
                msg: "missing unit identifier".into(),
            });
        }
        let time_cell = record.get(time_col).unwrap_or("").trim();
        let time: i64 = time_cell.parse().map_err(|_| Error::Row {
            row,
            msg: format!("missing or non-integer time `{time_cell}`"),
        })?;

        let outcome_cell = record.get(outcome_col).unwrap_or("");
        let outcome = if is_missing(outcome_cell) {
            None
        } else {
            outcome_cell.trim().parse::<f64>().ok()
        };

        let treatment_cell = record.get(treatment_col).unwrap_or("");
        let treatment = if is_missing(treatment_cell) {
            None
        } else {
            match treatment_cell.trim().parse::<f64>() {
                Ok(0.0) => Some(0),
                Ok(1.0) => Some(1),
                _ => {
                    return Err(Error::InvalidTreatment {
                        row,
                        value: treatment_cell.trim().to_string(),
                    });
                }
            }
        };

        let covariates = covariate_cols
            .iter()
            .map(|(name, i)| {
                let cell = record.get(*i).unwrap_or("");
                let value = if is_missing(cell) {
                    None
                } else {
                    cell.trim().parse::<f64>().ok()
                };
                (name.clone(), value)
            })
            .collect();

        builder.push(PanelRow {
            unit: unit.to_string(),
            time,
            outcome,
            treatment,
            covariates,
        });
    }
    builder.finish()
}

/// Convenience wrapper over [`load_panel`] for a file path.
pub fn load_panel_path(path: &Path, schema: &PanelSchema) -> Result<PanelData> {
    let file = std::fs::File::open(path)?;
    load_panel(std::io::BufReader::new(file), schema)
}
