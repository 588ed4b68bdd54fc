//! Within-frame design stage: pre-treatment covariate matrices and
//! nonnegative control design weights from nearest-neighbor matching or
//! entropy balancing, with balance diagnostics.
//!
//! Design weights decide which controls matter for approximating a frame's
//! untreated path; they do not touch aggregation across frames. Treated
//! units always keep implicit weight one. Every design column is dated at or
//! before `anchor - 1` by construction: [`CovariateSpec`] admits only lags
//! of at least one period, so no post-treatment information can leak into
//! the weights.
//!
//! Entropy balancing follows Hainmueller (2012): exponential-tilting weights
//! solving first-moment conditions, fitted by damped Newton iteration on the
//! dual with step-halving. Matching uses (rank-)Mahalanobis distance in the
//! style of Rosenbaum's robust matching.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::stacking::Frame;

/// Which pre-anchor values enter the design matrix. Lags are relative to the
/// frame anchor: lag `l` reads the value at `anchor - l`, so `l >= 1` keeps
/// everything strictly pre-treatment.
#[derive(Debug, Clone, Default, Serialize, serde::Deserialize)]
pub struct CovariateSpec {
    /// Outcome lags (values of `Y` at `anchor - l`).
    #[serde(default)]
    pub outcome_lags: Vec<u32>,
    /// Covariate name -> lags.
    #[serde(default)]
    pub covariate_lags: BTreeMap<String, Vec<u32>>,
    /// Covariates requiring exact agreement; they stratify the frame rather
    /// than entering the distance or moment conditions. Read at `anchor - 1`.
    #[serde(default)]
    pub exact: Vec<String>,
    /// Covariates to log-transform before use.
    #[serde(default)]
    pub log: Vec<String>,
}

impl CovariateSpec {
    pub fn validate(&self) -> Result<()> {
        let bad_lag = self
            .outcome_lags
            .iter()
            .chain(self.covariate_lags.values().flatten())
            .any(|&l| l == 0);
        if bad_lag {
            return Err(Error::InvalidSpec(
                "lag 0 reads the anchor period itself; design columns must be \
                 dated at or before anchor-1 (use lags >= 1)"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.outcome_lags.is_empty() && self.covariate_lags.is_empty()
    }

    fn wants_log(&self, name: &str) -> bool {
        self.log.iter().any(|n| n == name)
    }
}

/// What to do when a treated row lacks a required lag. Dropping treated rows
/// changes the estimand, so the default is to fail loudly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TreatedMissingPolicy {
    #[default]
    Error,
    Drop,
}

/// One realized design row.
#[derive(Debug, Clone)]
pub struct DesignRow {
    pub unit: u32,
    pub treated: bool,
    /// Exact-stratum label ("" when no exact variables).
    pub stratum: String,
    pub values: Vec<f64>,
}

/// Per-frame covariate matrix with deterministic column order and no
/// missing cells; members lacking any required value are excluded and
/// logged.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub frame_key: String,
    pub columns: Vec<String>,
    pub rows: Vec<DesignRow>,
    /// Controls excluded for missing design values, with reasons.
    pub excluded: Vec<(u32, String)>,
    /// Treated members excluded under [`TreatedMissingPolicy::Drop`]. They
    /// stay frame members (the estimand keeps them), but the balance
    /// targets no longer represent them, so this is tracked separately.
    pub treated_excluded: Vec<(u32, String)>,
}

impl DesignMatrix {
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    fn strata(&self) -> Vec<String> {
        let mut s: Vec<String> = self.rows.iter().map(|r| r.stratum.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Build the design matrix for one frame. Values come from the panel at
/// `anchor - l`; exact variables are read at `anchor - 1`.
pub fn build_design_matrix(
    panel: &PanelData,
    frame: &Frame,
    spec: &CovariateSpec,
    treated_policy: TreatedMissingPolicy,
) -> Result<DesignMatrix> {
    spec.validate()?;
    for name in spec.covariate_lags.keys().chain(spec.exact.iter()) {
        if !panel.has_covariate(name) {
            return Err(Error::UnknownCovariate(name.clone()));
        }
    }

    let mut columns = Vec::new();
    for &l in &spec.outcome_lags {
        columns.push(format!("y.l{l}"));
    }
    for (name, lags) in &spec.covariate_lags {
        for &l in lags {
            columns.push(format!("{name}.l{l}"));
        }
    }

    let read_row = |unit: u32| -> std::result::Result<(Vec<f64>, String), String> {
        let mut values = Vec::with_capacity(columns.len());
        for &l in &spec.outcome_lags {
            let t = frame.anchor - l as i64;
            match panel.outcome_at(unit, t) {
                Some(v) => values.push(v),
                None => return Err(format!("missing outcome lag {l} (t={t})")),
            }
        }
        for (name, lags) in &spec.covariate_lags {
            for &l in lags {
                let t = frame.anchor - l as i64;
                let raw = panel
                    .covariate_at(name, unit, t)
                    .map_err(|e| e.to_string())?;
                match raw {
                    Some(v) if spec.wants_log(name) => {
                        if v > 0.0 {
                            values.push(v.ln());
                        } else {
                            return Err(format!("log of non-positive `{name}`={v} at t={t}"));
                        }
                    }
                    Some(v) => values.push(v),
                    None => return Err(format!("missing covariate `{name}` lag {l} (t={t})")),
                }
            }
        }
        let mut stratum_parts = Vec::with_capacity(spec.exact.len());
        for name in &spec.exact {
            let t = frame.anchor - 1;
            match panel
                .covariate_at(name, unit, t)
                .map_err(|e| e.to_string())?
            {
                Some(v) => stratum_parts.push(format!("{name}={v}")),
                None => return Err(format!("missing exact variable `{name}` at t={t}")),
            }
        }
        Ok((values, stratum_parts.join("|")))
    };

    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    let mut treated_excluded = Vec::new();
    for (unit, treated) in frame.members() {
        match read_row(unit) {
            Ok((values, stratum)) => rows.push(DesignRow {
                unit,
                treated,
                stratum,
                values,
            }),
            Err(reason) if treated => match treated_policy {
                TreatedMissingPolicy::Error => {
                    return Err(Error::Design {
                        frame: frame.key.to_string(),
                        reason: format!(
                            "treated unit {} excluded from design: {reason} \
                             (this changes the estimand; use the drop policy to allow it)",
                            panel.unit_id(unit)
                        ),
                    });
                }
                TreatedMissingPolicy::Drop => treated_excluded.push((unit, reason)),
            },
            Err(reason) => excluded.push((unit, reason)),
        }
    }

    if !rows.iter().any(|r| !r.treated) {
        return Err(Error::Design {
            frame: frame.key.to_string(),
            reason: "every control was excluded for missing design values".into(),
        });
    }
    if !rows.iter().any(|r| r.treated) {
        return Err(Error::Design {
            frame: frame.key.to_string(),
            reason: "every treated unit was excluded from the design".into(),
        });
    }

    Ok(DesignMatrix {
        frame_key: frame.key.to_string(),
        columns,
        rows,
        excluded,
        treated_excluded,
    })
}

/// How design weights were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMethod {
    Uniform,
    NnMatch,
    Entropy,
}

impl fmt::Display for DesignMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DesignMethod::Uniform => write!(f, "uniform"),
            DesignMethod::NnMatch => write!(f, "match"),
            DesignMethod::Entropy => write!(f, "ebalance"),
        }
    }
}

/// Nonnegative design weights over one frame's controls. Controls with
/// weight zero stay in the map (and later in the stacked sample) so
/// diagnostics can count them.
#[derive(Debug, Clone)]
pub struct DesignWeights {
    pub frame_key: String,
    pub b: BTreeMap<u32, f64>,
    pub method: DesignMethod,
    pub diagnostics: BalanceTable,
    pub warnings: Vec<String>,
}

impl DesignWeights {
    /// Uniform weights (`b = 1` for every control): the no-refinement
    /// baseline that reduces the estimator to plain corrective stacking.
    pub fn uniform(frame: &Frame) -> DesignWeights {
        DesignWeights {
            frame_key: frame.key.to_string(),
            b: frame.controls.iter().map(|&u| (u, 1.0)).collect(),
            method: DesignMethod::Uniform,
            diagnostics: BalanceTable::default(),
            warnings: Vec::new(),
        }
    }

    pub fn mass(&self) -> f64 {
        self.b.values().sum()
    }
}

/// Distance metric for nearest-neighbor matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    Mahalanobis,
    /// Columns replaced by midranks before the Mahalanobis form.
    RankMahalanobis,
}

#[derive(Debug, Clone)]
pub struct NnOptions {
    /// Controls matched per treated row.
    pub ratio: usize,
    pub replacement: bool,
    pub distance: DistanceKind,
    /// Maximum admissible distance (on the Mahalanobis scale).
    pub caliper: Option<f64>,
    /// Diagonal inflation factor for the pooled covariance, as a multiple of
    /// its mean diagonal. Lag-of-outcome columns are often collinear.
    pub ridge: f64,
}

impl Default for NnOptions {
    fn default() -> Self {
        Self {
            ratio: 1,
            replacement: true,
            distance: DistanceKind::Mahalanobis,
            caliper: None,
            ridge: 1e-8,
        }
    }
}

fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pooled covariance of the design columns with a ridge on the diagonal;
/// escalates the ridge until the matrix factors.
fn pooled_metric(data: &[Vec<f64>], ridge: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let n = data.len();
    let p = data[0].len();
    let mut mean = vec![0.0; p];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for row in data {
        for a in 0..p {
            for b in 0..p {
                cov[(a, b)] += (row[a] - mean[a]) * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    cov /= denom;

    let mean_diag = (cov.diagonal().sum() / p as f64).max(f64::MIN_POSITIVE);
    let mut lambda = ridge.max(0.0);
    for _ in 0..8 {
        let mut ridged = cov.clone();
        for d in 0..p {
            ridged[(d, d)] += lambda * mean_diag;
        }
        if let Some(chol) = Cholesky::new(ridged) {
            return Ok(chol);
        }
        lambda = if lambda == 0.0 { 1e-8 } else { lambda * 10.0 };
    }
    Err(Error::Estimation(
        "design covariance is singular even after ridging".into(),
    ))
}

fn mahalanobis_sq(chol: &Cholesky<f64, nalgebra::Dyn>, a: &[f64], b: &[f64]) -> f64 {
    let diff = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
    let solved = chol.solve(&diff);
    diff.dot(&solved).max(0.0)
}

/// Nearest-neighbor matching within exact strata. With replacement, `b_s`
/// counts how often control `s` is selected; without replacement the greedy
/// pass over treated rows (in unit order) marks each selected control once.
/// Distance ties break by unit order so match sets are unique.
pub fn nn_match(dm: &DesignMatrix, opts: &NnOptions) -> Result<DesignWeights> {
    if opts.ratio < 1 {
        return Err(Error::Design {
            frame: dm.frame_key.clone(),
            reason: "matching ratio must be >= 1".into(),
        });
    }

    let mut b: BTreeMap<u32, f64> = dm
        .rows
        .iter()
        .filter(|r| !r.treated)
        .map(|r| (r.unit, 0.0))
        .collect();

    // A zero-column design carries no information: every control is equally
    // close, and matching degenerates to uniform weights.
    if dm.n_columns() == 0 {
        for w in b.values_mut() {
            *w = 1.0;
        }
        let weights = DesignWeights {
            frame_key: dm.frame_key.clone(),
            b,
            method: DesignMethod::NnMatch,
            diagnostics: BalanceTable::default(),
            warnings: vec!["empty covariate spec: matching degenerated to uniform".into()],
        };
        return Ok(weights);
    }

    let working: Vec<Vec<f64>> = match opts.distance {
        DistanceKind::Mahalanobis => dm.rows.iter().map(|r| r.values.clone()).collect(),
        DistanceKind::RankMahalanobis => {
            let n = dm.rows.len();
            let mut cols = vec![vec![0.0; n]; dm.n_columns()];
            for (i, row) in dm.rows.iter().enumerate() {
                for (j, &v) in row.values.iter().enumerate() {
                    cols[j][i] = v;
                }
            }
            let ranked: Vec<Vec<f64>> = cols.iter().map(|c| midranks(c)).collect();
            (0..n)
                .map(|i| ranked.iter().map(|c| c[i]).collect())
                .collect()
        }
    };
    let metric = pooled_metric(&working, opts.ridge)?;

    for stratum in dm.strata() {
        let treated_idx: Vec<usize> = dm
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.treated && r.stratum == stratum)
            .map(|(i, _)| i)
            .collect();
        if treated_idx.is_empty() {
            continue;
        }
        let control_idx: Vec<usize> = dm
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.treated && r.stratum == stratum)
            .map(|(i, _)| i)
            .collect();
        if control_idx.is_empty() {
            return Err(Error::Design {
                frame: dm.frame_key.clone(),
                reason: format!(
                    "exact stratum `{stratum}` has treated rows but no controls \
                     (overlap failure)"
                ),
            });
        }

        let mut used: Vec<bool> = vec![false; control_idx.len()];
        for &t in &treated_idx {
            let mut candidates: Vec<(f64, usize, usize)> = control_idx
                .iter()
                .enumerate()
                .filter(|(slot, _)| opts.replacement || !used[*slot])
                .map(|(slot, &c)| {
                    let d = mahalanobis_sq(&metric, &working[t], &working[c]).sqrt();
                    (d, slot, c)
                })
                .filter(|(d, _, _)| opts.caliper.is_none_or(|cal| *d <= cal))
                .collect();
            candidates.sort_by(|x, y| {
                x.0.partial_cmp(&y.0)
                    .expect("finite distance")
                    .then_with(|| dm.rows[x.2].unit.cmp(&dm.rows[y.2].unit))
            });

            if candidates.is_empty() {
                return Err(Error::Design {
                    frame: dm.frame_key.clone(),
                    reason: format!(
                        "treated unit index {} has no eligible control \
                         (caliper or stratum left it empty)",
                        dm.rows[t].unit
                    ),
                });
            }
            if candidates.len() < opts.ratio {
                return Err(Error::Design {
                    frame: dm.frame_key.clone(),
                    reason: format!(
                        "treated unit index {} has {} eligible controls but ratio is {}",
                        dm.rows[t].unit,
                        candidates.len(),
                        opts.ratio
                    ),
                });
            }
            for &(_, slot, c) in candidates.iter().take(opts.ratio) {
                if opts.replacement {
                    *b.get_mut(&dm.rows[c].unit).expect("control registered") += 1.0;
                } else {
                    used[slot] = true;
                    *b.get_mut(&dm.rows[c].unit).expect("control registered") = 1.0;
                }
            }
        }
    }

    let mut weights = DesignWeights {
        frame_key: dm.frame_key.clone(),
        b,
        method: DesignMethod::NnMatch,
        diagnostics: BalanceTable::default(),
        warnings: Vec::new(),
    };
    weights.diagnostics = balance_table(dm, &weights);
    Ok(weights)
}

/// What to do when entropy balancing fails to converge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnFailure {
    #[default]
    Error,
    FallbackUniform,
}

#[derive(Debug, Clone)]
pub struct EbalOptions {
    /// Convergence threshold on the largest standardized moment violation.
    pub tolerance: f64,
    pub max_iter: usize,
    pub on_failure: OnFailure,
}

impl Default for EbalOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 200,
            on_failure: OnFailure::Error,
        }
    }
}

struct StratumSolve {
    weights: Vec<f64>,
    converged: bool,
    worst_column: usize,
    worst_violation: f64,
}

/// Damped Newton on the entropy-balancing dual for one stratum. Columns are
/// centered at the target and scaled by the control standard deviation, so
/// the gradient is exactly the standardized moment violation.
fn solve_stratum(controls: &[&[f64]], target: &[f64], opts: &EbalOptions) -> StratumSolve {
    let n = controls.len();
    let p_all = target.len();

    // Center/scale; constant columns either match the target (drop) or are
    // plainly infeasible. Columns that duplicate an earlier one (repeated
    // lags of a time-invariant covariate) impose the same constraint and are
    // dropped.
    let mut scale = vec![0.0; p_all];
    let mut keep: Vec<usize> = Vec::new();
    for j in 0..p_all {
        let mean = controls.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = controls.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            let duplicate = keep
                .iter()
                .any(|&prev| target[prev] == target[j] && controls.iter().all(|r| r[prev] == r[j]));
            if !duplicate {
                scale[j] = sd;
                keep.push(j);
            }
        } else {
            let gap = (mean - target[j]).abs() / mean.abs().max(1.0);
            if gap > 1e-10 {
                return StratumSolve {
                    weights: vec![1.0; n],
                    converged: false,
                    worst_column: j,
                    worst_violation: gap,
                };
            }
        }
    }

    let p = keep.len();
    if p == 0 {
        return StratumSolve {
            weights: vec![1.0; n],
            converged: true,
            worst_column: 0,
            worst_violation: 0.0,
        };
    }
    let z: Vec<Vec<f64>> = controls
        .iter()
        .map(|row| {
            keep.iter()
                .map(|&j| (row[j] - target[j]) / scale[j])
                .collect()
        })
        .collect();

    // Dual objective f(l) = log sum_s exp(l . z_s); grad is the weighted
    // standardized violation, Hessian the weighted covariance of z.
    let eval = |lambda: &DVector<f64>| -> (f64, Vec<f64>) {
        let logits: Vec<f64> = z
            .iter()
            .map(|row| row.iter().zip(lambda.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        (max + sum_exp.ln(), logits)
    };
    let weights_from = |logits: &[f64]| -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        w.into_iter().map(|v| v / sum).collect()
    };

    let mut lambda = DVector::<f64>::zeros(p);
    let (mut f_cur, mut logits) = eval(&lambda);
    let mut grad = DVector::<f64>::zeros(p);
    for _ in 0..opts.max_iter {
        let w = weights_from(&logits);
        for j in 0..p {
            grad[j] = w.iter().zip(&z).map(|(wi, row)| wi * row[j]).sum();
        }
        if grad.amax() <= opts.tolerance {
            break;
        }
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for (wi, row) in w.iter().zip(&z) {
            for a in 0..p {
                for b in a..p {
                    hess[(a, b)] += wi * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        hess -= &grad * grad.transpose();
        // Small diagonal damping keeps collinear columns (e.g. duplicated
        // lags) solvable.
        let damp = 1e-10 * (hess.diagonal().amax().max(1.0));
        for d in 0..p {
            hess[(d, d)] += damp;
        }
        let step = match Cholesky::new(hess) {
            Some(chol) => chol.solve(&grad),
            None => grad.clone(),
        };

        let mut accepted = false;
        let mut eta = 1.0;
        for _ in 0..40 {
            let trial = &lambda - eta * &step;
            let (f_trial, logits_trial) = eval(&trial);
            if f_trial < f_cur {
                lambda = trial;
                f_cur = f_trial;
                logits = logits_trial;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            // Near the optimum the objective is flat at float resolution and
            // strict descent stalls; take the full Newton step when it still
            // shrinks the gradient.
            let trial = &lambda - &step;
            let (f_trial, logits_trial) = eval(&trial);
            let w_trial = weights_from(&logits_trial);
            let g_trial = (0..p)
                .map(|j| {
                    w_trial
                        .iter()
                        .zip(&z)
                        .map(|(wi, row)| wi * row[j])
                        .sum::<f64>()
                        .abs()
                })
                .fold(0.0f64, f64::max);
            if g_trial < grad.amax() {
                lambda = trial;
                f_cur = f_trial;
                logits = logits_trial;
            } else {
                break;
            }
        }
    }

    let w = weights_from(&logits);
    for j in 0..p {
        grad[j] = w.iter().zip(&z).map(|(wi, row)| wi * row[j]).sum();
    }
    let (worst_local, worst_violation) = grad
        .iter()
        .enumerate()
        .map(|(j, g)| (j, g.abs()))
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
        .unwrap_or((0, 0.0));
    let converged = worst_violation <= opts.tolerance;

    // Normalize to the stratum's control count; scale is irrelevant to the
    // estimator but this keeps weights comparable to the uniform baseline.
    let weights = w.into_iter().map(|v| v * n as f64).collect();
    StratumSolve {
        weights,
        converged,
        worst_column: keep.get(worst_local).copied().unwrap_or(0),
        worst_violation,
    }
}

/// Entropy balancing within each exact stratum: control weights of the
/// exponential-family form matching the treated first moments of every
/// design column.
pub fn entropy_balance(dm: &DesignMatrix, opts: &EbalOptions) -> Result<DesignWeights> {
    let mut b: BTreeMap<u32, f64> = dm
        .rows
        .iter()
        .filter(|r| !r.treated)
        .map(|r| (r.unit, 0.0))
        .collect();
    let mut warnings = Vec::new();

    if dm.n_columns() == 0 {
        for w in b.values_mut() {
            *w = 1.0;
        }
        return Ok(DesignWeights {
            frame_key: dm.frame_key.clone(),
            b,
            method: DesignMethod::Entropy,
            diagnostics: BalanceTable::default(),
            warnings: vec!["empty covariate spec: balancing degenerated to uniform".into()],
        });
    }

    for stratum in dm.strata() {
        let treated: Vec<&DesignRow> = dm
            .rows
            .iter()
            .filter(|r| r.treated && r.stratum == stratum)
            .collect();
        if treated.is_empty() {
            // No treated mass to represent: stratum controls stay at zero.
            continue;
        }
        let controls: Vec<&DesignRow> = dm
            .rows
            .iter()
            .filter(|r| !r.treated && r.stratum == stratum)
            .collect();
        if controls.len() < 2 {
            return Err(Error::Design {
                frame: dm.frame_key.clone(),
                reason: format!(
                    "exact stratum `{stratum}` has {} control(s); balancing needs at least 2",
                    controls.len()
                ),
            });
        }

        let p = dm.n_columns();
        let mut target = vec![0.0; p];
        for row in &treated {
            for (t, v) in target.iter_mut().zip(&row.values) {
                *t += v;
            }
        }
        for t in &mut target {
            *t /= treated.len() as f64;
        }

        let control_values: Vec<&[f64]> = controls.iter().map(|r| r.values.as_slice()).collect();
        let solve = solve_stratum(&control_values, &target, opts);
        if !solve.converged {
            match opts.on_failure {
                OnFailure::Error => {
                    return Err(Error::NoConvergence {
                        frame: dm.frame_key.clone(),
                        column: dm.columns[solve.worst_column].clone(),
                        violation: solve.worst_violation,
                    });
                }
                OnFailure::FallbackUniform => {
                    warnings.push(format!(
                        "entropy balancing did not converge in stratum `{stratum}` \
                         (worst column `{}`, standardized violation {:.3e}); \
                         falling back to uniform weights for this stratum",
                        dm.columns[solve.worst_column], solve.worst_violation
                    ));
                    for row in &controls {
                        *b.get_mut(&row.unit).expect("registered") = 1.0;
                    }
                    continue;
                }
            }
        }
        for (row, w) in controls.iter().zip(&solve.weights) {
            *b.get_mut(&row.unit).expect("registered") = *w;
        }
    }

    let mut weights = DesignWeights {
        frame_key: dm.frame_key.clone(),
        b,
        method: DesignMethod::Entropy,
        diagnostics: BalanceTable::default(),
        warnings,
    };
    weights.diagnostics = balance_table(dm, &weights);
    Ok(weights)
}

/// Per-column balance summary. SMDs use the treated-group standard
/// deviation in the denominator.
#[derive(Debug, Clone, Default, Serialize)]
pub struct BalanceTable {
    pub rows: Vec<BalanceRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceRow {
    pub column: String,
    pub treated_mean: f64,
    pub control_mean: f64,
    pub control_mean_weighted: f64,
    pub smd_before: f64,
    pub smd_after: f64,
    /// Set when the treated column is (near-)constant but the means differ,
    /// which makes the SMD scale meaningless.
    pub flagged: bool,
}

/// Balance diagnostics for a design matrix under given weights, pooled
/// across strata.
pub fn balance_table(dm: &DesignMatrix, weights: &DesignWeights) -> BalanceTable {
    let mut rows = Vec::with_capacity(dm.n_columns());
    for (j, column) in dm.columns.iter().enumerate() {
        let treated: Vec<f64> = dm
            .rows
            .iter()
            .filter(|r| r.treated)
            .map(|r| r.values[j])
            .collect();
        let controls: Vec<(f64, f64)> = dm
            .rows
            .iter()
            .filter(|r| !r.treated)
            .map(|r| (r.values[j], weights.b.get(&r.unit).copied().unwrap_or(0.0)))
            .collect();

        let nt = treated.len() as f64;
        let treated_mean = treated.iter().sum::<f64>() / nt;
        let treated_sd = (treated
            .iter()
            .map(|v| (v - treated_mean).powi(2))
            .sum::<f64>()
            / nt)
            .sqrt();

        let control_mean = controls.iter().map(|(v, _)| v).sum::<f64>() / controls.len() as f64;
        let wsum: f64 = controls.iter().map(|(_, w)| w).sum();
        let control_mean_weighted = if wsum > 0.0 {
            controls.iter().map(|(v, w)| v * w).sum::<f64>() / wsum
        } else {
            f64::NAN
        };

        let (smd_before, smd_after, flagged) = if treated_sd > 1e-12 {
            (
                (treated_mean - control_mean) / treated_sd,
                (treated_mean - control_mean_weighted) / treated_sd,
                false,
            )
        } else {
            let equal_before = (treated_mean - control_mean).abs() <= 1e-12;
            let equal_after = (treated_mean - control_mean_weighted).abs() <= 1e-12;
            (
                if equal_before { 0.0 } else { f64::NAN },
                if equal_after { 0.0 } else { f64::NAN },
                !(equal_before && equal_after),
            )
        };

        rows.push(BalanceRow {
            column: column.clone(),
            treated_mean,
            control_mean,
            control_mean_weighted,
            smd_before,
            smd_after,
            flagged,
        });
    }
    BalanceTable { rows }
}
