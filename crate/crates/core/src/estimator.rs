//! Event-study estimation on the stacked sample.
//!
//! Two routes to the same point estimates:
//!
//! * [`estimate_direct`] — the treated-share average of within-frame
//!   design-weighted DID contrasts, computed from long differences.
//! * [`estimate_regression`] — weighted least squares of outcome levels on
//!   event-time indicators with both frame fixed-effect dimensions
//!   (frame-by-unit and frame-by-event) absorbed by weighted alternating
//!   projections.
//!
//! The saturated weighted specification makes the two agree to numerical
//! precision; the test suite enforces agreement within 1e-8 and uses the
//! direct form (cheaper) inside bootstrap replicates.
//!
//! Inference is conditional on the design weights: a Liang-Zeger
//! cluster-robust sandwich on the regression route, or a cluster bootstrap
//! that resamples units while holding each unit's design weight fixed and
//! recomputing only counts, masses, and the direct estimator. Re-estimating
//! a nonsmooth matching step inside the bootstrap is not valid (Abadie &
//! Imbens 2008), so no such option exists here.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::design::DesignWeights;
use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::stacking::{long_difference, StackPlan};
use crate::weights::{corrective_weights, effective_mass, EffectiveMass, FinalWeights};

/// Cluster definition for the sandwich variance. Unit-level clustering is
/// the default: it also absorbs dependence from units reappearing across
/// frames. Frame-by-unit clustering is the finer alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterLevel {
    #[default]
    Unit,
    FrameUnit,
}

impl std::fmt::Display for ClusterLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClusterLevel::Unit => write!(f, "unit"),
            ClusterLevel::FrameUnit => write!(f, "frame-unit"),
        }
    }
}

/// One stacked observation.
#[derive(Debug, Clone)]
pub struct StackedRow {
    pub frame: usize,
    pub unit: u32,
    pub e: i64,
    pub y: f64,
    pub treated: bool,
    pub weight: f64,
}

/// The pooled regression sample: one row per (frame, member, event time),
/// in deterministic (frame, member, event) order. Zero-weight rows are
/// retained so audits can count unmatched controls.
#[derive(Debug, Clone)]
pub struct StackedSample {
    pub rows: Vec<StackedRow>,
    /// Event times carrying coefficients (reference `-1` excluded).
    pub event_times: Vec<i64>,
    pub n_frames: usize,
}

/// Materialize the stacked rows with final weights. Outcomes are levels;
/// the regression's fixed effects do the differencing.
pub fn stack_sample(
    plan: &StackPlan,
    weights: &FinalWeights,
    panel: &PanelData,
) -> Result<StackedSample> {
    let mut rows = Vec::new();
    for (idx, frame) in plan.frames.iter().enumerate() {
        for (unit, treated) in frame.members() {
            let w = weights.weight(idx, unit, treated);
            for e in plan.window.event_times() {
                let t = frame.anchor + e;
                let y = panel.outcome_at(unit, t).ok_or_else(|| {
                    Error::Estimation(format!(
                        "frame {}: unit {} missing outcome at t={t}",
                        frame.key,
                        panel.unit_id(unit)
                    ))
                })?;
                rows.push(StackedRow {
                    frame: idx,
                    unit,
                    e,
                    y,
                    treated,
                    weight: w,
                });
            }
        }
    }
    let event_times: Vec<i64> = plan.window.event_times().filter(|&e| e != -1).collect();
    Ok(StackedSample {
        rows,
        event_times,
        n_frames: plan.frames.len(),
    })
}

/// Long differences for every frame member, in a layout the direct
/// estimator and bootstrap replicates can reuse without touching the panel
/// again.
#[derive(Debug, Clone)]
pub struct FrameDiffs {
    /// Treated members: (unit, long difference per entry of `event_times`).
    pub treated: Vec<(u32, Vec<f64>)>,
    /// Controls: (unit, design weight, long differences).
    pub controls: Vec<(u32, f64, Vec<f64>)>,
}

/// Precompute per-frame long differences at every non-reference event time.
pub fn frame_diffs(
    plan: &StackPlan,
    designs: &[DesignWeights],
    panel: &PanelData,
) -> Result<Vec<FrameDiffs>> {
    let event_times: Vec<i64> = plan.window.event_times().filter(|&e| e != -1).collect();
    let mut out = Vec::with_capacity(plan.frames.len());
    for (frame, design) in plan.frames.iter().zip(designs) {
        let mut treated = Vec::with_capacity(frame.n_treated());
        for &unit in &frame.treated {
            let diffs = event_times
                .iter()
                .map(|&e| long_difference(panel, frame, unit, e))
                .collect::<Result<Vec<f64>>>()?;
            treated.push((unit, diffs));
        }
        let mut controls = Vec::with_capacity(frame.n_controls());
        for &unit in &frame.controls {
            let b = design.b.get(&unit).copied().unwrap_or(0.0);
            let diffs = event_times
                .iter()
                .map(|&e| long_difference(panel, frame, unit, e))
                .collect::<Result<Vec<f64>>>()?;
            controls.push((unit, b, diffs));
        }
        out.push(FrameDiffs { treated, controls });
    }
    Ok(out)
}

/// Direct point estimates: per frame and event time, the unweighted treated
/// mean of long differences minus the design-weighted control mean, then
/// the treated-share average across frames.
pub fn estimate_direct(
    plan: &StackPlan,
    designs: &[DesignWeights],
    panel: &PanelData,
) -> Result<EventStudyResult> {
    let mass = effective_mass(plan, designs)?;
    let diffs = frame_diffs(plan, designs, panel)?;
    let event_times: Vec<i64> = plan.window.event_times().filter(|&e| e != -1).collect();
    let (estimates, contributions) = direct_from_diffs(plan, &diffs, &mass, &event_times, panel)?;

    let rows = event_times
        .iter()
        .zip(&estimates)
        .map(|(&e, &estimate)| EventRow {
            e,
            estimate,
            se: None,
            ci_low: None,
            ci_high: None,
        })
        .collect();
    Ok(EventStudyResult {
        rows,
        contributions,
        meta: ResultMeta::new(plan, designs, &mass, "none", None, None),
    })
}

fn direct_from_diffs(
    plan: &StackPlan,
    diffs: &[FrameDiffs],
    mass: &EffectiveMass,
    event_times: &[i64],
    panel: &PanelData,
) -> Result<(Vec<f64>, Vec<FrameContribution>)> {
    let (n_treated_total, _) = plan.totals();
    let mut estimates = vec![0.0; event_times.len()];
    let mut contributions = Vec::with_capacity(plan.frames.len());
    for (idx, (frame, fd)) in plan.frames.iter().zip(diffs).enumerate() {
        let share = frame.n_treated() as f64 / n_treated_total as f64;
        let b_sum: f64 = fd.controls.iter().map(|(_, b, _)| b).sum();
        if b_sum.is_nan() || b_sum <= 0.0 {
            return Err(Error::Degenerate {
                frame: frame.key.to_string(),
                reason: "control design weights sum to zero".into(),
            });
        }
        let mut did = Vec::with_capacity(event_times.len());
        for (j, &e) in event_times.iter().enumerate() {
            let treated_mean =
                fd.treated.iter().map(|(_, d)| d[j]).sum::<f64>() / fd.treated.len() as f64;
            let control_mean = fd.controls.iter().map(|(_, b, d)| b * d[j]).sum::<f64>() / b_sum;
            let v = treated_mean - control_mean;
            estimates[j] += share * v;
            did.push(EventValue { e, value: v });
        }
        contributions.push(FrameContribution {
            frame: frame.key.to_string(),
            share,
            n_treated: frame.n_treated(),
            n_controls: frame.n_controls(),
            effective_mass: mass.per_frame[idx],
            treated_dropped_incomplete: frame
                .treated_dropped
                .iter()
                .map(|&u| panel.unit_id(u).to_string())
                .collect(),
            did,
        });
    }
    Ok((estimates, contributions))
}

/// The direct estimator on a resampled multiset of units (`counts[u]` copies
/// of unit `u`), with counts and effective masses recomputed from the
/// replicate and design weights carried over unchanged. Returns `None` when
/// any frame loses all treated units or all positive-mass controls. With
/// `counts` identically one this reproduces [`estimate_direct`].
pub fn direct_on_multiset(
    plan: &StackPlan,
    diffs: &[FrameDiffs],
    counts: &[u32],
    n_event_times: usize,
) -> Option<Vec<f64>> {
    let mut frame_stats: Vec<(f64, Vec<f64>)> = Vec::with_capacity(plan.frames.len());
    let mut n_treated_total = 0.0;
    for fd in diffs {
        let mut n_treated = 0.0;
        let mut treated_sum = vec![0.0; n_event_times];
        for (unit, d) in &fd.treated {
            let c = counts[*unit as usize] as f64;
            if c == 0.0 {
                continue;
            }
            n_treated += c;
            for (acc, v) in treated_sum.iter_mut().zip(d) {
                *acc += c * v;
            }
        }
        let mut b_mass = 0.0;
        let mut control_sum = vec![0.0; n_event_times];
        for (unit, b, d) in &fd.controls {
            let c = counts[*unit as usize] as f64;
            if c == 0.0 {
                continue;
            }
            b_mass += c * b;
            for (acc, v) in control_sum.iter_mut().zip(d) {
                *acc += c * b * v;
            }
        }
        if n_treated == 0.0 || b_mass.is_nan() || b_mass <= 0.0 {
            return None;
        }
        n_treated_total += n_treated;
        let did: Vec<f64> = treated_sum
            .iter()
            .zip(&control_sum)
            .map(|(t, c)| t / n_treated - c / b_mass)
            .collect();
        frame_stats.push((n_treated, did));
    }
    let mut estimates = vec![0.0; n_event_times];
    for (n_treated, did) in &frame_stats {
        let share = n_treated / n_treated_total;
        for (acc, v) in estimates.iter_mut().zip(did) {
            *acc += share * v;
        }
    }
    Some(estimates)
}

/// Weighted two-way within transformation: iterated weighted demeaning over
/// both cell groupings until the largest absolute subtracted mean is at most
/// `tol`, capped at `max_sweeps` full sweeps.
#[allow(clippy::too_many_arguments)]
fn demean_two_way(
    values: &mut [f64],
    weights: &[f64],
    cells_a: &[usize],
    n_a: usize,
    cells_b: &[usize],
    n_b: usize,
    tol: f64,
    max_sweeps: usize,
) -> Result<()> {
    let mut wsum_a = vec![0.0; n_a];
    let mut wsum_b = vec![0.0; n_b];
    for i in 0..values.len() {
        wsum_a[cells_a[i]] += weights[i];
        wsum_b[cells_b[i]] += weights[i];
    }
    let mut mean = vec![0.0; n_a.max(n_b)];
    for _ in 0..max_sweeps {
        let mut max_change = 0.0f64;
        for (cells, wsum) in [(cells_a, &wsum_a), (cells_b, &wsum_b)] {
            let n = wsum.len();
            mean[..n].fill(0.0);
            for i in 0..values.len() {
                mean[cells[i]] += weights[i] * values[i];
            }
            for (m, &ws) in mean[..n].iter_mut().zip(wsum) {
                if ws > 0.0 {
                    *m /= ws;
                    max_change = max_change.max(m.abs());
                } else {
                    *m = 0.0;
                }
            }
            for i in 0..values.len() {
                values[i] -= mean[cells[i]];
            }
        }
        if max_change <= tol {
            return Ok(());
        }
    }
    Err(Error::Estimation(format!(
        "fixed-effect absorption did not converge within {max_sweeps} sweeps \
         (pathological weights?)"
    )))
}

/// Liang-Zeger cluster-robust sandwich for a weighted least-squares fit on
/// absorbed regressors, with small-sample factor
/// `G/(G-1) * (N-1)/(N-K)` where `K` counts the slope coefficients plus the
/// absorbed fixed-effect cells that are not nested inside clusters (nested
/// cells do not consume cluster-level degrees of freedom).
pub fn cluster_robust_vcov(
    x: &DMatrix<f64>,
    weights: &[f64],
    residuals: &[f64],
    clusters: &[usize],
    k_absorbed: usize,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let p = x.ncols();
    let n_clusters = clusters.iter().copied().max().map_or(0, |m| m + 1);
    if n_clusters < 2 {
        return Err(Error::Estimation(format!(
            "cluster-robust variance requires at least 2 clusters (got {n_clusters})"
        )));
    }

    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        for a in 0..p {
            for b in a..p {
                xtwx[(a, b)] += weights[i] * x[(i, a)] * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let bread = Cholesky::new(xtwx)
        .ok_or_else(|| Error::Estimation("X'WX is singular in the sandwich".into()))?
        .inverse();

    let mut scores = DMatrix::<f64>::zeros(n_clusters, p);
    for i in 0..n {
        let g = clusters[i];
        let we = weights[i] * residuals[i];
        for a in 0..p {
            scores[(g, a)] += we * x[(i, a)];
        }
    }
    let meat = scores.transpose() * &scores;

    let g = n_clusters as f64;
    let n_f = n as f64;
    let k = (p + k_absorbed) as f64;
    if n_f - k <= 0.0 {
        return Err(Error::Estimation(format!(
            "no residual degrees of freedom: N={n} observations, K={} parameters",
            p + k_absorbed
        )));
    }
    let correction = g / (g - 1.0) * (n_f - 1.0) / (n_f - k);
    Ok(&bread * meat * &bread * correction)
}

/// Fitted regression route: coefficients, cluster-robust variance, and the
/// bookkeeping the small-sample correction used.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub event_times: Vec<i64>,
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    pub vcov: DMatrix<f64>,
    /// Rows with positive weight.
    pub n_rows: usize,
    pub n_clusters: usize,
    /// Absorbed fixed-effect cells counted in K.
    pub k_absorbed: usize,
}

const DEMEAN_TOL: f64 = 1e-10;
const DEMEAN_MAX_SWEEPS: usize = 1000;

/// Weighted least squares on the stacked sample with both fixed-effect
/// dimensions absorbed. The small-sample `K` counts the event-time
/// coefficients plus the (frame, event) cells net of one shared level per
/// frame; (frame, unit) cells are nested inside both supported cluster
/// levels and are excluded, as in standard practice for fixed effects
/// nested within clusters.
pub fn estimate_regression(sample: &StackedSample, cluster: ClusterLevel) -> Result<RegressionFit> {
    let used: Vec<usize> = sample
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.weight > 0.0)
        .map(|(i, _)| i)
        .collect();
    if used.is_empty() {
        return Err(Error::Estimation(
            "stacked sample has no positive weight".into(),
        ));
    }
    let n = used.len();

    // Dense ids for the two FE groupings and the clusters, over used rows.
    let mut unit_cells: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    let mut event_cells: BTreeMap<(usize, i64), usize> = BTreeMap::new();
    let mut cluster_ids: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    let mut frames_used: BTreeMap<usize, ()> = BTreeMap::new();
    let mut cells_a = Vec::with_capacity(n);
    let mut cells_b = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    for &i in &used {
        let r = &sample.rows[i];
        let next = unit_cells.len();
        cells_a.push(*unit_cells.entry((r.frame, r.unit)).or_insert(next));
        let next = event_cells.len();
        cells_b.push(*event_cells.entry((r.frame, r.e)).or_insert(next));
        let key = match cluster {
            ClusterLevel::Unit => (usize::MAX, r.unit),
            ClusterLevel::FrameUnit => (r.frame, r.unit),
        };
        let next = cluster_ids.len();
        clusters.push(*cluster_ids.entry(key).or_insert(next));
        frames_used.insert(r.frame, ());
    }
    let n_a = unit_cells.len();
    let n_b = event_cells.len();

    let weights: Vec<f64> = used.iter().map(|&i| sample.rows[i].weight).collect();
    let mut y: Vec<f64> = used.iter().map(|&i| sample.rows[i].y).collect();
    demean_two_way(
        &mut y,
        &weights,
        &cells_a,
        n_a,
        &cells_b,
        n_b,
        DEMEAN_TOL,
        DEMEAN_MAX_SWEEPS,
    )?;

    let k = sample.event_times.len();
    let mut x = DMatrix::<f64>::zeros(n, k);
    for (j, &h) in sample.event_times.iter().enumerate() {
        let mut col: Vec<f64> = used
            .iter()
            .map(|&i| {
                let r = &sample.rows[i];
                if r.treated && r.e == h {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        demean_two_way(
            &mut col,
            &weights,
            &cells_a,
            n_a,
            &cells_b,
            n_b,
            DEMEAN_TOL,
            DEMEAN_MAX_SWEEPS,
        )?;
        let norm: f64 = col.iter().zip(&weights).map(|(v, w)| w * v * v).sum();
        if norm <= 1e-12 {
            return Err(Error::Estimation(format!(
                "event-time cell e={h} is collinear with the fixed effects"
            )));
        }
        for (i, v) in col.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }

    let mut xtwx = DMatrix::<f64>::zeros(k, k);
    let mut xtwy = DVector::<f64>::zeros(k);
    for i in 0..n {
        for a in 0..k {
            let wxa = weights[i] * x[(i, a)];
            xtwy[a] += wxa * y[i];
            for b in a..k {
                xtwx[(a, b)] += wxa * x[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let chol = Cholesky::new(xtwx).ok_or_else(|| {
        Error::Estimation("event-time regressors are collinear after absorption".into())
    })?;
    let beta = chol.solve(&xtwy);

    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let mut fit = 0.0;
            for j in 0..k {
                fit += x[(i, j)] * beta[j];
            }
            y[i] - fit
        })
        .collect();

    // (frame, unit) cells never straddle clusters at either level, so only
    // the (frame, event) dimension consumes cluster degrees of freedom.
    let k_absorbed = n_b - frames_used.len();
    let vcov = cluster_robust_vcov(&x, &weights, &residuals, &clusters, k_absorbed)?;
    let se: Vec<f64> = (0..k).map(|j| vcov[(j, j)].max(0.0).sqrt()).collect();

    Ok(RegressionFit {
        event_times: sample.event_times.clone(),
        estimates: beta.iter().copied().collect(),
        se,
        vcov,
        n_rows: n,
        n_clusters: cluster_ids.len(),
        k_absorbed,
    })
}

#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    /// Two-sided confidence level for the percentile interval.
    pub level: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replicates: 999,
            seed: 0,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapSummary {
    pub event_times: Vec<i64>,
    pub se: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Replicates dropped because a frame lost all treated units or all
    /// positive-mass controls.
    pub dropped: usize,
    pub used: usize,
}

/// Cluster bootstrap conditional on the estimated design weights: resample
/// units with replacement, carry each unit's `b` over unchanged, recompute
/// counts and masses, and rerun the direct estimator. Deterministic given
/// the seed and independent of worker count.
pub fn cluster_bootstrap(
    plan: &StackPlan,
    designs: &[DesignWeights],
    panel: &PanelData,
    opts: &BootstrapOptions,
) -> Result<BootstrapSummary> {
    if opts.replicates < 1 {
        return Err(Error::Bootstrap("need at least one replicate".into()));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::Bootstrap(format!(
            "confidence level must be in (0, 1), got {}",
            opts.level
        )));
    }
    effective_mass(plan, designs)?;
    let diffs = frame_diffs(plan, designs, panel)?;
    let event_times: Vec<i64> = plan.window.event_times().filter(|&e| e != -1).collect();
    let n_units = panel.n_units();

    let replicates: Vec<Option<Vec<f64>>> = (0..opts.replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(rep + 1);
            let mut counts = vec![0u32; n_units];
            for _ in 0..n_units {
                counts[rng.random_range(0..n_units)] += 1;
            }
            direct_on_multiset(plan, &diffs, &counts, event_times.len())
        })
        .collect();

    let kept: Vec<&Vec<f64>> = replicates.iter().flatten().collect();
    let dropped = opts.replicates - kept.len();
    if dropped * 2 > opts.replicates {
        return Err(Error::Bootstrap(format!(
            "{dropped} of {} replicates lost a frame's treated units or control mass; \
             the design is too thin to resample (larger panel or narrower window needed)",
            opts.replicates
        )));
    }

    let alpha = (1.0 - opts.level) / 2.0;
    let mut se = Vec::with_capacity(event_times.len());
    let mut ci_low = Vec::with_capacity(event_times.len());
    let mut ci_high = Vec::with_capacity(event_times.len());
    for j in 0..event_times.len() {
        let mut draws: Vec<f64> = kept.iter().map(|r| r[j]).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        se.push(sample_sd(&draws));
        ci_low.push(quantile(&draws, alpha));
        ci_high.push(quantile(&draws, 1.0 - alpha));
    }
    Ok(BootstrapSummary {
        event_times,
        se,
        ci_low,
        ci_high,
        dropped,
        used: kept.len(),
    })
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Empirical quantile with linear interpolation on sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Inference attached to a full event-study run.
#[derive(Debug, Clone)]
pub enum Inference {
    /// Point estimates only.
    None,
    /// Cluster-robust sandwich conditional on design weights (default).
    Analytic,
    /// Cluster bootstrap conditional on design weights.
    Bootstrap(BootstrapOptions),
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub cluster: ClusterLevel,
    pub inference: Inference,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            cluster: ClusterLevel::Unit,
            inference: Inference::Analytic,
        }
    }
}

/// Per-event-time estimate with confidence bounds when inference ran.
#[derive(Debug, Clone, Serialize)]
pub struct EventRow {
    pub e: i64,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EventValue {
    pub e: i64,
    pub value: f64,
}

/// One frame's contribution to the aggregate.
#[derive(Debug, Clone, Serialize)]
pub struct FrameContribution {
    pub frame: String,
    pub share: f64,
    pub n_treated: usize,
    pub n_controls: usize,
    pub effective_mass: f64,
    pub treated_dropped_incomplete: Vec<String>,
    pub did: Vec<EventValue>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultMeta {
    pub mode: String,
    pub design_method: String,
    pub window_pre: u32,
    pub window_post: u32,
    pub lags: Option<u32>,
    pub n_frames: usize,
    pub n_treated_total: usize,
    pub n_controls_total: usize,
    pub effective_control_mass: f64,
    /// "trimmed-aggregate-att", suffixed when incomplete treated units were
    /// dropped and the cohort shares changed.
    pub estimand: String,
    pub treated_trimmed: bool,
    pub inference: String,
    pub cluster_level: Option<String>,
    pub n_clusters: Option<usize>,
    pub dropped_frames: Vec<DroppedFrame>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DroppedFrame {
    pub key: String,
    pub reason: String,
}

impl ResultMeta {
    fn new(
        plan: &StackPlan,
        designs: &[DesignWeights],
        mass: &EffectiveMass,
        inference: &str,
        cluster_level: Option<ClusterLevel>,
        n_clusters: Option<usize>,
    ) -> Self {
        let (n_treated_total, n_controls_total) = plan.totals();
        let treated_trimmed = plan.treated_trimmed();
        let estimand = if treated_trimmed {
            "trimmed-aggregate-att (treated units trimmed for incomplete windows)".to_string()
        } else {
            "trimmed-aggregate-att".to_string()
        };
        let method = designs
            .first()
            .map(|d| d.method.to_string())
            .unwrap_or_else(|| "uniform".into());
        ResultMeta {
            mode: plan.mode.to_string(),
            design_method: method,
            window_pre: plan.window.pre(),
            window_post: plan.window.post(),
            lags: plan.lags,
            n_frames: plan.frames.len(),
            n_treated_total,
            n_controls_total,
            effective_control_mass: mass.total,
            estimand,
            treated_trimmed,
            inference: inference.to_string(),
            cluster_level: cluster_level.map(|c| c.to_string()),
            n_clusters,
            dropped_frames: plan
                .dropped
                .iter()
                .map(|(k, r)| DroppedFrame {
                    key: k.to_string(),
                    reason: r.to_string(),
                })
                .collect(),
            warnings: designs.iter().flat_map(|d| d.warnings.clone()).collect(),
        }
    }
}

/// Full event-study output: estimates, inference, per-frame contributions,
/// and design metadata.
#[derive(Debug, Clone, Serialize)]
pub struct EventStudyResult {
    pub rows: Vec<EventRow>,
    pub contributions: Vec<FrameContribution>,
    pub meta: ResultMeta,
}

impl EventStudyResult {
    /// Flat CSV: one line per non-reference event time.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("e,estimate,se,ci_low,ci_high,n_treated,n_control_effective\n");
        for row in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.e,
                row.estimate,
                opt(row.se),
                opt(row.ci_low),
                opt(row.ci_high),
                self.meta.n_treated_total,
                self.meta.effective_control_mass,
            ));
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable result");
        s.push('\n');
        s
    }
}

/// Run the full second stage: corrective weights, stacked regression, and
/// the requested inference. Point estimates come from the regression route;
/// the direct route fills the per-frame contributions.
pub fn event_study(
    panel: &PanelData,
    plan: &StackPlan,
    designs: &[DesignWeights],
    opts: &EstimateOptions,
) -> Result<EventStudyResult> {
    let mass = effective_mass(plan, designs)?;
    let final_weights = corrective_weights(plan, designs, &mass)?;
    let sample = stack_sample(plan, &final_weights, panel)?;

    let diffs = frame_diffs(plan, designs, panel)?;
    let event_times: Vec<i64> = plan.window.event_times().filter(|&e| e != -1).collect();
    let (_, contributions) = direct_from_diffs(plan, &diffs, &mass, &event_times, panel)?;

    match &opts.inference {
        Inference::None => {
            let mut result = estimate_direct(plan, designs, panel)?;
            result.contributions = contributions;
            Ok(result)
        }
        Inference::Analytic => {
            let fit = estimate_regression(&sample, opts.cluster)?;
            let rows = fit
                .event_times
                .iter()
                .zip(&fit.estimates)
                .zip(&fit.se)
                .map(|((&e, &estimate), &se)| EventRow {
                    e,
                    estimate,
                    se: Some(se),
                    ci_low: Some(estimate - 1.96 * se),
                    ci_high: Some(estimate + 1.96 * se),
                })
                .collect();
            Ok(EventStudyResult {
                rows,
                contributions,
                meta: ResultMeta::new(
                    plan,
                    designs,
                    &mass,
                    "analytic",
                    Some(opts.cluster),
                    Some(fit.n_clusters),
                ),
            })
        }
        Inference::Bootstrap(bopts) => {
            let fit = estimate_regression(&sample, opts.cluster)?;
            let boot = cluster_bootstrap(plan, designs, panel, bopts)?;
            let rows = fit
                .event_times
                .iter()
                .enumerate()
                .map(|(j, &e)| EventRow {
                    e,
                    estimate: fit.estimates[j],
                    se: Some(boot.se[j]),
                    ci_low: Some(boot.ci_low[j]),
                    ci_high: Some(boot.ci_high[j]),
                })
                .collect();
            let mut meta = ResultMeta::new(
                plan,
                designs,
                &mass,
                "bootstrap",
                Some(opts.cluster),
                Some(fit.n_clusters),
            );
            meta.warnings.push(format!(
                "bootstrap: {} replicates used, {} dropped",
                boot.used, boot.dropped
            ));
            Ok(EventStudyResult {
                rows,
                contributions,
                meta,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignWeights;
    use crate::panel::{PanelBuilder, PanelRow};
    use crate::stacking::{build_absorbing, EventWindow};

    fn uniform_designs(plan: &StackPlan) -> Vec<DesignWeights> {
        plan.frames.iter().map(DesignWeights::uniform).collect()
    }

    /// One cohort, one treated, two controls, two periods (window (1, 0)).
    fn tiny_panel() -> PanelData {
        let rows = [
            ("t1", 1, 1.0, 0),
            ("t1", 2, 2.0, 1),
            ("c1", 1, 0.5, 0),
            ("c1", 2, 0.7, 0),
            ("c2", 1, 1.0, 0),
            ("c2", 2, 1.4, 0),
        ];
        let mut b = PanelBuilder::new();
        for (u, t, y, d) in rows {
            b.push(PanelRow {
                unit: u.to_string(),
                time: t,
                outcome: Some(y),
                treatment: Some(d),
                covariates: vec![],
            });
        }
        b.finish().unwrap()
    }

    #[test]
    fn single_frame_means() {
        // Treated change 1.0; control changes 0.2 and 0.4 -> DID 0.7.
        let panel = tiny_panel();
        let plan = build_absorbing(&panel, EventWindow::new(1, 0).unwrap()).unwrap();
        let designs = uniform_designs(&plan);
        let res = estimate_direct(&plan, &designs, &panel).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert_eq!(res.rows[0].e, 0);
        assert!((res.rows[0].estimate - 0.7).abs() < 1e-12);
    }

    #[test]
    fn stacked_sample_counts_and_clusters() {
        let panel = crate::stacking::tests::oracle_panel_a();
        let plan = build_absorbing(&panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let designs = uniform_designs(&plan);
        let mass = effective_mass(&plan, &designs).unwrap();
        let weights = corrective_weights(&plan, &designs, &mass).unwrap();
        let sample = stack_sample(&plan, &weights, &panel).unwrap();
        // 9 member slots x 4 event times.
        assert_eq!(sample.rows.len(), 36);
        // u4 appears in both frames under the same unit id.
        let u4 = panel.unit_index("u4").unwrap();
        let frames: Vec<usize> = sample
            .rows
            .iter()
            .filter(|r| r.unit == u4)
            .map(|r| r.frame)
            .collect();
        assert!(frames.contains(&0) && frames.contains(&1));
    }

    #[test]
    fn zero_weight_rows_are_retained() {
        let panel = crate::stacking::tests::oracle_panel_a();
        let plan = build_absorbing(&panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let mut designs = uniform_designs(&plan);
        // Unmatch u4 in frame a=4.
        let u4 = panel.unit_index("u4").unwrap();
        designs[0].b.insert(u4, 0.0);
        let mass = effective_mass(&plan, &designs).unwrap();
        let weights = corrective_weights(&plan, &designs, &mass).unwrap();
        let sample = stack_sample(&plan, &weights, &panel).unwrap();
        assert_eq!(sample.rows.len(), 36);
        assert!(sample
            .rows
            .iter()
            .any(|r| r.unit == u4 && r.frame == 0 && r.weight == 0.0));
    }

    #[test]
    fn regression_equals_direct_on_fixture() {
        let panel = crate::stacking::tests::oracle_panel_a();
        let plan = build_absorbing(&panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let designs = uniform_designs(&plan);
        let direct = estimate_direct(&plan, &designs, &panel).unwrap();
        let mass = effective_mass(&plan, &designs).unwrap();
        let weights = corrective_weights(&plan, &designs, &mass).unwrap();
        let sample = stack_sample(&plan, &weights, &panel).unwrap();
        let fit = estimate_regression(&sample, ClusterLevel::Unit).unwrap();
        for (row, est) in direct.rows.iter().zip(&fit.estimates) {
            assert!(
                (row.estimate - est).abs() <= 1e-8,
                "e={}: direct {} vs regression {}",
                row.e,
                row.estimate,
                est
            );
        }
    }

    #[test]
    fn fixture_direct_matches_flat_recomputation() {
        // Independent spreadsheet-style recomputation from the raw fixture.
        let panel = crate::stacking::tests::oracle_panel_a();
        let plan = build_absorbing(&panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let designs = uniform_designs(&plan);
        let res = estimate_direct(&plan, &designs, &panel).unwrap();

        let y = |unit: &str, t: i64| {
            panel
                .outcome_at(panel.unit_index(unit).unwrap(), t)
                .unwrap()
        };
        let diff = |unit: &str, anchor: i64, e: i64| y(unit, anchor + e) - y(unit, anchor - 1);
        let mut expected = Vec::new();
        for e in [-2i64, 0, 1] {
            let d4 = (diff("u1", 4, e) + diff("u2", 4, e)) / 2.0
                - (diff("u4", 4, e) + diff("u5", 4, e) + diff("u6", 4, e)) / 3.0;
            let d5 =
                diff("u3", 5, e) - (diff("u4", 5, e) + diff("u5", 5, e) + diff("u6", 5, e)) / 3.0;
            expected.push((2.0 / 3.0) * d4 + (1.0 / 3.0) * d5);
        }
        for (row, want) in res.rows.iter().zip(expected) {
            assert!(
                (row.estimate - want).abs() < 1e-12,
                "e={}: {} vs {}",
                row.e,
                row.estimate,
                want
            );
        }
    }

    #[test]
    fn trimmed_treated_units_change_the_estimand_label() {
        // Knock out u1's outcome at t=5 (e=1 for cohort 4): u1 is dropped
        // per-frame and the result must say so.
        let base = crate::stacking::tests::oracle_panel_a();
        let mut b = PanelBuilder::new();
        for unit in 0..base.n_units() as u32 {
            for t in 1..=8i64 {
                let y = if base.unit_id(unit) == "u1" && t == 5 {
                    None
                } else {
                    base.outcome_at(unit, t)
                };
                b.push(PanelRow {
                    unit: base.unit_id(unit).to_string(),
                    time: t,
                    outcome: y,
                    treatment: base.treatment_at(unit, t),
                    covariates: vec![],
                });
            }
        }
        let panel = b.finish().unwrap();
        let plan = build_absorbing(&panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let designs = uniform_designs(&plan);
        let res = event_study(&panel, &plan, &designs, &EstimateOptions::default()).unwrap();
        assert!(res.meta.treated_trimmed);
        assert!(res.meta.estimand.contains("treated units trimmed"));
        let c4 = &res.contributions[0];
        assert_eq!(c4.treated_dropped_incomplete, vec!["u1".to_string()]);
        assert_eq!(c4.n_treated, 1);
    }

    #[test]
    fn identity_resample_reproduces_point_estimate() {
        let panel = crate::stacking::tests::oracle_panel_a();
        let plan = build_absorbing(&panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let designs = uniform_designs(&plan);
        let diffs = frame_diffs(&plan, &designs, &panel).unwrap();
        let counts = vec![1u32; panel.n_units()];
        let boot = direct_on_multiset(&plan, &diffs, &counts, 3).unwrap();
        let direct = estimate_direct(&plan, &designs, &panel).unwrap();
        for (b, row) in boot.iter().zip(&direct.rows) {
            assert!((b - row.estimate).abs() < 1e-14);
        }
    }

    #[test]
    fn one_cluster_errors() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, -0.5, 0.2]);
        let err = cluster_robust_vcov(&x, &[1.0, 1.0, 1.0], &[0.1, 0.2, -0.1], &[0, 0, 0], 0)
            .unwrap_err();
        assert!(matches!(err, Error::Estimation(_)));
    }

    #[test]
    fn degenerate_bootstrap_panel_errors() {
        // Two one-unit cohorts and a single never-treated control: a
        // replicate survives only if all three units are drawn, so roughly
        // three quarters of replicates drop.
        let mut b = PanelBuilder::new();
        let paths: &[(&str, [u8; 4])] = &[
            ("t1", [0, 1, 1, 1]),
            ("t2", [0, 0, 1, 1]),
            ("c", [0, 0, 0, 0]),
        ];
        for (i, (unit, ds)) in paths.iter().enumerate() {
            for t in 1..=4i64 {
                b.push(PanelRow {
                    unit: unit.to_string(),
                    time: t,
                    outcome: Some(t as f64 + i as f64),
                    treatment: Some(ds[(t - 1) as usize]),
                    covariates: vec![],
                });
            }
        }
        let panel = b.finish().unwrap();
        let plan = build_absorbing(&panel, EventWindow::new(1, 0).unwrap()).unwrap();
        assert_eq!(plan.frames.len(), 2);
        let designs = uniform_designs(&plan);
        let err = cluster_bootstrap(
            &plan,
            &designs,
            &panel,
            &BootstrapOptions {
                replicates: 200,
                seed: 7,
                level: 0.95,
            },
        );
        assert!(matches!(err, Err(Error::Bootstrap(_))));
    }

    #[test]
    fn calendar_and_unit_shifts_do_not_move_estimates() {
        let panel = crate::stacking::tests::oracle_panel_a();
        let plan = build_absorbing(&panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let designs = uniform_designs(&plan);
        let base = estimate_direct(&plan, &designs, &panel).unwrap();

        // Shift every outcome of period t=5 by +3 and all of u2 by -7.
        let mut b = PanelBuilder::new();
        for unit in 0..panel.n_units() as u32 {
            for t in 1..=8i64 {
                let mut y = panel.outcome_at(unit, t).unwrap();
                if t == 5 {
                    y += 3.0;
                }
                if panel.unit_id(unit) == "u2" {
                    y -= 7.0;
                }
                b.push(PanelRow {
                    unit: panel.unit_id(unit).to_string(),
                    time: t,
                    outcome: Some(y),
                    treatment: panel.treatment_at(unit, t),
                    covariates: vec![],
                });
            }
        }
        let shifted_panel = b.finish().unwrap();
        let plan2 = build_absorbing(&shifted_panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let designs2 = uniform_designs(&plan2);

        // The unit shift cancels in long differences; the calendar shift is
        // absorbed by the frame-by-event effects in the regression route.
        let mass = effective_mass(&plan2, &designs2).unwrap();
        let w = corrective_weights(&plan2, &designs2, &mass).unwrap();
        let sample = stack_sample(&plan2, &w, &shifted_panel).unwrap();
        let fit = estimate_regression(&sample, ClusterLevel::Unit).unwrap();
        for (row, est) in base.rows.iter().zip(&fit.estimates) {
            // Calendar shifts hit different event times across cohorts in the
            // direct form too; both cohorts see t=5 inside the window, and
            // the frame-by-event effects absorb it exactly.
            assert!(
                (row.estimate - est).abs() < 1e-9,
                "e={}: {} vs {}",
                row.e,
                row.estimate,
                est
            );
        }
    }

    #[test]
    fn duplicate_rows_half_weight_invariance() {
        let panel = crate::stacking::tests::oracle_panel_a();
        let plan = build_absorbing(&panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let designs = uniform_designs(&plan);
        let mass = effective_mass(&plan, &designs).unwrap();
        let weights = corrective_weights(&plan, &designs, &mass).unwrap();
        let sample = stack_sample(&plan, &weights, &panel).unwrap();
        let fit = estimate_regression(&sample, ClusterLevel::Unit).unwrap();

        let mut doubled = sample.clone();
        let halved: Vec<StackedRow> = sample
            .rows
            .iter()
            .map(|r| StackedRow {
                weight: r.weight / 2.0,
                ..r.clone()
            })
            .collect();
        doubled.rows = halved.clone();
        doubled.rows.extend(halved);
        let fit2 = estimate_regression(&doubled, ClusterLevel::Unit).unwrap();

        for (a, b) in fit.estimates.iter().zip(&fit2.estimates) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        // Same clusters and scores: SEs differ only through the
        // small-sample factor's N.
        let g = fit.n_clusters as f64;
        let k = (fit.estimates.len() + fit.k_absorbed) as f64;
        let (n1, n2) = (fit.n_rows as f64, fit2.n_rows as f64);
        let c1 = g / (g - 1.0) * (n1 - 1.0) / (n1 - k);
        let c2 = g / (g - 1.0) * (n2 - 1.0) / (n2 - k);
        let expected_ratio = (c2 / c1).sqrt();
        for (s1, s2) in fit.se.iter().zip(&fit2.se) {
            assert!(
                ((s2 / s1) - expected_ratio).abs() < 1e-10,
                "{s2} / {s1} vs {expected_ratio}"
            );
        }
    }

    #[test]
    fn event_study_analytic_has_cis() {
        let panel = crate::stacking::tests::oracle_panel_a();
        let plan = build_absorbing(&panel, EventWindow::new(2, 1).unwrap()).unwrap();
        let designs = uniform_designs(&plan);
        let res = event_study(&panel, &plan, &designs, &EstimateOptions::default()).unwrap();
        for row in &res.rows {
            let (se, lo, hi) = (row.se.unwrap(), row.ci_low.unwrap(), row.ci_high.unwrap());
            assert!(se >= 0.0);
            assert!(lo <= row.estimate && row.estimate <= hi);
        }
        assert_eq!(res.meta.estimand, "trimmed-aggregate-att");
        assert!(!res.meta.treated_trimmed);
    }
}
