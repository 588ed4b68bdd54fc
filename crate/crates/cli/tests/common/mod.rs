#![allow(dead_code)]

//! Shared helpers for the oracle and acceptance suites: random panel
//! generation and an independent dense-dummy weighted least-squares fit.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use stackdid::design::{BalanceTable, DesignMethod, DesignWeights};
use stackdid::estimator::{ClusterLevel, StackedSample};
use stackdid::panel::{PanelBuilder, PanelData, PanelRow};
use stackdid::stacking::{build_absorbing, EventWindow, StackPlan};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random staggered-adoption panel that is admissible for the given window:
/// at least one cohort with complete treated units and clean controls.
/// Retries internally until admissible.
pub fn random_admissible_panel(
    rng: &mut ChaCha8Rng,
    n_units_lo: usize,
    n_units_hi: usize,
) -> (PanelData, EventWindow) {
    loop {
        let n_units = rng.random_range(n_units_lo..=n_units_hi);
        let t_max = rng.random_range(8..=14i64);
        let pre = rng.random_range(1..=3u32);
        let post = rng.random_range(0..=2u32);
        let window = EventWindow::new(pre, post).unwrap();

        let a_lo = 1 + pre as i64;
        let a_hi = t_max - post as i64;
        if a_lo >= a_hi {
            continue;
        }
        let n_cohorts = rng.random_range(2..=3usize);
        let mut cohorts: Vec<i64> = (0..n_cohorts)
            .map(|_| rng.random_range(a_lo..=a_hi))
            .collect();
        cohorts.sort_unstable();
        cohorts.dedup();

        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut builder = PanelBuilder::new();
        for i in 0..n_units {
            let adoption = if rng.random::<f64>() < 0.45 {
                None
            } else {
                Some(cohorts[rng.random_range(0..cohorts.len())])
            };
            let drift: f64 = normal.sample(rng) * 0.3;
            let mut y: f64 = normal.sample(rng) * 2.0;
            for t in 1..=t_max {
                y += drift + normal.sample(rng) * 0.5;
                let treated_now = matches!(adoption, Some(a) if t >= a);
                let effect = if treated_now { 1.0 } else { 0.0 };
                builder.push(PanelRow {
                    unit: format!("u{i:03}"),
                    time: t,
                    outcome: Some(y + effect),
                    treatment: Some(u8::from(treated_now)),
                    covariates: vec![],
                });
            }
        }
        let panel = builder.finish().unwrap();
        if let Ok(plan) = build_absorbing(&panel, window) {
            if plan.frames.iter().all(|f| f.n_controls() >= 2) {
                return (panel, window);
            }
        }
    }
}

/// Random positive design weights with occasional zeros, keyed like the
/// uniform weights would be.
pub fn random_designs(
    rng: &mut ChaCha8Rng,
    plan: &StackPlan,
    allow_zero: bool,
) -> Vec<DesignWeights> {
    plan.frames
        .iter()
        .map(|frame| {
            let mut b: BTreeMap<u32, f64> = BTreeMap::new();
            loop {
                b.clear();
                for &u in &frame.controls {
                    let w = if allow_zero && rng.random::<f64>() < 0.2 {
                        0.0
                    } else {
                        rng.random_range(0.2..3.0)
                    };
                    b.insert(u, w);
                }
                if b.values().sum::<f64>() > 0.0 {
                    break;
                }
            }
            DesignWeights {
                frame_key: frame.key.to_string(),
                b,
                method: DesignMethod::Uniform,
                diagnostics: BalanceTable::default(),
                warnings: vec![],
            }
        })
        .collect()
}

/// Independent dense-dummy weighted least squares: explicit (frame, unit)
/// and (frame, event) dummy columns (one event level dropped per frame),
/// solved on the sqrt-weight-scaled system, with the cluster sandwich over
/// the full coefficient vector. Returns the event-time coefficient block and
/// its standard errors.
pub fn dense_dummy_fit(sample: &StackedSample, cluster: ClusterLevel) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<_> = sample.rows.iter().filter(|r| r.weight > 0.0).collect();
    let n = rows.len();

    let mut unit_cells: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    let mut event_cells: BTreeMap<(usize, i64), usize> = BTreeMap::new();
    for r in &rows {
        let next = unit_cells.len();
        unit_cells.entry((r.frame, r.unit)).or_insert(next);
        let next = event_cells.len();
        event_cells.entry((r.frame, r.e)).or_insert(next);
    }
    // Drop one event level per frame (the reference period) to avoid exact
    // collinearity with the unit dummies.
    let dropped_events: Vec<(usize, i64)> = event_cells
        .keys()
        .filter(|(_, e)| *e == -1)
        .cloned()
        .collect();
    let event_kept: Vec<(usize, i64)> = event_cells
        .keys()
        .filter(|k| !dropped_events.contains(k))
        .cloned()
        .collect();
    let event_col: BTreeMap<(usize, i64), usize> = event_kept
        .iter()
        .enumerate()
        .map(|(i, k)| (*k, i))
        .collect();

    let n_unit = unit_cells.len();
    let n_event = event_col.len();
    let k = sample.event_times.len();
    let p = n_unit + n_event + k;

    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut y = DMatrix::<f64>::zeros(n, 1);
    let mut w = vec![0.0; n];
    let mut clusters = Vec::with_capacity(n);
    let mut cluster_ids: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        x[(i, unit_cells[&(r.frame, r.unit)])] = 1.0;
        if let Some(&j) = event_col.get(&(r.frame, r.e)) {
            x[(i, n_unit + j)] = 1.0;
        }
        if r.treated && r.e != -1 {
            let j = sample
                .event_times
                .iter()
                .position(|&h| h == r.e)
                .expect("event time present");
            x[(i, n_unit + n_event + j)] = 1.0;
        }
        y[(i, 0)] = r.y;
        w[i] = r.weight;
        let key = match cluster {
            ClusterLevel::Unit => (usize::MAX, r.unit),
            ClusterLevel::FrameUnit => (r.frame, r.unit),
        };
        let next = cluster_ids.len();
        clusters.push(*cluster_ids.entry(key).or_insert(next));
    }

    // Solve sqrt(W) X beta = sqrt(W) y by normal equations.
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DMatrix::<f64>::zeros(p, 1);
    for i in 0..n {
        for a in 0..p {
            let wxa = w[i] * x[(i, a)];
            if wxa == 0.0 {
                continue;
            }
            xtwy[(a, 0)] += wxa * y[(i, 0)];
            for b in 0..p {
                xtwx[(a, b)] += wxa * x[(i, b)];
            }
        }
    }
    let xtwx_inv = xtwx
        .clone()
        .try_inverse()
        .expect("dense dummy system invertible");
    let beta = &xtwx_inv * &xtwy;

    // Cluster sandwich over all p coefficients.
    let n_clusters = cluster_ids.len();
    let mut scores = DMatrix::<f64>::zeros(n_clusters, p);
    for (i, r) in rows.iter().enumerate() {
        let mut fit = 0.0;
        for a in 0..p {
            fit += x[(i, a)] * beta[(a, 0)];
        }
        let we = w[i] * (r.y - fit);
        for a in 0..p {
            scores[(clusters[i], a)] += we * x[(i, a)];
        }
    }
    let meat = scores.transpose() * &scores;
    let g = n_clusters as f64;
    let n_f = n as f64;
    // Unit-dummy columns are nested inside the clusters at either level and
    // do not consume cluster degrees of freedom; the correction counts the
    // event dummies and slope columns only.
    let k_eff = (n_event + k) as f64;
    let correction = g / (g - 1.0) * (n_f - 1.0) / (n_f - k_eff);
    let vcov = &xtwx_inv * meat * &xtwx_inv * correction;

    let betas: Vec<f64> = (0..k).map(|j| beta[(n_unit + n_event + j, 0)]).collect();
    let ses: Vec<f64> = (0..k)
        .map(|j| {
            let d = n_unit + n_event + j;
            vcov[(d, d)].max(0.0).sqrt()
        })
        .collect();
    (betas, ses)
}

// ---------------------------------------------------------------------------
// Exhaustive-search matching oracle.

use stackdid::design::DesignMatrix;

/// Plain Gauss-Jordan inverse, independent of the nalgebra path used by the
/// implementation.
pub fn invert(mut m: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        assert!(p.abs() > 1e-14, "oracle matrix singular");
        for j in 0..n {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[i][col];
                for j in 0..n {
                    m[i][j] -= f * m[col][j];
                    inv[i][j] -= f * inv[col][j];
                }
            }
        }
    }
    inv
}

/// Exhaustive nearest-neighbor counts over all treated-control pairs:
/// covariance by loops, inversion by Gauss-Jordan, ties broken by unit id.
pub fn brute_force_match_counts(dm: &DesignMatrix, k: usize, ridge: f64) -> Vec<(u32, f64)> {
    let n = dm.rows.len();
    let p = dm.columns.len();
    let mut mean = vec![0.0; p];
    for r in &dm.rows {
        for (m, v) in mean.iter_mut().zip(&r.values) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; p]; p];
    for r in &dm.rows {
        for a in 0..p {
            for b in 0..p {
                cov[a][b] += (r.values[a] - mean[a]) * (r.values[b] - mean[b]);
            }
        }
    }
    let mut mean_diag = 0.0;
    for (a, row) in cov.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= n as f64 - 1.0;
        }
        mean_diag += row[a];
    }
    mean_diag /= p as f64;
    for (a, row) in cov.iter_mut().enumerate() {
        row[a] += ridge * mean_diag;
    }
    let inv = invert(cov);

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let mut q = 0.0;
        for i in 0..p {
            for j in 0..p {
                q += d[i] * inv[i][j] * d[j];
            }
        }
        q
    };

    let mut counts: Vec<(u32, f64)> = dm
        .rows
        .iter()
        .filter(|r| !r.treated)
        .map(|r| (r.unit, 0.0))
        .collect();
    for t in dm.rows.iter().filter(|r| r.treated) {
        let mut scored: Vec<(f64, u32)> = dm
            .rows
            .iter()
            .filter(|r| !r.treated && r.stratum == t.stratum)
            .map(|c| (dist(&t.values, &c.values), c.unit))
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, unit) in scored.iter().take(k) {
            counts.iter_mut().find(|(u, _)| *u == unit).unwrap().1 += 1.0;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Brute-force episode enumeration oracle.

pub type RawRows = Vec<(String, i64, Option<f64>, Option<u8>)>;
pub type Membership = std::collections::BTreeMap<(i64, Vec<u8>), (Vec<String>, Vec<String>)>;

/// Random panel rows with treatment reversals and occasional gaps.
pub fn random_reversal_rows(rng: &mut ChaCha8Rng) -> RawRows {
    let n_units = rng.random_range(3..=15);
    let t_max = rng.random_range(6..=12i64);
    let mut rows = Vec::new();
    for i in 0..n_units {
        let mut d: u8 = u8::from(rng.random::<f64>() < 0.25);
        for t in 1..=t_max {
            if rng.random::<f64>() < 0.25 {
                d = 1 - d;
            }
            if rng.random::<f64>() < 0.05 {
                continue;
            }
            let y = if rng.random::<f64>() < 0.04 {
                None
            } else {
                Some(rng.random_range(-3.0..3.0))
            };
            rows.push((format!("u{i:02}"), t, y, Some(d)));
        }
    }
    rows
}

pub fn panel_from_rows(rows: &RawRows) -> Option<PanelData> {
    let mut b = PanelBuilder::new();
    for (unit, time, y, d) in rows {
        b.push(PanelRow {
            unit: unit.clone(),
            time: *time,
            outcome: *y,
            treatment: *d,
            covariates: vec![],
        });
    }
    b.finish().ok()
}

/// Enumerates admissible (switch time, history) types straight from the raw
/// rows by scanning, sharing no code with the library path.
pub fn brute_force_episodes(
    rows: &RawRows,
    window: (u32, u32),
    lags: u32,
    flip: bool,
) -> Membership {
    let at = |unit: &str, t: i64| -> (Option<f64>, Option<u8>) {
        for (u, time, y, d) in rows {
            if u == unit && *time == t {
                let d = d.map(|v| if flip { 1 - v } else { v });
                return (*y, d);
            }
        }
        (None, None)
    };
    let mut units: Vec<String> = rows.iter().map(|(u, ..)| u.clone()).collect();
    units.sort();
    units.dedup();
    let t_min = rows.iter().map(|r| r.1).min().unwrap();
    let t_max = rows.iter().map(|r| r.1).max().unwrap();

    let (pre, post) = window;
    let mut out: Membership = Membership::new();
    for tau in (t_min + (pre as i64).max(lags as i64))..=(t_max - post as i64) {
        for unit in &units {
            let mut history = Vec::new();
            let mut defined = true;
            for l in (1..=lags as i64).rev() {
                match at(unit, tau - l).1 {
                    Some(d) => history.push(d),
                    None => {
                        defined = false;
                        break;
                    }
                }
            }
            if !defined || *history.last().unwrap() != 0 {
                continue;
            }
            let window_complete =
                (-(pre as i64)..=post as i64).all(|e| at(unit, tau + e).0.is_some());
            let stable_on = (0..=post as i64).all(|r| at(unit, tau + r).1 == Some(1));
            let stable_off = (0..=post as i64).all(|r| at(unit, tau + r).1 == Some(0));
            if at(unit, tau).1 == Some(1) && stable_on && window_complete {
                out.entry((tau, history.clone()))
                    .or_default()
                    .0
                    .push(unit.clone());
            } else if stable_off && window_complete {
                out.entry((tau, history.clone()))
                    .or_default()
                    .1
                    .push(unit.clone());
            }
        }
    }
    out.retain(|_, (t, c)| !t.is_empty() && !c.is_empty());
    out
}
