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
// Reversal panels for episode-mode tests.

pub type RawRows = Vec<(String, i64, Option<f64>, Option<u8>)>;

/// Raw rows of a random panel with treatment reversals and occasional gaps.
pub fn random_reversal_rows(rng: &mut ChaCha8Rng) -> RawRows {
    let n_units = rng.random_range(3..=15);
    let t_max = rng.random_range(6..=12i64);
    let mut rows = Vec::new();
    for i in 0..n_units {
        let mut d: u8 = u8::from(rng.random::<f64>() < 0.25);
        for t in 1..=t_max {
            // Random switching with persistence.
            if rng.random::<f64>() < 0.25 {
                d = 1 - d;
            }
            if rng.random::<f64>() < 0.05 {
                continue; // row gap
            }
            let y = if rng.random::<f64>() < 0.04 {
                None // missing outcome
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
