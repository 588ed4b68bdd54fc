//! Subexperiment and episode construction.
//!
//! Absorbing mode builds one frame per adoption cohort: units first treated
//! at `a` against clean controls that stay untreated through the entire
//! post-window (`A_s > a + post`), so the control group's composition is
//! fixed across the event window. Episode mode builds one frame per
//! `(switch time, recent treatment history)` pair, the repeated-treatment
//! analogue of a cohort; switch-off designs are handled by flipping the
//! treatment indicator and re-running the switch-on enumeration.
//!
//! All membership requires observed outcomes at every event time in the
//! window, reference period included. Units failing that are excluded
//! per-frame and logged; frames that lose every member are dropped with a
//! machine-readable reason.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{Adoption, PanelData};

/// Uniform event window `e in {-pre, ..., post}`; `e = -1` is the reference
/// period, so `pre >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EventWindow {
    pre: u32,
    post: u32,
}

impl EventWindow {
    pub fn new(pre: u32, post: u32) -> Result<Self> {
        if pre < 1 {
            return Err(Error::InvalidWindow(format!(
                "pre must be >= 1 so the reference period e=-1 exists (got {pre})"
            )));
        }
        Ok(Self { pre, post })
    }

    pub fn pre(&self) -> u32 {
        self.pre
    }

    pub fn post(&self) -> u32 {
        self.post
    }

    /// Event times `-pre ..= post` in ascending order.
    pub fn event_times(&self) -> impl Iterator<Item = i64> + '_ {
        -(self.pre as i64)..=self.post as i64
    }

    pub fn len(&self) -> usize {
        (self.pre + self.post + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Treatment design a stack was built under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Absorbing,
    /// Switch-on episodes (0 -> 1).
    Episode01,
    /// Switch-off episodes (1 -> 0), estimated on the flipped indicator.
    Episode10,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Absorbing => write!(f, "absorbing"),
            Mode::Episode01 => write!(f, "episode01"),
            Mode::Episode10 => write!(f, "episode10"),
        }
    }
}

/// Episode enumeration direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    SwitchOn,
    SwitchOff,
}

/// Frame identity: a cohort in absorbing mode, a `(tau, history)` episode
/// type otherwise. Episode histories are stored in the panel's original
/// treatment coding even for switch-off designs, so that
/// `treatment_history(member, tau, L) == history` holds in every mode.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum FrameKey {
    Cohort(i64),
    Episode { tau: i64, history: Vec<u8> },
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameKey::Cohort(a) => write!(f, "a={a}"),
            FrameKey::Episode { tau, history } => {
                let bits: String = history.iter().map(|d| char::from(b'0' + d)).collect();
                write!(f, "tau={tau},h={bits}")
            }
        }
    }
}

/// Why a candidate cohort or episode type produced no frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    WindowOutOfRange,
    NoCompleteTreated,
    NoControls,
    NoCompleteControls,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::WindowOutOfRange => write!(f, "window_out_of_range"),
            DropReason::NoCompleteTreated => write!(f, "no_complete_treated"),
            DropReason::NoControls => write!(f, "no_controls"),
            DropReason::NoCompleteControls => write!(f, "no_complete_controls"),
        }
    }
}

/// One subexperiment or episode type: treated set, control set, and the
/// calendar anchor of event time zero.
#[derive(Debug, Clone)]
pub struct Frame {
    pub key: FrameKey,
    pub anchor: i64,
    /// Treated members with complete outcome windows, in unit order.
    pub treated: Vec<u32>,
    /// Clean/stable controls with complete outcome windows, in unit order.
    pub controls: Vec<u32>,
    /// Treated candidates excluded for incomplete outcomes. Nonempty means
    /// the cohort share entering the aggregate changed, which the result
    /// metadata must flag.
    pub treated_dropped: Vec<u32>,
    pub mode: Mode,
}

impl Frame {
    pub fn n_treated(&self) -> usize {
        self.treated.len()
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn members(&self) -> impl Iterator<Item = (u32, bool)> + '_ {
        self.treated
            .iter()
            .map(|&u| (u, true))
            .chain(self.controls.iter().map(|&u| (u, false)))
    }
}

/// The full stacked design: admissible frames in deterministic key order
/// plus the audit trail of everything that was dropped.
#[derive(Debug, Clone)]
pub struct StackPlan {
    pub mode: Mode,
    pub window: EventWindow,
    /// History length for episode modes.
    pub lags: Option<u32>,
    pub onset_only: bool,
    pub frames: Vec<Frame>,
    pub dropped: Vec<(FrameKey, DropReason)>,
}

impl StackPlan {
    /// `(N^D_total, N^C_total)`: sums of per-frame treated and control counts.
    pub fn totals(&self) -> (usize, usize) {
        let t = self.frames.iter().map(Frame::n_treated).sum();
        let c = self.frames.iter().map(Frame::n_controls).sum();
        (t, c)
    }

    pub fn treated_share(&self, frame_idx: usize) -> f64 {
        let (total, _) = self.totals();
        self.frames[frame_idx].n_treated() as f64 / total as f64
    }

    /// True when any frame lost treated candidates to incomplete outcomes,
    /// changing the cohort shares of the estimand.
    pub fn treated_trimmed(&self) -> bool {
        self.frames.iter().any(|f| !f.treated_dropped.is_empty())
    }

    /// Re-checks every structural invariant against the source panel:
    /// disjoint membership, outcome completeness over the window, the
    /// clean-control rule (absorbing) and exact history match (episodes).
    pub fn audit(&self, panel: &PanelData) -> Result<()> {
        let adoption = match self.mode {
            Mode::Absorbing => Some(panel.adoption_times()?),
            _ => None,
        };
        for frame in &self.frames {
            for (unit, _) in frame.members() {
                for e in self.window.event_times() {
                    if panel.outcome_at(unit, frame.anchor + e).is_none() {
                        return Err(Error::Estimation(format!(
                            "audit: frame {} member {} missing outcome at e={e}",
                            frame.key,
                            panel.unit_id(unit)
                        )));
                    }
                }
            }
            if frame.treated.iter().any(|u| frame.controls.contains(u)) {
                return Err(Error::Estimation(format!(
                    "audit: frame {} has overlapping treated/control sets",
                    frame.key
                )));
            }
            match (&frame.key, &adoption) {
                (FrameKey::Cohort(a), Some(adoption)) => {
                    let horizon = *a + self.window.post() as i64;
                    for &u in &frame.controls {
                        if !adoption[u as usize].after(horizon) {
                            return Err(Error::Estimation(format!(
                                "audit: frame {} control {} adopts within the window",
                                frame.key,
                                panel.unit_id(u)
                            )));
                        }
                    }
                }
                (FrameKey::Episode { tau, history }, _) => {
                    let lags = self.lags.expect("episode plan has lags");
                    for (unit, _) in frame.members() {
                        let h = panel.treatment_history(unit, *tau, lags);
                        if h.as_deref() != Some(history.as_slice()) {
                            return Err(Error::Estimation(format!(
                                "audit: frame {} member {} history mismatch",
                                frame.key,
                                panel.unit_id(unit)
                            )));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// JSON diagnostic document: frame keys, member ids, counts, and drops.
    pub fn diagnostics(&self, panel: &PanelData) -> PlanDiagnostics {
        let frames = self
            .frames
            .iter()
            .map(|f| FrameDiagnostics {
                key: f.key.to_string(),
                anchor: f.anchor,
                n_treated: f.n_treated(),
                n_controls: f.n_controls(),
                treated: f.treated.iter().map(|&u| panel.unit_id(u).into()).collect(),
                controls: f
                    .controls
                    .iter()
                    .map(|&u| panel.unit_id(u).into())
                    .collect(),
                treated_dropped_incomplete: f
                    .treated_dropped
                    .iter()
                    .map(|&u| panel.unit_id(u).into())
                    .collect(),
            })
            .collect();
        let (n_treated_total, n_controls_total) = self.totals();
        PlanDiagnostics {
            mode: self.mode,
            window: self.window,
            lags: self.lags,
            onset_only: self.onset_only,
            n_treated_total,
            n_controls_total,
            frames,
            dropped: self
                .dropped
                .iter()
                .map(|(k, r)| DroppedDiagnostics {
                    key: k.to_string(),
                    reason: *r,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanDiagnostics {
    pub mode: Mode,
    pub window: EventWindow,
    pub lags: Option<u32>,
    pub onset_only: bool,
    pub n_treated_total: usize,
    pub n_controls_total: usize,
    pub frames: Vec<FrameDiagnostics>,
    pub dropped: Vec<DroppedDiagnostics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameDiagnostics {
    pub key: String,
    pub anchor: i64,
    pub n_treated: usize,
    pub n_controls: usize,
    pub treated: Vec<String>,
    pub controls: Vec<String>,
    pub treated_dropped_incomplete: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DroppedDiagnostics {
    pub key: String,
    pub reason: DropReason,
}

fn window_complete(panel: &PanelData, unit: u32, anchor: i64, window: &EventWindow) -> bool {
    window
        .event_times()
        .all(|e| panel.outcome_at(unit, anchor + e).is_some())
}

/// Build the absorbing-adoption stack: one frame per cohort with a full
/// in-range window, at least one complete treated unit, and at least one
/// clean control (`A_s > a + post`) with complete outcomes.
pub fn build_absorbing(panel: &PanelData, window: EventWindow) -> Result<StackPlan> {
    let adoption = panel.adoption_times()?;
    let (t_min, t_max) = panel.time_range();

    let mut cohorts: Vec<i64> = adoption
        .iter()
        .filter_map(|a| match a {
            Adoption::At(a) => Some(*a),
            Adoption::Never => None,
        })
        .collect();
    cohorts.sort_unstable();
    cohorts.dedup();

    let mut frames = Vec::new();
    let mut dropped = Vec::new();
    for a in cohorts {
        let key = FrameKey::Cohort(a);
        if a - (window.pre() as i64) < t_min || a + (window.post() as i64) > t_max {
            dropped.push((key, DropReason::WindowOutOfRange));
            continue;
        }

        let mut treated = Vec::new();
        let mut treated_dropped = Vec::new();
        let mut controls = Vec::new();
        let mut control_candidates = 0usize;
        for unit in 0..panel.n_units() as u32 {
            match adoption[unit as usize] {
                Adoption::At(b) if b == a => {
                    if window_complete(panel, unit, a, &window) {
                        treated.push(unit);
                    } else {
                        treated_dropped.push(unit);
                    }
                }
                ref adopt if adopt.after(a + window.post() as i64) => {
                    control_candidates += 1;
                    if window_complete(panel, unit, a, &window) {
                        controls.push(unit);
                    }
                }
                _ => {}
            }
        }

        if treated.is_empty() {
            dropped.push((key, DropReason::NoCompleteTreated));
        } else if control_candidates == 0 {
            dropped.push((key, DropReason::NoControls));
        } else if controls.is_empty() {
            dropped.push((key, DropReason::NoCompleteControls));
        } else {
            frames.push(Frame {
                key,
                anchor: a,
                treated,
                controls,
                treated_dropped,
                mode: Mode::Absorbing,
            });
        }
    }

    if frames.is_empty() {
        return Err(Error::EmptyStack(format!(
            "no admissible cohort for window (-{}, {}); dropped: [{}]",
            window.pre(),
            window.post(),
            format_dropped(&dropped)
        )));
    }
    Ok(StackPlan {
        mode: Mode::Absorbing,
        window,
        lags: None,
        onset_only: false,
        frames,
        dropped,
    })
}

/// Build the repeated-treatment stack: one frame per realized
/// `(switch time, history)` episode type with at least one complete treated
/// episode and one stable untreated control episode. `onset_only` relaxes
/// the treated stability requirement to onset alone (`D_{tau-1}=0, D_tau=1`),
/// allowing reversal inside the window.
pub fn build_episodes(
    panel: &PanelData,
    window: EventWindow,
    lags: u32,
    direction: Direction,
    onset_only: bool,
) -> Result<StackPlan> {
    if lags < 1 {
        return Err(Error::InvalidWindow(
            "episode designs require at least one history lag".into(),
        ));
    }
    let (working, mode) = match direction {
        Direction::SwitchOn => (panel.clone(), Mode::Episode01),
        Direction::SwitchOff => (panel.flip_treatment(), Mode::Episode10),
    };
    let (t_min, t_max) = working.time_range();
    let post = window.post() as i64;

    // Realized episode types keyed by (tau, history in the working coding):
    // (complete treated, incomplete treated, controls).
    type TypeEntry = (Vec<u32>, Vec<u32>, Vec<u32>);
    let mut types: BTreeMap<(i64, Vec<u8>), TypeEntry> = BTreeMap::new();

    let tau_lo = t_min + (window.pre() as i64).max(lags as i64);
    let tau_hi = t_max - post;
    for tau in tau_lo..=tau_hi {
        for unit in 0..working.n_units() as u32 {
            let Some(history) = working.treatment_history(unit, tau, lags) else {
                continue;
            };
            let is_onset = *history.last().expect("lags >= 1") == 0
                && working.treatment_at(unit, tau) == Some(1);
            if is_onset {
                let stable_on = onset_only
                    || (0..=post).all(|r| working.treatment_at(unit, tau + r) == Some(1));
                if !stable_on {
                    continue;
                }
                let entry = types.entry((tau, history)).or_default();
                if window_complete(&working, unit, tau, &window) {
                    entry.0.push(unit);
                } else {
                    entry.1.push(unit);
                }
            }
        }
    }

    // Stable untreated control episodes for each realized type.
    for ((tau, history), entry) in &mut types {
        for unit in 0..working.n_units() as u32 {
            let matches_history =
                working.treatment_history(unit, *tau, lags).as_deref() == Some(history.as_slice());
            if !matches_history {
                continue;
            }
            let stable_off = (0..=post).all(|r| working.treatment_at(unit, *tau + r) == Some(0));
            if stable_off && window_complete(&working, unit, *tau, &window) {
                entry.2.push(unit);
            }
        }
    }

    let restore_history = |h: &[u8]| -> Vec<u8> {
        match direction {
            Direction::SwitchOn => h.to_vec(),
            Direction::SwitchOff => h.iter().map(|d| 1 - d).collect(),
        }
    };

    let mut frames = Vec::new();
    let mut dropped = Vec::new();
    for ((tau, history), (treated, treated_dropped, controls)) in types {
        let key = FrameKey::Episode {
            tau,
            history: restore_history(&history),
        };
        if treated.is_empty() {
            dropped.push((key, DropReason::NoCompleteTreated));
        } else if controls.is_empty() {
            dropped.push((key, DropReason::NoControls));
        } else {
            frames.push(Frame {
                key,
                anchor: tau,
                treated,
                controls,
                treated_dropped,
                mode,
            });
        }
    }

    if frames.is_empty() {
        return Err(Error::EmptyStack(format!(
            "no admissible (tau, history) episode type for window (-{}, {}), L={lags}; \
             candidates: [{}]",
            window.pre(),
            window.post(),
            format_dropped(&dropped)
        )));
    }
    Ok(StackPlan {
        mode,
        window,
        lags: Some(lags),
        onset_only,
        frames,
        dropped,
    })
}

fn format_dropped(dropped: &[(FrameKey, DropReason)]) -> String {
    dropped
        .iter()
        .map(|(k, r)| format!("{k}: {r}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Change from the reference period: `Y_{anchor+e} - Y_{anchor-1}`, exactly
/// zero at `e = -1`. A missing outcome here means the frame was constructed
/// wrong, so it is an error rather than a missing value.
pub fn long_difference(panel: &PanelData, frame: &Frame, unit: u32, e: i64) -> Result<f64> {
    if e == -1 {
        return Ok(0.0);
    }
    let at = |t: i64| {
        panel.outcome_at(unit, t).ok_or_else(|| {
            Error::Estimation(format!(
                "frame {}: unit {} has no outcome at t={t} (frame invariant violated)",
                frame.key,
                panel.unit_id(unit)
            ))
        })
    };
    Ok(at(frame.anchor + e)? - at(frame.anchor - 1)?)
}
