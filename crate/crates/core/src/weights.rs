//! Corrective stacked weights.
//!
//! Design weights fix comparability inside a frame; they say nothing about
//! how frames aggregate. The corrective factor re-expresses each frame's
//! control mass as the frame's treated share of the total, so the pooled
//! contrast averages frame-level DIDs with treated-share weights (the
//! corrective-weighting logic of Wing, Freedman & Hollingsworth 2024,
//! extended to run on top of arbitrary nonnegative design weights).
//!
//! No normalization of the design weights is needed: rescaling a frame's
//! `b` by any positive constant multiplies every control's final weight by
//! one common factor and leaves all estimates unchanged.

use std::collections::BTreeMap;
use std::io::Write;

use crate::design::DesignWeights;
use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::stacking::StackPlan;

/// Effective control mass: per-frame sums of design weights and their total.
/// Replaces raw control counts in the corrective factor.
#[derive(Debug, Clone)]
pub struct EffectiveMass {
    pub per_frame: Vec<f64>,
    pub total: f64,
}

/// Sum the design weights per frame. Fails on a frame whose controls carry
/// no mass at all, which would make the corrective factor degenerate.
pub fn effective_mass(plan: &StackPlan, designs: &[DesignWeights]) -> Result<EffectiveMass> {
    check_alignment(plan, designs)?;
    let mut per_frame = Vec::with_capacity(plan.frames.len());
    for (frame, design) in plan.frames.iter().zip(designs) {
        let mass = design.mass();
        if !mass.is_finite() || mass <= 0.0 {
            return Err(Error::Degenerate {
                frame: frame.key.to_string(),
                reason: format!("effective control mass is {mass}; it must be positive and finite"),
            });
        }
        per_frame.push(mass);
    }
    let total = per_frame.iter().sum();
    Ok(EffectiveMass { per_frame, total })
}

fn check_alignment(plan: &StackPlan, designs: &[DesignWeights]) -> Result<()> {
    if plan.frames.len() != designs.len() {
        return Err(Error::Estimation(format!(
            "plan has {} frames but {} design-weight sets were supplied",
            plan.frames.len(),
            designs.len()
        )));
    }
    for (frame, design) in plan.frames.iter().zip(designs) {
        if frame.key.to_string() != design.frame_key {
            return Err(Error::Estimation(format!(
                "design weights for frame {} paired with frame {}",
                design.frame_key, frame.key
            )));
        }
        for unit in design.b.keys() {
            if !frame.controls.contains(unit) {
                return Err(Error::Estimation(format!(
                    "design weights for frame {} reference non-control unit index {unit}",
                    frame.key
                )));
            }
        }
    }
    Ok(())
}

/// Final per-observation weights: treated units exactly 1; controls
/// `b * (treated share) / (effective-mass share)`. Zero-`b` controls are
/// kept with weight zero so diagnostics can count them.
#[derive(Debug, Clone)]
pub struct FinalWeights {
    /// Per frame: control unit -> (design weight, final weight).
    pub controls: Vec<BTreeMap<u32, (f64, f64)>>,
}

impl FinalWeights {
    /// Final weight of a member (1 for treated, the corrective product for
    /// controls).
    pub fn weight(&self, frame_idx: usize, unit: u32, treated: bool) -> f64 {
        if treated {
            1.0
        } else {
            self.controls[frame_idx]
                .get(&unit)
                .map(|&(_, w)| w)
                .unwrap_or(0.0)
        }
    }

    /// Sum of control weights in a frame (the mass-identity quantity).
    pub fn control_mass(&self, frame_idx: usize) -> f64 {
        self.controls[frame_idx].values().map(|&(_, w)| w).sum()
    }

    /// Audit export: one row per (frame, member) with role, design weight
    /// and final weight.
    pub fn write_csv<W: Write>(
        &self,
        writer: W,
        plan: &StackPlan,
        panel: &PanelData,
    ) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["frame", "unit", "role", "b", "weight"])?;
        for (idx, frame) in plan.frames.iter().enumerate() {
            for &unit in &frame.treated {
                w.write_record(&[
                    frame.key.to_string(),
                    panel.unit_id(unit).to_string(),
                    "treated".to_string(),
                    String::new(),
                    "1".to_string(),
                ])?;
            }
            for (&unit, &(b, weight)) in &self.controls[idx] {
                w.write_record(&[
                    frame.key.to_string(),
                    panel.unit_id(unit).to_string(),
                    "control".to_string(),
                    format!("{b}"),
                    format!("{weight}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Compose design weights with the corrective stacked factor.
pub fn corrective_weights(
    plan: &StackPlan,
    designs: &[DesignWeights],
    mass: &EffectiveMass,
) -> Result<FinalWeights> {
    check_alignment(plan, designs)?;
    let (n_treated_total, _) = plan.totals();
    let mut controls = Vec::with_capacity(plan.frames.len());
    for (idx, (frame, design)) in plan.frames.iter().zip(designs).enumerate() {
        let treated_share = frame.n_treated() as f64 / n_treated_total as f64;
        let mass_share = mass.per_frame[idx] / mass.total;
        let factor = treated_share / mass_share;
        let mut frame_controls = BTreeMap::new();
        for &unit in &frame.controls {
            let b = design.b.get(&unit).copied().unwrap_or(0.0);
            frame_controls.insert(unit, (b, b * factor));
        }
        controls.push(frame_controls);
    }
    Ok(FinalWeights { controls })
}
