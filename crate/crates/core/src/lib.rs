//! Design-weighted stacked difference-in-differences.
//!
//! The estimator separates two jobs that are usually conflated. Inside each
//! stacked subexperiment (an adoption cohort, or an episode type in
//! repeated-treatment designs), nonnegative design weights from
//! nearest-neighbor matching or entropy balancing make the control pool
//! comparable to the treated units. Across subexperiments, corrective
//! stacked weights re-aggregate the control side with the treated-cohort
//! shares, so the pooled contrast targets the treated-share-weighted
//! average of cohort effects instead of a distorted mixture of trends.
//! With uniform design weights the estimator reduces to weighted stacked
//! DID; with a single frame it is the plain difference-in-means DID.
//!
//! Pipeline: [`panel`] ingests and validates long panel data; [`stacking`]
//! builds frames under clean-control and trimming rules; [`design`] solves
//! per-frame weights; [`weights`] composes the corrective factors;
//! [`estimator`] produces event-study estimates with cluster-robust or
//! bootstrap inference; [`simulate`] provides a data-generating process and
//! Monte Carlo harness for validating the whole chain.

pub mod design;
pub mod error;
pub mod estimator;
pub mod panel;
pub mod simulate;
pub mod stacking;
pub mod weights;

pub use design::{
    balance_table, build_design_matrix, entropy_balance, nn_match, BalanceTable, CovariateSpec,
    DesignMatrix, DesignMethod, DesignWeights, DistanceKind, EbalOptions, NnOptions, OnFailure,
    TreatedMissingPolicy,
};
pub use error::{Error, Result};
pub use estimator::{
    cluster_bootstrap, cluster_robust_vcov, estimate_direct, estimate_regression, event_study,
    stack_sample, BootstrapOptions, ClusterLevel, EstimateOptions, EventStudyResult, Inference,
    StackedSample,
};
pub use panel::{load_panel, load_panel_path, Adoption, PanelBuilder, PanelData, PanelSchema};
pub use stacking::{
    build_absorbing, build_episodes, long_difference, Direction, EventWindow, Frame, FrameKey,
    Mode, StackPlan,
};
pub use weights::{corrective_weights, effective_mass, EffectiveMass, FinalWeights};
