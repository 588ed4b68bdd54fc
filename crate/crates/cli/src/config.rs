//! Run configuration: a single JSON document overridable by CLI flags.
//! The effective merged config is echoed into every output manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stackdid::design::{CovariateSpec, DistanceKind, EbalOptions, NnOptions, OnFailure};
use stackdid::estimator::{BootstrapOptions, ClusterLevel, EstimateOptions, Inference};
use stackdid::panel::PanelSchema;
use stackdid::stacking::{Direction, EventWindow};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// absorbing | episode01 | episode10
    pub mode: String,
    pub kappa_pre: u32,
    pub kappa_post: u32,
    /// History lags (episode modes).
    pub lags: Option<u32>,
    pub onset_only: bool,

    /// uniform | match | ebalance
    pub design: String,
    pub ratio: usize,
    pub replace: bool,
    /// mahalanobis | rank-mahalanobis
    pub distance: String,
    pub caliper: Option<f64>,
    pub ridge: f64,
    pub balance_tol: f64,
    pub balance_max_iter: usize,
    /// error | uniform
    pub on_failure: String,

    pub outcome_lags: Vec<u32>,
    pub covariate_lags: BTreeMap<String, Vec<u32>>,
    pub exact: Vec<String>,
    pub log: Vec<String>,

    /// analytic | bootstrap | none
    pub se: String,
    pub bootstrap: usize,
    /// unit | frame-unit
    pub cluster: String,
    pub seed: u64,
    /// Worker cap. Never serialized into manifests: results are identical
    /// at any cap, and echoing it would break byte-reproducibility across
    /// `--threads` settings.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,

    pub data: Option<PathBuf>,
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    /// "," or "tab"
    pub sep: String,

    pub out: Option<PathBuf>,
    pub plot: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: "absorbing".into(),
            kappa_pre: 3,
            kappa_post: 2,
            lags: None,
            onset_only: false,
            design: "uniform".into(),
            ratio: 1,
            replace: true,
            distance: "mahalanobis".into(),
            caliper: None,
            ridge: 1e-8,
            balance_tol: 1e-8,
            balance_max_iter: 200,
            on_failure: "error".into(),
            outcome_lags: vec![],
            covariate_lags: BTreeMap::new(),
            exact: vec![],
            log: vec![],
            se: "analytic".into(),
            bootstrap: 999,
            cluster: "unit".into(),
            seed: 0,
            threads: None,
            data: None,
            unit: "unit".into(),
            time: "time".into(),
            outcome: "outcome".into(),
            treatment: "treatment".into(),
            covariates: vec![],
            sep: ",".into(),
            out: None,
            plot: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))
    }

    pub fn schema(&self) -> Result<PanelSchema, CliError> {
        let delimiter = match self.sep.as_str() {
            "," => b',',
            "tab" | "\t" => b'\t',
            other => {
                return Err(CliError::Input(format!(
                    "unsupported separator `{other}` (use `,` or `tab`)"
                )));
            }
        };
        Ok(PanelSchema {
            unit: self.unit.clone(),
            time: self.time.clone(),
            outcome: self.outcome.clone(),
            treatment: self.treatment.clone(),
            covariates: self.covariates.clone(),
            delimiter,
        })
    }

    pub fn window(&self) -> Result<EventWindow, CliError> {
        EventWindow::new(self.kappa_pre, self.kappa_post).map_err(CliError::from_input)
    }

    pub fn direction(&self) -> Result<Option<Direction>, CliError> {
        match self.mode.as_str() {
            "absorbing" => Ok(None),
            "episode01" => Ok(Some(Direction::SwitchOn)),
            "episode10" => Ok(Some(Direction::SwitchOff)),
            other => Err(CliError::Input(format!(
                "unknown mode `{other}` (absorbing | episode01 | episode10)"
            ))),
        }
    }

    pub fn covariate_spec(&self) -> CovariateSpec {
        CovariateSpec {
            outcome_lags: self.outcome_lags.clone(),
            covariate_lags: self.covariate_lags.clone(),
            exact: self.exact.clone(),
            log: self.log.clone(),
        }
    }

    pub fn nn_options(&self) -> Result<NnOptions, CliError> {
        let distance = match self.distance.as_str() {
            "mahalanobis" => DistanceKind::Mahalanobis,
            "rank-mahalanobis" => DistanceKind::RankMahalanobis,
            other => {
                return Err(CliError::Input(format!(
                    "unknown distance `{other}` (mahalanobis | rank-mahalanobis)"
                )));
            }
        };
        Ok(NnOptions {
            ratio: self.ratio,
            replacement: self.replace,
            distance,
            caliper: self.caliper,
            ridge: self.ridge,
        })
    }

    pub fn ebal_options(&self) -> Result<EbalOptions, CliError> {
        let on_failure = match self.on_failure.as_str() {
            "error" => OnFailure::Error,
            "uniform" => OnFailure::FallbackUniform,
            other => {
                return Err(CliError::Input(format!(
                    "unknown on-failure policy `{other}` (error | uniform)"
                )));
            }
        };
        Ok(EbalOptions {
            tolerance: self.balance_tol,
            max_iter: self.balance_max_iter,
            on_failure,
        })
    }

    pub fn estimate_options(&self) -> Result<EstimateOptions, CliError> {
        let cluster = match self.cluster.as_str() {
            "unit" => ClusterLevel::Unit,
            "frame-unit" => ClusterLevel::FrameUnit,
            other => {
                return Err(CliError::Input(format!(
                    "unknown cluster level `{other}` (unit | frame-unit)"
                )));
            }
        };
        let inference = match self.se.as_str() {
            "analytic" => Inference::Analytic,
            "none" => Inference::None,
            "bootstrap" => Inference::Bootstrap(BootstrapOptions {
                replicates: self.bootstrap,
                seed: self.seed,
                level: 0.95,
            }),
            other => {
                return Err(CliError::Input(format!(
                    "unknown inference `{other}` (analytic | bootstrap | none)"
                )));
            }
        };
        Ok(EstimateOptions { cluster, inference })
    }
}
