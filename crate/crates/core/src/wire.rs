//! JSON bodies shared by the `predict` command and the HTTP service.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::forecast::{age_grid, ConditionStatus, Forecaster, PartialTrajectory};
use crate::model::{ConditionMeta, FittedModel, Sex};

pub const WIRE_SCHEMA_VERSION: &str = "1";
pub const DEFAULT_GRID_STEP: f64 = 1.0;
/// Cap on curve length so a tiny grid step cannot blow up a response.
pub const MAX_GRID_POINTS: usize = 20_000;

/// Lower-case hex SHA-256 of a byte string (used to identify model files).
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservedEntry {
    pub code: String,
    pub age: f64,
}

/// A forecasting request: one person's history up to `current_age`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
    pub baseline_age: f64,
    pub current_age: f64,
    #[serde(default)]
    pub observed: Vec<ObservedEntry>,
    #[serde(default)]
    pub unreliable: Vec<String>,
    #[serde(default)]
    pub absent: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryError {
    /// Invariant violations, one per offending field.
    Invalid(Vec<FieldError>),
    /// Codes the model does not know.
    UnknownCodes(Vec<String>),
}

impl std::fmt::Display for QueryError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QueryError::Invalid(errs) => {
                let parts: Vec<String> = errs.iter().map(|e| format!("{}: {}", e.field, e.message)).collect();
                write!(f, "invalid query: {}", parts.join("; "))
            }
            QueryError::UnknownCodes(codes) => write!(f, "unknown condition codes: {}", codes.join(", ")),
        }
    }
}

impl std::error::Error for QueryError {}

/// Error body of every non-2xx service response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unknown_codes: Vec<String>,
}

impl From<&QueryError> for ErrorBody {
    fn from(e: &QueryError) -> Self {
        match e {
            QueryError::Invalid(fields) => ErrorBody {
                error: "invalid_query".into(),
                message: e.to_string(),
                fields: fields.clone(),
                unknown_codes: Vec::new(),
            },
            QueryError::UnknownCodes(codes) => ErrorBody {
                error: "unknown_condition".into(),
                message: e.to_string(),
                fields: Vec::new(),
                unknown_codes: codes.clone(),
            },
        }
    }
}

/// Resolved query ready for the forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedQuery {
    pub history: PartialTrajectory,
    pub horizon: Option<f64>,
    pub grid_step: f64,
}

impl PatientQuery {
    /// Resolve codes against `model` and check every invariant.
    pub fn resolve(&self, model: &FittedModel) -> Result<ResolvedQuery, QueryError> {
        let unknown: Vec<String> = self
            .observed
            .iter()
            .map(|o| &o.code)
            .chain(&self.unreliable)
            .chain(&self.absent)
            .filter(|c| model.condition_index(c).is_none())
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(QueryError::UnknownCodes(unknown));
        }

        let mut errs = Vec::new();
        let mut bad = |field: String, message: String| errs.push(FieldError { field, message });
        if let Some(v) = &self.schema_version {
            if v != WIRE_SCHEMA_VERSION {
                bad("schema_version".into(), format!("unsupported version {v:?}; expected {WIRE_SCHEMA_VERSION:?}"));
            }
        }
        let ages_ok = self.baseline_age.is_finite() && self.current_age.is_finite();
        if !(self.baseline_age.is_finite() && self.baseline_age >= 0.0) {
            bad("baseline_age".into(), "must be a finite number >= 0".into());
        }
        if !(self.current_age.is_finite() && self.current_age >= 0.0) {
            bad("current_age".into(), "must be a finite number >= 0".into());
        } else if ages_ok && self.current_age < self.baseline_age {
            bad(
                "current_age".into(),
                format!("current age {} is before baseline age {}", self.current_age, self.baseline_age),
            );
        }
        let mut seen = HashSet::new();
        let mut check_code = |field: String, code: &str, bad: &mut dyn FnMut(String, String)| {
            if !seen.insert(code.to_string()) {
                bad(field.clone(), format!("condition {code} is listed more than once"));
            }
            let meta = &model.conditions[model.condition_index(code).expect("checked above")];
            if meta.excluded_for(self.sex) {
                bad(field, format!("condition {code} does not apply to sex {:?}", self.sex.expect("excluded needs sex")));
            }
        };
        for (i, o) in self.observed.iter().enumerate() {
            check_code(format!("observed[{i}].code"), &o.code, &mut bad);
            let field = format!("observed[{i}].age");
            if !o.age.is_finite() {
                bad(field, "must be a finite number".into());
            } else if ages_ok && o.age <= self.baseline_age {
                bad(
                    field,
                    format!(
                        "diagnosis age {} is not after baseline age {}; list {} under unreliable",
                        o.age, self.baseline_age, o.code
                    ),
                );
            } else if ages_ok && o.age > self.current_age {
                bad(field, format!("diagnosis age {} is after current age {}", o.age, self.current_age));
            }
        }
        for (i, c) in self.unreliable.iter().enumerate() {
            check_code(format!("unreliable[{i}]"), c, &mut bad);
        }
        for (i, c) in self.absent.iter().enumerate() {
            check_code(format!("absent[{i}]"), c, &mut bad);
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0) {
                bad("horizon".into(), "must be > 0".into());
            }
        }
        let grid_step = self.grid_step.unwrap_or(DEFAULT_GRID_STEP);
        if !(grid_step > 0.0 && grid_step.is_finite()) {
            bad("grid_step".into(), "must be a finite number > 0".into());
        } else if self.current_age.is_finite() {
            let points = ((crate::forecast::MAX_AGE - self.current_age).max(0.0) / grid_step).ceil() + 1.0;
            if points > MAX_GRID_POINTS as f64 {
                bad("grid_step".into(), format!("grid would have more than {MAX_GRID_POINTS} points"));
            }
        }
        if !errs.is_empty() {
            return Err(QueryError::Invalid(errs));
        }

        let index = |c: &str| model.condition_index(c).expect("checked above");
        let history = PartialTrajectory {
            observed: self.observed.iter().map(|o| (index(&o.code), o.age)).collect(),
            unreliable: self.unreliable.iter().map(|c| index(c)).collect(),
            absent: self.absent.iter().map(|c| index(c)).collect(),
            rho_prime: self.baseline_age,
            tau_prime: self.current_age,
            sex: self.sex,
        };
        Ok(ResolvedQuery { history, horizon: self.horizon, grid_step })
    }
}

/// Cumulative risk as parallel arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub age: Vec<f64>,
    pub risk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionForecast {
    pub code: String,
    pub name: String,
    pub status: ConditionStatus,
    pub total_future_risk: f64,
    pub population_risk: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob_within: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_onset: Option<f64>,
    pub curve: Curve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResponse {
    pub schema_version: String,
    pub model_sha256: String,
    pub baseline_age: f64,
    pub current_age: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub grid_step: f64,
    pub cluster_probs: Vec<f64>,
    pub conditions: Vec<ConditionForecast>,
}

/// Answer a query; the single code path behind both CLI and service.
pub fn forecast(model: &FittedModel, model_sha256: &str, query: &PatientQuery) -> Result<ForecastResponse, ForecastError> {
    let r = query.resolve(model).map_err(ForecastError::Query)?;
    let f = Forecaster::new(model);
    let grid = age_grid(r.history.tau_prime, r.grid_step).map_err(ForecastError::Model)?;
    let profile = f.profile(&r.history, r.horizon, &grid).map_err(ForecastError::Model)?;
    let conditions = profile
        .conditions
        .into_iter()
        .zip(&model.conditions)
        .map(|(c, meta)| ConditionForecast {
            code: c.code,
            name: meta.name.clone(),
            status: c.status,
            total_future_risk: c.total_future_risk,
            population_risk: c.population_risk,
            prob_within: c.prob_within,
            map_onset: c.map_onset,
            curve: Curve { age: c.curve_ages, risk: c.curve_risk },
        })
        .collect();
    Ok(ForecastResponse {
        schema_version: WIRE_SCHEMA_VERSION.into(),
        model_sha256: model_sha256.into(),
        baseline_age: query.baseline_age,
        current_age: query.current_age,
        horizon: r.horizon,
        grid_step: r.grid_step,
        cluster_probs: profile.cluster_probs,
        conditions,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error("{0}")]
    Query(QueryError),
    #[error(transparent)]
    Model(Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
    pub seed: u64,
    pub epsilon: f64,
}

/// Per-(condition, cluster) quantities; matrices are indexed [condition][cluster].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub schema_version: String,
    pub model_sha256: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub conditions: Vec<ConditionMeta>,
    pub theta_bar: Vec<f64>,
    pub pi_bar: Vec<Vec<f64>>,
    pub onset_mean: Vec<Vec<f64>>,
    /// Predictive standard deviation; null where it is infinite.
    pub onset_sd: Vec<Vec<Option<f64>>>,
    pub fit: FitSummary,
}

impl ModelSummary {
    pub fn new(model: &FittedModel, model_sha256: &str) -> Self {
        let (m, k) = (model.m(), model.k());
        let mut onset_mean = vec![vec![0.0; k]; m];
        let mut onset_sd = vec![vec![None; k]; m];
        for i in 0..m {
            for j in 0..k {
                let (mean, sd) = model.onset_summary(i, j);
                onset_mean[i][j] = mean;
                onset_sd[i][j] = sd.is_finite().then_some(sd);
            }
        }
        let f = &model.fit_meta;
        Self {
            schema_version: WIRE_SCHEMA_VERSION.into(),
            model_sha256: model_sha256.into(),
            k,
            m,
            conditions: model.conditions.clone(),
            theta_bar: model.theta_bar.clone(),
            pi_bar: model.pi_bar.rows().into_iter().map(|r| r.to_vec()).collect(),
            onset_mean,
            onset_sd,
            fit: FitSummary {
                iterations: f.iterations,
                final_delta: f.final_delta,
                converged: f.converged,
                seed: f.seed,
                epsilon: f.epsilon,
            },
        }
    }
}
