//! Trajectories, censoring marks, hyperparameters and fitted-model summaries.

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::NIGParams;

/// How a (individual, condition) entry was observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CensorMark {
    /// Exact record: present with onset in (ρ, τ], or absent in someone who has died.
    Observed,
    /// Present, onset known only to precede baseline (t is stored as ρ).
    Unreliable,
    /// Not observed by τ in a living individual (t is stored as τ).
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Presence {
    Present,
    Absent,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VitalStatus {
    Alive,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SexSpecific {
    MaleOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionMeta {
    pub code: String,
    pub name: String,
    pub sex_specific: Option<SexSpecific>,
    pub lifelong: bool,
}

impl ConditionMeta {
    pub fn plain(code: impl Into<String>) -> Self {
        let code = code.into();
        Self {
            name: code.clone(),
            code,
            sex_specific: None,
            lifelong: false,
        }
    }

    /// Whether the condition cannot occur for this sex.
    pub fn excluded_for(&self, sex: Option<Sex>) -> bool {
        matches!((self.sex_specific, sex), (Some(SexSpecific::MaleOnly), Some(Sex::Female)))
    }

    /// Whether an unrecorded instance is known absent (rather than unknown)
    /// for someone of this sex observed up to `age`.
    pub fn absence_is_certain(&self, sex: Option<Sex>, age: f64) -> bool {
        self.excluded_for(sex) || (self.lifelong && age > 0.0)
    }
}

/// One individual's record over the M conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub sex: Option<Sex>,
    /// Baseline age ρ.
    pub rho: f64,
    /// Extraction (or death) age τ.
    pub tau: f64,
    pub vital: VitalStatus,
    pub d: Vec<Presence>,
    pub t: Vec<Option<f64>>,
    pub kappa: Vec<CensorMark>,
}

impl Trajectory {
    /// All conditions start Incomplete/unknown (alive) or Observed-absent (dead).
    pub fn blank(id: impl Into<String>, sex: Option<Sex>, rho: f64, tau: f64, vital: VitalStatus, m: usize) -> Self {
        let (d, t, kappa) = match vital {
            VitalStatus::Alive => (Presence::Unknown, Some(tau), CensorMark::Incomplete),
            VitalStatus::Dead => (Presence::Absent, None, CensorMark::Observed),
        };
        Self {
            id: id.into(),
            sex,
            rho,
            tau,
            vital,
            d: vec![d; m],
            t: vec![t; m],
            kappa: vec![kappa; m],
        }
    }

    pub fn m(&self) -> usize {
        self.kappa.len()
    }

    pub fn set_observed_present(&mut self, m: usize, onset: f64) {
        self.d[m] = Presence::Present;
        self.t[m] = Some(onset);
        self.kappa[m] = CensorMark::Observed;
    }

    pub fn set_unreliable(&mut self, m: usize) {
        self.d[m] = Presence::Present;
        self.t[m] = Some(self.rho);
        self.kappa[m] = CensorMark::Unreliable;
    }

    pub fn set_observed_absent(&mut self, m: usize) {
        self.d[m] = Presence::Absent;
        self.t[m] = None;
        self.kappa[m] = CensorMark::Observed;
    }

    pub fn set_incomplete(&mut self, m: usize) {
        self.d[m] = Presence::Unknown;
        self.t[m] = Some(self.tau);
        self.kappa[m] = CensorMark::Incomplete;
    }

    /// Record a diagnosis at `age`, applying the four-case censor assignment.
    pub fn record_diagnosis(&mut self, m: usize, age: f64) {
        if age <= self.rho {
            self.set_unreliable(m);
        } else {
            self.set_observed_present(m, age);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub conditions: Vec<ConditionMeta>,
    pub individuals: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(conditions: Vec<ConditionMeta>, individuals: Vec<Trajectory>) -> Self {
        Self { conditions, individuals }
    }

    pub fn n(&self) -> usize {
        self.individuals.len()
    }

    pub fn m(&self) -> usize {
        self.conditions.len()
    }

    pub fn condition_index(&self, code: &str) -> Option<usize> {
        self.conditions.iter().position(|c| c.code == code)
    }

    /// Mean number of present conditions (Observed-present or Unreliable).
    pub fn mean_present(&self) -> f64 {
        if self.individuals.is_empty() {
            return 0.0;
        }
        let total: usize = self
            .individuals
            .iter()
            .map(|tr| tr.d.iter().filter(|d| **d == Presence::Present).count())
            .sum();
        total as f64 / self.n() as f64
    }
}

/// Which structural rule an entry breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    LengthMismatch,
    DuplicateId,
    DuplicateCode,
    AgeOrder,
    ObservedPresentOutsideWindow,
    ObservedAbsentWhileAlive,
    ObservedAbsentHasOnset,
    ObservedUnknownPresence,
    UnreliableNotPresent,
    UnreliableOnsetNotBaseline,
    IncompleteWhileDead,
    IncompleteNotUnknown,
    IncompleteOnsetNotExtraction,
    SexExcludedNotAbsent,
    LifelongIncomplete,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::LengthMismatch => "vectors d, t, kappa must have length M",
            Rule::DuplicateId => "individual ids must be unique",
            Rule::DuplicateCode => "condition codes must be unique",
            Rule::AgeOrder => "requires 0 <= baseline <= extraction age",
            Rule::ObservedPresentOutsideWindow => {
                "case (1): observed diagnosis must satisfy baseline < t <= extraction"
            }
            Rule::ObservedAbsentWhileAlive => {
                "case (2): an observed absence requires the individual to be dead"
            }
            Rule::ObservedAbsentHasOnset => "case (2): an observed absence carries no onset age",
            Rule::ObservedUnknownPresence => "observed entries must be present or absent",
            Rule::UnreliableNotPresent => "case (3): unreliable entries must be present",
            Rule::UnreliableOnsetNotBaseline => "case (3): unreliable entries must have t = baseline",
            Rule::IncompleteWhileDead => "case (4): incomplete entries require the individual alive",
            Rule::IncompleteNotUnknown => "case (4): incomplete entries must have unknown presence",
            Rule::IncompleteOnsetNotExtraction => "case (4): incomplete entries must have t = extraction age",
            Rule::SexExcludedNotAbsent => "sex-specific condition must be observed-absent for the other sex",
            Rule::LifelongIncomplete => "lifelong condition is fully observed after age zero",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub individual: String,
    pub condition: Option<String>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.condition {
            Some(c) => write!(f, "individual {} condition {}: {}", self.individual, c, self.rule),
            None => write!(f, "individual {}: {}", self.individual, self.rule),
        }
    }
}

/// Check every trajectory against the censoring rules.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = ds.m();
    let mut codes = HashSet::new();
    for c in &ds.conditions {
        if !codes.insert(c.code.as_str()) {
            out.push(Violation {
                individual: String::new(),
                condition: Some(c.code.clone()),
                rule: Rule::DuplicateCode,
            });
        }
    }
    let mut ids = HashSet::new();
    for tr in &ds.individuals {
        let mut push = |cond: Option<usize>, rule: Rule| {
            out.push(Violation {
                individual: tr.id.clone(),
                condition: cond.map(|j| ds.conditions[j].code.clone()),
                rule,
            })
        };
        if !ids.insert(tr.id.as_str()) {
            push(None, Rule::DuplicateId);
        }
        if tr.d.len() != m || tr.t.len() != m || tr.kappa.len() != m {
            push(None, Rule::LengthMismatch);
            continue;
        }
        if !(tr.rho >= 0.0 && tr.rho <= tr.tau && tr.tau.is_finite()) {
            push(None, Rule::AgeOrder);
        }
        let alive = tr.vital == VitalStatus::Alive;
        for j in 0..m {
            let meta = &ds.conditions[j];
            let (d, t, kappa) = (tr.d[j], tr.t[j], tr.kappa[j]);
            let certain_absent = meta.absence_is_certain(tr.sex, tr.tau);
            if meta.excluded_for(tr.sex) && !(kappa == CensorMark::Observed && d == Presence::Absent) {
                push(Some(j), Rule::SexExcludedNotAbsent);
                continue;
            }
            match kappa {
                CensorMark::Observed => match d {
                    Presence::Present => match t {
                        Some(t) if tr.rho < t && t <= tr.tau => {}
                        _ => push(Some(j), Rule::ObservedPresentOutsideWindow),
                    },
                    Presence::Absent => {
                        if alive && !certain_absent {
                            push(Some(j), Rule::ObservedAbsentWhileAlive);
                        }
                        if t.is_some() {
                            push(Some(j), Rule::ObservedAbsentHasOnset);
                        }
                    }
                    Presence::Unknown => push(Some(j), Rule::ObservedUnknownPresence),
                },
                CensorMark::Unreliable => {
                    if d != Presence::Present {
                        push(Some(j), Rule::UnreliableNotPresent);
                    }
                    if t != Some(tr.rho) {
                        push(Some(j), Rule::UnreliableOnsetNotBaseline);
                    }
                }
                CensorMark::Incomplete => {
                    if !alive {
                        push(Some(j), Rule::IncompleteWhileDead);
                    }
                    if d != Presence::Unknown {
                        push(Some(j), Rule::IncompleteNotUnknown);
                    }
                    if t != Some(tr.tau) {
                        push(Some(j), Rule::IncompleteOnsetNotExtraction);
                    }
                    if meta.lifelong && tr.tau > 0.0 {
                        push(Some(j), Rule::LifelongIncomplete);
                    }
                }
            }
        }
    }
    out
}

/// Fail with the first violation if the dataset is not well formed.
pub fn ensure_valid(ds: &Dataset) -> Result<()> {
    let v = validate_dataset(ds);
    match v.first() {
        None => Ok(()),
        Some(first) => Err(Error::Validation(v.len(), first.to_string())),
    }
}

/// Prior hyperparameters: Dirichlet θ (K), Beta (a, b) and NIG, each M×K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub theta: Vec<f64>,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub nig: Array2<NIGParams>,
}

impl Hyperparameters {
    /// Same prior for every (condition, cluster) pair.
    pub fn uniform(m: usize, k: usize, theta: f64, a: f64, b: f64, nig: NIGParams) -> Result<Self> {
        let h = Self {
            theta: vec![theta; k],
            a: Array2::from_elem((m, k), a),
            b: Array2::from_elem((m, k), b),
            nig: Array2::from_elem((m, k), nig),
        };
        h.validate()?;
        Ok(h)
    }

    /// Dirichlet(1), Beta(1, 1), NIG(50, 0.3, 5, 750): weakly informative
    /// priors for onset ages measured in years.
    pub fn weakly_informative(m: usize, k: usize) -> Self {
        Self::uniform(m, k, 1.0, 1.0, 1.0, NIGParams { u: 50.0, v: 0.3, alpha: 5.0, beta: 750.0 })
            .expect("default prior is valid")
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::Domain("need at least one cluster".into()));
        }
        let m = self.m();
        for shape in [self.a.dim(), self.b.dim(), self.nig.dim()] {
            if shape != (m, k) {
                return Err(Error::DimensionMismatch(format!(
                    "hyperparameter matrices must be {m}x{k}, found {shape:?}"
                )));
            }
        }
        let positive = |x: &f64| *x > 0.0 && x.is_finite();
        if !self.theta.iter().all(positive) || !self.a.iter().all(positive) || !self.b.iter().all(positive) {
            return Err(Error::Domain("Dirichlet and Beta hyperparameters must be > 0".into()));
        }
        for p in self.nig.iter() {
            p.validate()?;
        }
        Ok(())
    }

    /// Reorder clusters: new cluster `j` takes old cluster `perm[j]`.
    pub fn permute_clusters(&self, perm: &[usize]) -> Self {
        Self {
            theta: perm.iter().map(|&j| self.theta[j]).collect(),
            a: self.a.select(Axis(1), perm),
            b: self.b.select(Axis(1), perm),
            nig: self.nig.select(Axis(1), perm),
        }
    }
}

/// Fit bookkeeping carried with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
    pub seed: u64,
    pub epsilon: f64,
    pub hyperparameters: Hyperparameters,
}

/// Posterior summary sufficient for forecasting.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub conditions: Vec<ConditionMeta>,
    pub theta_star: Vec<f64>,
    pub a_star: Array2<f64>,
    pub b_star: Array2<f64>,
    pub nig_star: Array2<NIGParams>,
    pub theta_bar: Vec<f64>,
    pub pi_bar: Array2<f64>,
    pub fit_meta: FitMeta,
}

impl FittedModel {
    /// Derive θ̄ = θ*/Σθ* and π̄ = a*/(a*+b*) from the variational parameters.
    pub fn from_posterior(
        conditions: Vec<ConditionMeta>,
        theta_star: Vec<f64>,
        a_star: Array2<f64>,
        b_star: Array2<f64>,
        nig_star: Array2<NIGParams>,
        fit_meta: FitMeta,
    ) -> Result<Self> {
        let k = theta_star.len();
        let m = conditions.len();
        if a_star.dim() != (m, k) || b_star.dim() != (m, k) || nig_star.dim() != (m, k) {
            return Err(Error::DimensionMismatch(format!(
                "posterior matrices must be {m}x{k}"
            )));
        }
        let total: f64 = theta_star.iter().sum();
        let theta_bar = theta_star.iter().map(|t| t / total).collect();
        let pi_bar = ndarray::Zip::from(&a_star)
            .and(&b_star)
            .map_collect(|a, b| a / (a + b));
        Ok(Self {
            conditions,
            theta_star,
            a_star,
            b_star,
            nig_star,
            theta_bar,
            pi_bar,
            fit_meta,
        })
    }

    pub fn k(&self) -> usize {
        self.theta_bar.len()
    }

    pub fn m(&self) -> usize {
        self.conditions.len()
    }

    pub fn condition_index(&self, code: &str) -> Option<usize> {
        self.conditions.iter().position(|c| c.code == code)
    }

    /// Predictive onset mean and standard deviation for (m, k); the sd is
    /// infinite when 2α* ≤ 2.
    pub fn onset_summary(&self, m: usize, k: usize) -> (f64, f64) {
        let p = self.nig_star[[m, k]];
        let t = p.predictive();
        let sd = if t.df > 2.0 {
            t.scale * (t.df / (t.df - 2.0)).sqrt()
        } else {
            f64::INFINITY
        };
        (p.u, sd)
    }

    /// Predictive mass below age zero per (m, k), reported rather than renormalized.
    pub fn subzero_mass(&self) -> Array2<f64> {
        self.nig_star.mapv(|p| p.predictive_cdf(0.0))
    }
}
