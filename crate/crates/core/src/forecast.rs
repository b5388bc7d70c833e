//! Predictive posterior for new, partially observed individuals.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FittedModel, Sex};
use crate::special::StudentT;

/// Oldest age on reported curves.
pub const MAX_AGE: f64 = 110.0;

const MAP_GRID_STEP: f64 = 0.1;
const MAP_MAX_AGE: f64 = 150.0;

/// History of a query individual up to `tau_prime`. Conditions not listed
/// anywhere are treated as not yet observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialTrajectory {
    /// (condition index, diagnosis age) with ρ′ < age ≤ τ′.
    pub observed: Vec<(usize, f64)>,
    /// Conditions diagnosed at or before ρ′.
    pub unreliable: Vec<usize>,
    /// Conditions known not to occur (e.g. the individual has died).
    #[serde(default)]
    pub absent: Vec<usize>,
    pub rho_prime: f64,
    pub tau_prime: f64,
    #[serde(default)]
    pub sex: Option<Sex>,
}

impl PartialTrajectory {
    pub fn empty(rho_prime: f64, tau_prime: f64) -> Self {
        Self {
            observed: Vec::new(),
            unreliable: Vec::new(),
            absent: Vec::new(),
            rho_prime,
            tau_prime,
            sex: None,
        }
    }

    /// Invariant violations against a model with `m` conditions.
    pub fn violations(&self, m: usize) -> Vec<String> {
        let mut out = Vec::new();
        if !self.rho_prime.is_finite() || !self.tau_prime.is_finite() {
            out.push("baseline and current age must be finite".to_string());
        } else if self.rho_prime > self.tau_prime {
            out.push(format!(
                "baseline age {} is after current age {}",
                self.rho_prime, self.tau_prime
            ));
        }
        let mut seen = HashSet::new();
        let mut check = |j: usize, out: &mut Vec<String>| {
            if j >= m {
                out.push(format!("condition index {j} out of range (model has {m})"));
            } else if !seen.insert(j) {
                out.push(format!("condition index {j} listed more than once"));
            }
        };
        for &(j, age) in &self.observed {
            check(j, &mut out);
            if !(age > self.rho_prime && age <= self.tau_prime) {
                out.push(format!(
                    "diagnosis age {age} for condition {j} must lie in (baseline {}, current {}]",
                    self.rho_prime, self.tau_prime
                ));
            }
        }
        for &j in self.unreliable.iter().chain(&self.absent) {
            check(j, &mut out);
        }
        out
    }
}

/// What is known about one condition for the query individual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionStatus {
    Observed,
    Unreliable,
    Absent,
    Open,
}

/// Read-only forecasting view of a fitted model with predictive
/// Student-t distributions cached per (condition, cluster).
#[derive(Debug, Clone)]
pub struct Forecaster<'a> {
    pub model: &'a FittedModel,
    pred: Vec<StudentT>,
    k: usize,
}

/// Per-condition cluster quantities for one query.
#[derive(Debug, Clone)]
pub struct QueryState {
    pub status: Vec<ConditionStatus>,
    pub cluster_probs: Vec<f64>,
    pub tau_prime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub prob_within: f64,
    pub map_onset: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FutureEvent {
    pub condition: usize,
    pub onset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRisk {
    pub code: String,
    pub status: ConditionStatus,
    pub total_future_risk: f64,
    /// Lifetime risk for a random member of the population, Σ_k θ̄ π̄.
    pub population_risk: f64,
    pub prob_within: Option<f64>,
    pub map_onset: Option<f64>,
    pub curve_ages: Vec<f64>,
    pub curve_risk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub cluster_probs: Vec<f64>,
    pub conditions: Vec<ConditionRisk>,
}

/// τ′, τ′ + step, … up to `MAX_AGE`, always ending at `MAX_AGE` when τ′ < `MAX_AGE`.
pub fn age_grid(tau_prime: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("grid step must be > 0, got {step}")));
    }
    let mut out = vec![tau_prime];
    let mut i = 1;
    loop {
        let g = tau_prime + i as f64 * step;
        if g >= MAX_AGE {
            break;
        }
        out.push(g);
        i += 1;
    }
    if tau_prime < MAX_AGE {
        out.push(MAX_AGE);
    }
    Ok(out)
}

fn log_softmax_normalize(logw: &mut [f64]) -> Result<()> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Domain(
            "history has zero probability under every cluster".into(),
        ));
    }
    let mut sum = 0.0;
    for x in logw.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in logw.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

impl<'a> Forecaster<'a> {
    pub fn new(model: &'a FittedModel) -> Self {
        let pred = model.nig_star.iter().map(|p| p.predictive()).collect();
        Self { model, pred, k: model.k() }
    }

    #[inline]
    pub fn predictive(&self, m: usize, k: usize) -> &StudentT {
        &self.pred[m * self.k + k]
    }

    #[inline]
    fn pi_bar(&self, m: usize, k: usize) -> f64 {
        self.model.pi_bar[[m, k]]
    }

    /// Status of each condition, applying sex-specific and lifelong rules.
    pub fn statuses(&self, p: &PartialTrajectory) -> Result<Vec<ConditionStatus>> {
        let m = self.model.m();
        let v = p.violations(m);
        if let Some(first) = v.first() {
            return Err(Error::Validation(v.len(), first.clone()));
        }
        let mut status = vec![ConditionStatus::Open; m];
        for &(j, _) in &p.observed {
            status[j] = ConditionStatus::Observed;
        }
        for &j in &p.unreliable {
            status[j] = ConditionStatus::Unreliable;
        }
        for &j in &p.absent {
            status[j] = ConditionStatus::Absent;
        }
        for (j, meta) in self.model.conditions.iter().enumerate() {
            if status[j] == ConditionStatus::Open && meta.absence_is_certain(p.sex, p.tau_prime) {
                status[j] = ConditionStatus::Absent;
            }
        }
        Ok(status)
    }

    /// φ̃ ∝ θ̄ Π π̄ f(t′) Π π̄ F(ρ′) Π (1 − π̄) Π (1 − π̄ F(τ′)), in log space.
    pub fn cluster_posterior(&self, p: &PartialTrajectory) -> Result<Vec<f64>> {
        Ok(self.query(p)?.cluster_probs)
    }

    pub fn query(&self, p: &PartialTrajectory) -> Result<QueryState> {
        let status = self.statuses(p)?;
        let mut logw: Vec<f64> = self.model.theta_bar.iter().map(|t| t.ln()).collect();
        for (k, lw) in logw.iter_mut().enumerate() {
            for &(j, age) in &p.observed {
                *lw += self.pi_bar(j, k).ln() + self.predictive(j, k).ln_pdf(age);
            }
            for (j, st) in status.iter().enumerate() {
                let pi = self.pi_bar(j, k);
                match st {
                    ConditionStatus::Observed => {}
                    ConditionStatus::Unreliable => {
                        *lw += pi.ln() + self.predictive(j, k).ln_cdf(p.rho_prime);
                    }
                    ConditionStatus::Absent => *lw += (1.0 - pi).ln(),
                    ConditionStatus::Open => {
                        // 1 − π̄F = (1 − π̄) + π̄S, which keeps precision when F ≈ 1
                        let s = self.predictive(j, k).sf(p.tau_prime);
                        *lw += ((1.0 - pi) + pi * s).ln();
                    }
                }
            }
        }
        log_softmax_normalize(&mut logw)?;
        Ok(QueryState { status, cluster_probs: logw, tau_prime: p.tau_prime })
    }

    /// π̃ = π̄S(τ′) / (π̄S(τ′) + 1 − π̄).
    pub fn surviving_presence_prob(&self, m: usize, k: usize, tau_prime: f64) -> f64 {
        let pi = self.pi_bar(m, k);
        let ps = pi * self.predictive(m, k).sf(tau_prime);
        if ps == 0.0 {
            return 0.0;
        }
        ps / (ps + 1.0 - pi)
    }

    /// Σ_k φ̃ π̃ for an open condition, zero otherwise.
    pub fn total_future_risk(&self, q: &QueryState, m: usize) -> f64 {
        if q.status[m] != ConditionStatus::Open {
            return 0.0;
        }
        (0..self.k)
            .map(|k| q.cluster_probs[k] * self.surviving_presence_prob(m, k, q.tau_prime))
            .sum()
    }

    /// Cumulative risk Σ_k φ̃ π̃ (1 − S(g)/S(τ′)) at each grid age.
    pub fn risk_curve(&self, q: &QueryState, m: usize, grid: &[f64]) -> Result<Vec<f64>> {
        check_grid(grid, q.tau_prime)?;
        if q.status[m] != ConditionStatus::Open {
            return Ok(vec![0.0; grid.len()]);
        }
        let weights: Vec<(f64, f64, &StudentT)> = (0..self.k)
            .filter_map(|k| {
                let w = q.cluster_probs[k] * self.surviving_presence_prob(m, k, q.tau_prime);
                let t = self.predictive(m, k);
                (w > 0.0).then(|| (w, t.ln_sf(q.tau_prime), t))
            })
            .collect();
        let mut out = Vec::with_capacity(grid.len());
        let mut last: f64 = 0.0;
        for &g in grid {
            let mut r = 0.0;
            for &(w, ln_s0, t) in &weights {
                let ratio = (t.ln_sf(g) - ln_s0).exp().min(1.0);
                r += w * (1.0 - ratio);
            }
            // guard against last-ulp wobble in the tail ratios
            last = last.max(r);
            out.push(last);
        }
        Ok(out)
    }

    /// π̄ F(age) for one cluster, no individual history.
    pub fn cluster_population_risk(&self, m: usize, k: usize, grid: &[f64]) -> Vec<f64> {
        let t = self.predictive(m, k);
        grid.iter().map(|&g| self.pi_bar(m, k) * t.cdf(g)).collect()
    }

    /// θ̄-weighted mixture of the per-cluster curves.
    pub fn population_risk(&self, m: usize, grid: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; grid.len()];
        for k in 0..self.k {
            let w = self.model.theta_bar[k];
            for (o, c) in out.iter_mut().zip(self.cluster_population_risk(m, k, grid)) {
                *o += w * c;
            }
        }
        out
    }

    /// Mixture components of the density of "present with onset at t" for
    /// t > τ′, as (weight / S(τ′), predictive), dropping negligible ones.
    fn onset_components(&self, q: &QueryState, m: usize) -> Vec<(f64, &StudentT)> {
        let mut comps: Vec<(f64, &StudentT)> = (0..self.k)
            .filter_map(|k| {
                let pt = self.predictive(m, k);
                let s0 = pt.sf(q.tau_prime);
                let w = q.cluster_probs[k] * self.surviving_presence_prob(m, k, q.tau_prime);
                (s0 > 0.0 && w > 0.0).then(|| (w / s0, pt))
            })
            .collect();
        let top = comps.iter().map(|c| c.0).fold(0.0, f64::max);
        comps.retain(|c| c.0 >= 1e-12 * top);
        comps
    }

    /// Probability of onset in (τ′, τ′ + horizon] and the mode of the onset
    /// density on that window.
    pub fn predict_window(&self, q: &QueryState, m: usize, horizon: f64) -> Result<WindowPrediction> {
        if !(horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be > 0, got {horizon}")));
        }
        let end = q.tau_prime + horizon;
        let prob_within = if end.is_finite() {
            self.risk_curve(q, m, &[q.tau_prime, end])?[1]
        } else {
            self.total_future_risk(q, m)
        };
        let map_onset = if prob_within > 0.0 {
            // onsets past MAP_MAX_AGE carry no practical weight
            let cap = MAP_MAX_AGE.max(q.tau_prime + 1.0);
            Some(self.map_onset(q, m, end.min(cap)))
        } else {
            None
        };
        Ok(WindowPrediction { prob_within, map_onset })
    }

    /// Grid search at `MAP_GRID_STEP`, then bisection on the sign of the
    /// density's derivative around the best grid point.
    fn map_onset(&self, q: &QueryState, m: usize, end: f64) -> f64 {
        let comps = self.onset_components(q, m);
        let f = |t: f64| comps.iter().map(|(w, pt)| w * pt.pdf(t)).sum::<f64>();
        let df = |t: f64| comps.iter().map(|(w, pt)| w * pt.pdf(t) * pt.d_ln_pdf(t)).sum::<f64>();
        let start = q.tau_prime;
        let steps = (((end - start) / MAP_GRID_STEP).ceil() as usize).max(10);
        let h = (end - start) / steps as f64;
        let mut best = (start, f(start));
        for i in 1..=steps {
            let t = start + i as f64 * h;
            let v = f(t);
            if v > best.1 {
                best = (t, v);
            }
        }
        let mut lo = (best.0 - h).max(start);
        let mut hi = (best.0 + h).min(end);
        let (d_lo, d_hi) = (df(lo), df(hi));
        if lo == start && best.0 == start && d_lo <= 0.0 {
            return start;
        }
        if hi == end && best.0 == end && d_hi >= 0.0 {
            return end;
        }
        if !(d_lo > 0.0 && d_hi < 0.0) {
            return best.0;
        }
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if df(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if f(hi) > f(lo) {
            hi
        } else {
            lo
        }
    }

    /// Full profile: cluster probabilities plus per-condition risks and curves.
    pub fn profile(&self, p: &PartialTrajectory, horizon: Option<f64>, grid: &[f64]) -> Result<RiskProfile> {
        let q = self.query(p)?;
        let mut conditions = Vec::with_capacity(self.model.m());
        for (m, meta) in self.model.conditions.iter().enumerate() {
            let window = match horizon {
                Some(h) => Some(self.predict_window(&q, m, h)?),
                None => None,
            };
            conditions.push(ConditionRisk {
                code: meta.code.clone(),
                status: q.status[m],
                total_future_risk: self.total_future_risk(&q, m),
                population_risk: (0..self.k).map(|k| self.model.theta_bar[k] * self.pi_bar(m, k)).sum(),
                prob_within: window.as_ref().map(|w| w.prob_within),
                map_onset: window.and_then(|w| w.map_onset),
                curve_ages: grid.to_vec(),
                curve_risk: self.risk_curve(&q, m, grid)?,
            });
        }
        Ok(RiskProfile { cluster_probs: q.cluster_probs, conditions })
    }

    /// Precompute what `sample_future` needs so repeated draws are cheap.
    pub fn future_sampler(&self, p: &PartialTrajectory) -> Result<FutureSampler> {
        let q = self.query(p)?;
        let open: Vec<usize> = (0..self.model.m()).filter(|&m| q.status[m] == ConditionStatus::Open).collect();
        let mut presence = Vec::with_capacity(self.k);
        let mut surv = Vec::with_capacity(self.k);
        for k in 0..self.k {
            presence.push(open.iter().map(|&m| self.surviving_presence_prob(m, k, q.tau_prime)).collect());
            surv.push(open.iter().map(|&m| self.predictive(m, k).sf(q.tau_prime)).collect());
        }
        let preds = (0..self.k)
            .map(|k| open.iter().map(|&m| *self.predictive(m, k)).collect())
            .collect();
        Ok(FutureSampler { cluster_probs: q.cluster_probs, open, presence, surv, preds })
    }
}

fn check_grid(grid: &[f64], tau_prime: f64) -> Result<()> {
    if grid.iter().any(|g| g.is_nan()) {
        return Err(Error::Domain("grid contains NaN".into()));
    }
    if grid.first().is_some_and(|&g| g < tau_prime) {
        return Err(Error::Domain(format!("grid starts before current age {tau_prime}")));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("grid ages must be ascending".into()));
    }
    Ok(())
}

/// Draws of the unobserved future for one query individual.
#[derive(Debug, Clone)]
pub struct FutureSampler {
    pub cluster_probs: Vec<f64>,
    open: Vec<usize>,
    presence: Vec<Vec<f64>>,
    surv: Vec<Vec<f64>>,
    preds: Vec<Vec<StudentT>>,
}

impl FutureSampler {
    /// k ~ φ̃, then per open condition presence ~ Bernoulli(π̃) and onset from
    /// the predictive Student-t conditioned on t > τ′.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<FutureEvent> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.cluster_probs.len() - 1;
        for (j, p) in self.cluster_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                k = j;
                break;
            }
        }
        let mut out = Vec::new();
        for (i, &m) in self.open.iter().enumerate() {
            if rng.gen::<f64>() >= self.presence[k][i] {
                continue;
            }
            // S(t) = U·S(τ′) for U uniform on (0, 1]
            let v: f64 = 1.0 - rng.gen::<f64>();
            let onset = self.preds[k][i].isf(v * self.surv[k][i]);
            out.push(FutureEvent { condition: m, onset });
        }
        out
    }
}

pub fn cluster_posterior(model: &FittedModel, p: &PartialTrajectory) -> Result<Vec<f64>> {
    Forecaster::new(model).cluster_posterior(p)
}

pub fn surviving_presence_prob(model: &FittedModel, m: usize, k: usize, tau_prime: f64) -> f64 {
    Forecaster::new(model).surviving_presence_prob(m, k, tau_prime)
}

pub fn risk_curve(model: &FittedModel, p: &PartialTrajectory, m: usize, grid: &[f64]) -> Result<Vec<f64>> {
    let f = Forecaster::new(model);
    let q = f.query(p)?;
    f.risk_curve(&q, m, grid)
}

pub fn predict_window(model: &FittedModel, p: &PartialTrajectory, m: usize, horizon: f64) -> Result<WindowPrediction> {
    let f = Forecaster::new(model);
    let q = f.query(p)?;
    f.predict_window(&q, m, horizon)
}

pub fn sample_future(model: &FittedModel, p: &PartialTrajectory, seed: u64) -> Result<Vec<FutureEvent>> {
    let sampler = Forecaster::new(model).future_sampler(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(&mut rng))
}
