//! Cluster recovery, presence AUROC/accuracy, onset error, and the
//! evaluation protocols built on them.

use ndarray::{Array2, ArrayView2};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{fit, FitOptions, FitOutput};
use crate::error::{Error, Result};
use crate::expfam::NIGParams;
use crate::forecast::{ConditionStatus, Forecaster, PartialTrajectory};
use crate::model::{
    CensorMark, Dataset, FitMeta, FittedModel, Hyperparameters, Presence, Trajectory, VitalStatus,
};
use crate::synth::{LatentRecord, Split, TrueParams};

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn hard_labels(resp: ArrayView2<f64>) -> Vec<usize> {
    resp.rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("row-major responsibilities")))
        .collect()
}

/// Optimal one-to-one matching of estimated to true clusters: `out[j]` is
/// the true cluster paired with estimated cluster `j`.
pub fn match_clusters(true_labels: &[usize], resp: ArrayView2<f64>) -> Result<Vec<usize>> {
    let k = resp.ncols();
    if true_labels.len() != resp.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} responsibility rows",
            true_labels.len(),
            resp.nrows()
        )));
    }
    if let Some(&bad) = true_labels.iter().find(|&&l| l >= k) {
        return Err(Error::DimensionMismatch(format!("true label {bad} but only {k} clusters")));
    }
    let mut counts = Matrix::new(k, k, 0i64);
    for (&t, e) in true_labels.iter().zip(hard_labels(resp)) {
        counts[(e, t)] += 1;
    }
    let (_, assignment) = kuhn_munkres(&counts);
    Ok(assignment)
}

/// Fraction of individuals whose most probable estimated cluster maps to
/// their true cluster under `match_clusters`.
pub fn cluster_recovery(true_labels: &[usize], resp: ArrayView2<f64>) -> Result<f64> {
    let mapping = match_clusters(true_labels, resp)?;
    if true_labels.is_empty() {
        return Ok(f64::NAN);
    }
    let hits = hard_labels(resp)
        .iter()
        .zip(true_labels)
        .filter(|(e, t)| mapping[**e] == **t)
        .count();
    Ok(hits as f64 / true_labels.len() as f64)
}

/// Mann–Whitney AUROC with midranks for ties; `None` unless both classes occur.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &p in &idx[i..=j] {
            if labels[p] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Mean absolute error; `None` for an empty set.
pub fn mean_absolute_error(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Scores for one held-out (individual, condition) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    condition: usize,
    prob: f64,
    present: bool,
    /// (predicted, true) onset when the condition is present.
    onset: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub code: String,
    pub positives: usize,
    pub negatives: usize,
    pub auroc: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceMetrics {
    pub protocol: String,
    /// Which (individual, condition) pairs were scored.
    pub scored_set: String,
    pub individuals: usize,
    pub scored: usize,
    pub positives: usize,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub mae: Option<f64>,
    pub per_condition: Vec<ConditionMetrics>,
}

fn summarize(protocol: &str, scored_set: &str, individuals: usize, m_codes: &[String], all: Vec<Vec<Scored>>) -> PresenceMetrics {
    let flat: Vec<Scored> = all.into_iter().flatten().collect();
    let scores: Vec<f64> = flat.iter().map(|s| s.prob).collect();
    let labels: Vec<bool> = flat.iter().map(|s| s.present).collect();
    let correct = flat.iter().filter(|s| (s.prob >= 0.5) == s.present).count();
    let onsets: Vec<(f64, f64)> = flat.iter().filter_map(|s| s.onset).collect();
    let per_condition = m_codes
        .iter()
        .enumerate()
        .map(|(m, code)| {
            let sub: Vec<&Scored> = flat.iter().filter(|s| s.condition == m).collect();
            let sc: Vec<f64> = sub.iter().map(|s| s.prob).collect();
            let lb: Vec<bool> = sub.iter().map(|s| s.present).collect();
            let on: Vec<(f64, f64)> = sub.iter().filter_map(|s| s.onset).collect();
            let positives = lb.iter().filter(|&&l| l).count();
            ConditionMetrics {
                code: code.clone(),
                positives,
                negatives: lb.len() - positives,
                auroc: auroc(&sc, &lb),
                mae: mean_absolute_error(&on),
            }
        })
        .collect();
    PresenceMetrics {
        protocol: protocol.to_string(),
        scored_set: scored_set.to_string(),
        individuals,
        scored: flat.len(),
        positives: labels.iter().filter(|&&l| l).count(),
        accuracy: if flat.is_empty() { f64::NAN } else { correct as f64 / flat.len() as f64 },
        auroc: auroc(&scores, &labels),
        mae: mean_absolute_error(&onsets),
        per_condition,
    }
}

fn check_conditions(model: &FittedModel, ds: &Dataset) -> Result<()> {
    if model.m() != ds.m() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} conditions, test data has {}",
            model.m(),
            ds.m()
        )));
    }
    for (a, b) in model.conditions.iter().zip(&ds.conditions) {
        if a.code != b.code {
            return Err(Error::DimensionMismatch(format!(
                "condition codes differ: model {} vs data {}",
                a.code, b.code
            )));
        }
    }
    Ok(())
}

/// Current-age sampler for the uniform-age protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformAge {
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

impl UniformAge {
    pub fn new(seed: u64) -> Self {
        Self { lo: 50.0, hi: 90.0, seed }
    }

    /// Age for the individual at `index`, independent of every other index.
    pub fn age(&self, index: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng.gen_range(self.lo..self.hi)
    }
}

/// History of a latent life course as seen at age `c` with baseline ρ.
pub fn history_at(rec: &LatentRecord, rho: f64, c: f64) -> PartialTrajectory {
    let rho_prime = rho.min(c);
    let mut p = PartialTrajectory::empty(rho_prime, c);
    for (m, onset) in rec.onset.iter().enumerate() {
        match *onset {
            Some(t) if t <= rho_prime => p.unreliable.push(m),
            Some(t) if t <= c => p.observed.push((m, t)),
            _ => {}
        }
    }
    p
}

/// Sample a current age per test individual, forecast every condition that
/// has not occurred by then, and score against the uncensored life course.
/// Predicted onsets are the MAP of the onset density after the current age.
pub fn uniform_age_protocol(model: &FittedModel, test: &Split, sampler: UniformAge) -> Result<PresenceMetrics> {
    check_conditions(model, &test.data)?;
    if test.truth.len() != test.data.n() {
        return Err(Error::DimensionMismatch("test truth does not match test data".into()));
    }
    let f = Forecaster::new(model);
    let all = test
        .data
        .individuals
        .par_iter()
        .zip(&test.truth)
        .enumerate()
        .map(|(i, (tr, rec))| {
            let c = sampler.age(i);
            let p = history_at(rec, tr.rho, c);
            let q = f.query(&p)?;
            let mut out = Vec::new();
            for m in 0..model.m() {
                if q.status[m] != ConditionStatus::Open {
                    continue;
                }
                let present = rec.onset[m].is_some();
                let onset = match rec.onset[m] {
                    Some(t) => {
                        let w = f.predict_window(&q, m, f64::INFINITY)?;
                        w.map_onset.map(|pred| (pred, t))
                    }
                    None => None,
                };
                out.push(Scored { condition: m, prob: f.total_future_risk(&q, m), present, onset });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let codes: Vec<String> = model.conditions.iter().map(|c| c.code.clone()).collect();
    Ok(summarize(
        "uniform-age",
        "conditions not yet diagnosed at the sampled current age; truth is the uncensored life course",
        test.data.n(),
        &codes,
        all,
    ))
}

/// Options for the last-ten-years protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutOptions {
    pub window: f64,
    /// Count Unreliable entries whose onset may fall inside the window as
    /// positives. When false they are left out of scoring.
    pub include_window_censored: bool,
}

impl Default for HoldoutOptions {
    fn default() -> Self {
        Self { window: 10.0, include_window_censored: false }
    }
}

/// History before τ − window for an observed trajectory, and the targets in the window.
fn holdout_split(tr: &Trajectory, window: f64) -> (PartialTrajectory, Vec<(usize, Option<f64>)>, Vec<usize>) {
    let cut = tr.tau - window;
    let rho_prime = tr.rho.min(cut);
    let mut p = PartialTrajectory::empty(rho_prime, cut);
    p.sex = tr.sex;
    let mut targets = Vec::new();
    let mut window_censored = Vec::new();
    for m in 0..tr.m() {
        match (tr.kappa[m], tr.d[m]) {
            (CensorMark::Observed, Presence::Present) => {
                let t = tr.t[m].expect("observed onset");
                if t <= cut {
                    p.observed.push((m, t));
                } else {
                    targets.push((m, Some(t)));
                }
            }
            (CensorMark::Unreliable, _) => {
                if tr.rho <= cut {
                    p.unreliable.push(m);
                } else {
                    window_censored.push(m);
                }
            }
            // absent by τ: a negative within the window
            _ => targets.push((m, None)),
        }
    }
    (p, targets, window_censored)
}

/// Truncate each trajectory ten years before extraction and predict the
/// window that follows from the observed record alone.
pub fn holdout_protocol(model: &FittedModel, test: &Dataset, opts: HoldoutOptions) -> Result<PresenceMetrics> {
    check_conditions(model, test)?;
    let f = Forecaster::new(model);
    let all = test
        .individuals
        .par_iter()
        .map(|tr| {
            let (p, targets, censored) = holdout_split(tr, opts.window);
            let q = f.query(&p)?;
            let mut out = Vec::new();
            for (m, truth) in targets {
                let w = f.predict_window(&q, m, opts.window)?;
                let onset = truth.and_then(|t| w.map_onset.map(|pred| (pred, t)));
                out.push(Scored { condition: m, prob: w.prob_within, present: truth.is_some(), onset });
            }
            if opts.include_window_censored {
                for m in censored {
                    let w = f.predict_window(&q, m, opts.window)?;
                    out.push(Scored { condition: m, prob: w.prob_within, present: true, onset: None });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let codes: Vec<String> = model.conditions.iter().map(|c| c.code.clone()).collect();
    let set = if opts.include_window_censored {
        "conditions not diagnosed before the cut; window-censored unreliable entries counted as positives"
    } else {
        "conditions not diagnosed before the cut; window-censored unreliable entries excluded"
    };
    Ok(summarize("last-10-years", set, test.n(), &codes, all))
}

/// Scalar prior shared by every (condition, cluster) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorTemplate {
    pub theta: f64,
    pub a: f64,
    pub b: f64,
    pub nig: NIGParams,
}

impl Default for PriorTemplate {
    fn default() -> Self {
        Self { theta: 1.0, a: 1.0, b: 1.0, nig: NIGParams { u: 50.0, v: 0.3, alpha: 5.0, beta: 750.0 } }
    }
}

impl PriorTemplate {
    pub fn build(&self, m: usize, k: usize) -> Result<Hyperparameters> {
        Hyperparameters::uniform(m, k, self.theta, self.a, self.b, self.nig)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub auroc: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Fit once per K and score each fit with the last-ten-years protocol on `test`.
pub fn k_sweep(
    train: &Dataset,
    test: &Dataset,
    prior: &PriorTemplate,
    k_grid: &[usize],
    options: &FitOptions,
    holdout: HoldoutOptions,
) -> Result<Vec<SweepRow>> {
    k_sweep_each(train, test, prior, k_grid, options, holdout, |_, _| {})
}

/// `k_sweep`, handing each fit to `each` once it has been scored.
pub fn k_sweep_each(
    train: &Dataset,
    test: &Dataset,
    prior: &PriorTemplate,
    k_grid: &[usize],
    options: &FitOptions,
    holdout: HoldoutOptions,
    mut each: impl FnMut(&SweepRow, FitOutput),
) -> Result<Vec<SweepRow>> {
    if k_grid.is_empty() {
        return Err(Error::Config("K grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let hyper = prior.build(train.m(), k)?;
        let out = fit(train, &hyper, options.clone())?;
        let metrics = holdout_protocol(&out.model, test, holdout)?;
        log::info!("K={k}: AUROC {:?} after {} iterations", metrics.auroc, out.trace.len());
        let row = SweepRow {
            k,
            auroc: metrics.auroc,
            iterations: out.trace.len(),
            converged: out.model.fit_meta.converged,
        };
        each(&row, out);
        rows.push(row);
    }
    Ok(rows)
}

/// A model whose predictive distributions are (numerically) the generating
/// Gaussians and whose weights and prevalences are the true ones.
pub fn oracle_model(params: &TrueParams, conditions: Vec<crate::model::ConditionMeta>) -> Result<FittedModel> {
    const SHARP: f64 = 1e6;
    let (m, k) = params.pi.dim();
    let nig = Array2::from_shape_fn((m, k), |(i, j)| NIGParams {
        u: params.mu[[i, j]],
        v: SHARP,
        alpha: SHARP,
        beta: SHARP * params.sigma2[[i, j]],
    });
    let meta = FitMeta {
        iterations: 0,
        final_delta: 0.0,
        converged: true,
        seed: 0,
        epsilon: 0.0,
        hyperparameters: Hyperparameters::weakly_informative(m, k),
    };
    let b = params.pi.mapv(|p| 1.0 - p);
    FittedModel::from_posterior(conditions, params.weights.clone(), params.pi.clone(), b, nig, meta)
}

/// Cluster posterior of each test individual given the full observed record.
pub fn test_responsibilities(model: &FittedModel, test: &Dataset) -> Result<Array2<f64>> {
    check_conditions(model, test)?;
    let f = Forecaster::new(model);
    let rows = test
        .individuals
        .par_iter()
        .map(|tr| f.cluster_posterior(&observed_history(tr)))
        .collect::<Result<Vec<_>>>()?;
    let k = model.k();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((test.n(), k), flat).expect("shape"))
}

/// A full trajectory as a forecasting query at its extraction age.
pub fn observed_history(tr: &Trajectory) -> PartialTrajectory {
    let mut p = PartialTrajectory::empty(tr.rho, tr.tau);
    p.sex = tr.sex;
    for m in 0..tr.m() {
        match (tr.kappa[m], tr.d[m]) {
            (CensorMark::Observed, Presence::Present) => p.observed.push((m, tr.t[m].expect("onset"))),
            (CensorMark::Observed, _) => {
                if tr.vital == VitalStatus::Dead {
                    p.absent.push(m)
                }
            }
            (CensorMark::Unreliable, _) => p.unreliable.push(m),
            (CensorMark::Incomplete, _) => {}
        }
    }
    // observed absences in the living come only from sex or lifelong rules,
    // which the forecaster re-derives
    p
}
