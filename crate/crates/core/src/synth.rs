//! Synthetic cohorts drawn from the model's own generative process, with the
//! latent truth kept for evaluation.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::NIGParams;
use crate::model::{ConditionMeta, Dataset, Trajectory, VitalStatus};

/// RNG stream for cluster-level parameters; individuals use stream n + 1.
const PARAM_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = u64::MAX;
const MAX_WEIGHT_DRAWS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub cluster_weight_range: (f64, f64),
    /// Beta(a, b) for per-(condition, cluster) prevalence.
    pub prevalence_prior: (f64, f64),
    pub onset_prior: NIGParams,
    pub baseline_range: (f64, f64),
    pub followup_years: f64,
    pub death_prob: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SimConfig {
    /// 200k individuals, 80 conditions, 10 clusters holding 3–15% each.
    pub fn paper() -> Self {
        Self {
            n: 200_000,
            m: 80,
            k: 10,
            cluster_weight_range: (0.03, 0.15),
            prevalence_prior: (0.07, 0.49),
            onset_prior: NIGParams { u: 50.0, v: 0.3, alpha: 5.0, beta: 300.0 },
            baseline_range: (20.0, 60.0),
            followup_years: 30.0,
            death_prob: 0.8,
            train_fraction: 0.8,
            seed: 20240101,
        }
    }

    /// Reduced cohort for quick checks: 20k individuals, 30 conditions, 6 clusters.
    pub fn smoke() -> Self {
        Self {
            n: 20_000,
            m: 30,
            k: 6,
            cluster_weight_range: (0.08, 0.30),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 1 || self.m < 1 {
            return bad(format!("need k >= 1 and m >= 1, got k={} m={}", self.k, self.m));
        }
        let (lo, hi) = self.cluster_weight_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("cluster_weight_range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1"));
        }
        if (self.k as f64) * hi < 1.0 || (self.k as f64) * lo > 1.0 {
            return bad(format!(
                "cluster_weight_range ({lo}, {hi}) is infeasible for k={}: weights cannot sum to 1",
                self.k
            ));
        }
        let (a, b) = self.prevalence_prior;
        if !(a > 0.0 && b > 0.0) {
            return bad(format!("prevalence_prior ({a}, {b}) must be positive"));
        }
        self.onset_prior.validate().map_err(|e| Error::Config(format!("onset_prior: {e}")))?;
        let (blo, bhi) = self.baseline_range;
        if !(blo.is_finite() && bhi.is_finite() && 0.0 <= blo && blo <= bhi) {
            return bad(format!("baseline_range ({blo}, {bhi}) must satisfy 0 <= lo <= hi"));
        }
        if !(self.followup_years >= 0.0 && self.followup_years.is_finite()) {
            return bad(format!("followup_years must be >= 0, got {}", self.followup_years));
        }
        if !(0.0..=1.0).contains(&self.death_prob) {
            return bad(format!("death_prob must lie in [0, 1], got {}", self.death_prob));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad(format!("train_fraction must lie in [0, 1], got {}", self.train_fraction));
        }
        Ok(())
    }
}

/// Generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub weights: Vec<f64>,
    /// Presence probability, M×K.
    pub pi: Array2<f64>,
    pub mu: Array2<f64>,
    pub sigma2: Array2<f64>,
}

/// Uncensored life course of one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub cluster: usize,
    /// Onset age for each condition that is present, `None` if absent.
    pub onset: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub data: Dataset,
    pub truth: Vec<LatentRecord>,
}

impl Split {
    pub fn labels(&self) -> Vec<usize> {
        self.truth.iter().map(|r| r.cluster).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub train: Split,
    pub test: Split,
    pub params: TrueParams,
}

pub fn condition_list(m: usize) -> Vec<ConditionMeta> {
    let width = m.to_string().len().max(2);
    (1..=m)
        .map(|i| ConditionMeta {
            code: format!("C{i:0width$}"),
            name: format!("condition {i}"),
            sex_specific: None,
            lifelong: false,
        })
        .collect()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Dirichlet(1) draws rejected until every weight lies in [lo, hi].
fn draw_weights<R: Rng>(rng: &mut R, k: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    for _ in 0..MAX_WEIGHT_DRAWS {
        let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        if w.iter().all(|&x| lo <= x && x <= hi) {
            return Ok(w);
        }
    }
    Err(Error::Config(format!(
        "no Dirichlet(1) draw with all {k} weights in [{lo}, {hi}] after {MAX_WEIGHT_DRAWS} attempts"
    )))
}

pub fn draw_params(cfg: &SimConfig) -> Result<TrueParams> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, PARAM_STREAM);
    let (lo, hi) = cfg.cluster_weight_range;
    let weights = draw_weights(&mut rng, cfg.k, lo, hi)?;
    let beta = Beta::new(cfg.prevalence_prior.0, cfg.prevalence_prior.1)
        .map_err(|e| Error::Config(format!("prevalence_prior: {e}")))?;
    let p = cfg.onset_prior;
    let inv_var = Gamma::new(p.alpha, 1.0 / p.beta).map_err(|e| Error::Config(e.to_string()))?;
    let mut pi = Array2::zeros((cfg.m, cfg.k));
    let mut mu = Array2::zeros((cfg.m, cfg.k));
    let mut sigma2 = Array2::zeros((cfg.m, cfg.k));
    for m in 0..cfg.m {
        for k in 0..cfg.k {
            // Beta with tiny shapes can return exactly 0 or 1 in f64
            pi[[m, k]] = beta.sample(&mut rng);
            let s2 = 1.0 / inv_var.sample(&mut rng);
            sigma2[[m, k]] = s2;
            mu[[m, k]] = p.u + (s2 / p.v).sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    Ok(TrueParams { weights, pi, mu, sigma2 })
}

fn categorical<R: Rng>(rng: &mut R, w: &[f64]) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if x < acc {
            return i;
        }
    }
    w.len() - 1
}

/// Draw one individual and apply baseline/extraction censoring.
fn draw_individual(cfg: &SimConfig, params: &TrueParams, index: usize) -> (Trajectory, LatentRecord) {
    let mut rng = rng_for(cfg.seed, index as u64 + 1);
    let cluster = categorical(&mut rng, &params.weights);
    let (blo, bhi) = cfg.baseline_range;
    let rho = if bhi > blo { rng.sample(Uniform::new(blo, bhi)) } else { blo };
    let tau = rho + cfg.followup_years;
    let vital = if rng.gen::<f64>() < cfg.death_prob {
        VitalStatus::Dead
    } else {
        VitalStatus::Alive
    };
    let mut tr = Trajectory::blank(format!("P{:07}", index + 1), None, rho, tau, vital, cfg.m);
    let mut onset = vec![None; cfg.m];
    for m in 0..cfg.m {
        if rng.gen::<f64>() >= params.pi[[m, cluster]] {
            continue;
        }
        let normal = Normal::new(params.mu[[m, cluster]], params.sigma2[[m, cluster]].sqrt())
            .expect("positive variance");
        let t = normal.sample(&mut rng);
        onset[m] = Some(t);
        if t <= rho {
            tr.set_unreliable(m);
        } else if t <= tau {
            tr.set_observed_present(m, t);
        }
        // onsets after τ stay absent (dead) or incomplete (alive)
    }
    (tr, LatentRecord { cluster, onset })
}

pub fn generate(cfg: &SimConfig) -> Result<SimOutput> {
    let params = draw_params(cfg)?;
    let people: Vec<(Trajectory, LatentRecord)> = (0..cfg.n)
        .into_par_iter()
        .map(|i| draw_individual(cfg, &params, i))
        .collect();

    let mut order: Vec<usize> = (0..cfg.n).collect();
    let mut rng = rng_for(cfg.seed, SPLIT_STREAM);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_train = (cfg.train_fraction * cfg.n as f64).round() as usize;
    let mut in_train = vec![false; cfg.n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }

    let conditions = condition_list(cfg.m);
    let mut train = Split { data: Dataset::new(conditions.clone(), Vec::new()), truth: Vec::new() };
    let mut test = Split { data: Dataset::new(conditions, Vec::new()), truth: Vec::new() };
    for (i, (tr, rec)) in people.into_iter().enumerate() {
        let target = if in_train[i] { &mut train } else { &mut test };
        target.data.individuals.push(tr);
        target.truth.push(rec);
    }
    Ok(SimOutput { train, test, params })
}
