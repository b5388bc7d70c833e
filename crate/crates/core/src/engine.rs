//! Coordinate-ascent variational inference for the censored latent-class model.
//!
//! One iteration runs: accumulate expected statistics, update the global
//! Dirichlet/Beta/NIG parameters, refresh ζ, λ and the expected naturals,
//! update responsibilities, then the per-entry latent presence and onset
//! parameters.

use log::{debug, info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{
    left_truncated_with_mass, truncated_normal_moments, GaussianNatural, NIGParams, SuffStats, TruncMoments,
    Truncation, LOG_H,
};
use crate::model::{
    ensure_valid, CensorMark, Dataset, FitMeta, FittedModel, Hyperparameters, Presence,
};
use crate::special::psi;

/// Individuals per work unit. Fixed so that reductions do not depend on the
/// number of threads.
const CHUNK: usize = 1024;

/// How per-chunk accumulators are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Partial sums are added in chunk order: bit-identical for any thread count.
    #[default]
    Deterministic,
    /// Partial sums are combined in whatever order rayon finishes them.
    Unordered,
}

/// Update rule for the presence probability of an unobserved (Incomplete) entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncompleteUpdate {
    /// logit π* = Σ_k γ_k (λ_k + u_I,k), as written in the model derivation.
    #[default]
    Literal,
    /// Adds the entropy of q(t | d = 1), giving
    /// logit π* = Σ_k γ_k (λ_k + E log g_k) − log g(η*) + log S_η*(τ).
    MeanField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Stopping threshold on the global-parameter change. `None` means
    /// 1e-4 times the number of global parameters.
    pub epsilon: Option<f64>,
    pub max_iter: usize,
    pub seed: u64,
    pub reduction: Reduction,
    pub incomplete_update: IncompleteUpdate,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_iter: 3000,
            seed: 1,
            reduction: Reduction::Deterministic,
            incomplete_update: IncompleteUpdate::Literal,
        }
    }
}

/// Number of scalars in (θ*, a*, b*, u*, v*, α*, β*).
pub fn global_param_count(m: usize, k: usize) -> usize {
    k + 6 * m * k
}

pub fn default_epsilon(m: usize, k: usize) -> f64 {
    1e-4 * global_param_count(m, k) as f64
}

/// Global variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub theta_star: Vec<f64>,
    pub a_star: Array2<f64>,
    pub b_star: Array2<f64>,
    pub nig_star: Array2<NIGParams>,
}

impl GlobalParams {
    pub fn from_prior(h: &Hyperparameters) -> Self {
        Self {
            theta_star: h.theta.clone(),
            a_star: h.a.clone(),
            b_star: h.b.clone(),
            nig_star: h.nig.clone(),
        }
    }

    /// Euclidean distance between concatenated parameter vectors.
    pub fn distance(&self, other: &GlobalParams) -> f64 {
        let mut acc = 0.0;
        for (x, y) in self.theta_star.iter().zip(&other.theta_star) {
            acc += (x - y).powi(2);
        }
        for (x, y) in self.a_star.iter().zip(other.a_star.iter()) {
            acc += (x - y).powi(2);
        }
        for (x, y) in self.b_star.iter().zip(other.b_star.iter()) {
            acc += (x - y).powi(2);
        }
        for (p, q) in self.nig_star.iter().zip(other.nig_star.iter()) {
            for (x, y) in p.as_array().iter().zip(q.as_array().iter()) {
                acc += (x - y).powi(2);
            }
        }
        acc.sqrt()
    }
}

/// Expected sufficient statistics z̄, n̄ and T̄.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulators {
    pub z_bar: Vec<f64>,
    pub n_bar: Array2<f64>,
    pub t_bar: Array2<SuffStats>,
}

/// ζ_k = ψ(θ*_k) − ψ(Σθ*) + Σ_m [ψ(b*) − ψ(a*+b*)] and λ = ψ(a*) − ψ(b*).
pub fn compute_zeta_lambda(g: &GlobalParams) -> (Vec<f64>, Array2<f64>) {
    let k = g.theta_star.len();
    let total: f64 = g.theta_star.iter().sum();
    let psi_total = psi(total);
    let mut zeta: Vec<f64> = g.theta_star.iter().map(|&t| psi(t) - psi_total).collect();
    let mut lambda = Array2::zeros(g.a_star.dim());
    for ((m, j), &a) in g.a_star.indexed_iter() {
        let b = g.b_star[[m, j]];
        let psi_b = psi(b);
        zeta[j] += psi_b - psi(a + b);
        lambda[[m, j]] = psi(a) - psi_b;
    }
    debug_assert_eq!(zeta.len(), k);
    (zeta, lambda)
}

/// u_O = E log g + log h + E(η)ᵀT(t).
pub fn u_observed(e_log_g: f64, e_eta: GaussianNatural, t: f64) -> f64 {
    e_log_g + LOG_H + e_eta.dot(&TruncMoments::exact(t))
}

/// u_U or u_I: the same form with truncated expected statistics.
pub fn u_truncated(e_log_g: f64, e_eta: GaussianNatural, moments: &TruncMoments) -> f64 {
    e_log_g + LOG_H + e_eta.dot(moments)
}

/// In-place softmax of log-weights with max subtraction.
pub fn softmax_in_place(c: &mut [f64]) {
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in c.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in c.iter_mut() {
        *x /= sum;
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Responsibility-weighted mean of expected natural parameters.
pub fn local_eta(resp: &[f64], e_eta: &[GaussianNatural]) -> GaussianNatural {
    let mut out = GaussianNatural { eta1: 0.0, eta2: 0.0 };
    for (g, e) in resp.iter().zip(e_eta) {
        out.eta1 += g * e.eta1;
        out.eta2 += g * e.eta2;
    }
    out
}

/// θ* = θ + z̄, a* = a + n̄, b* = b + z̄ − n̄, NIG* by conjugate update.
pub fn update_global(h: &Hyperparameters, acc: &Accumulators) -> Result<GlobalParams> {
    let k = h.k();
    let theta_star = h.theta.iter().zip(&acc.z_bar).map(|(t, z)| t + z).collect();
    let a_star = &h.a + &acc.n_bar;
    let mut b_star = h.b.clone();
    for ((m, j), b) in b_star.indexed_iter_mut() {
        let mut miss = acc.z_bar[j] - acc.n_bar[[m, j]];
        if miss < -1e-6 {
            return Err(Error::Consistency(format!(
                "expected absences negative for condition {m}, cluster {j}: z̄ − n̄ = {miss}"
            )));
        }
        if miss < 0.0 {
            miss = 0.0;
        }
        *b += miss;
    }
    let mut nig_star = h.nig.clone();
    for ((m, j), p) in nig_star.indexed_iter_mut() {
        let mut stats = acc.t_bar[[m, j]];
        stats.n = acc.n_bar[[m, j]];
        *p = p.posterior(&stats);
    }
    debug_assert_eq!(acc.z_bar.len(), k);
    Ok(GlobalParams { theta_star, a_star, b_star, nig_star })
}

#[derive(Debug, Clone, Copy)]
struct ObsEntry {
    m: u32,
    t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Unreliable,
    Incomplete,
}

#[derive(Debug, Clone, Copy)]
struct CensEntry {
    m: u32,
    side: Side,
    bound: f64,
}

impl CensEntry {
    fn truncation(&self) -> Truncation {
        match self.side {
            Side::Unreliable => Truncation::Right(self.bound),
            Side::Incomplete => Truncation::Left(self.bound),
        }
    }
}

/// Local variational parameters for one censored entry.
#[derive(Debug, Clone, Copy)]
struct Local {
    /// π* for Incomplete entries, 1 for Unreliable ones.
    pi: f64,
    eta: GaussianNatural,
    /// Truncated moments under `eta`, refreshed whenever `eta` changes.
    mom: TruncMoments,
}

/// A contiguous block of individuals with their own local state.
#[derive(Debug, Clone)]
struct Chunk {
    len: usize,
    obs_off: Vec<usize>,
    obs: Vec<ObsEntry>,
    cens_off: Vec<usize>,
    cens: Vec<CensEntry>,
    local: Vec<Local>,
    resp: Vec<f64>,
}

/// Per-(m, k) quantities derived from the global parameters, flattened m*K + k.
struct Derived {
    k: usize,
    zeta: Vec<f64>,
    lambda: Vec<f64>,
    e_log_g: Vec<f64>,
    e_eta: Vec<GaussianNatural>,
    /// λ + E log g + log h, the constant part of every present-entry term.
    base: Vec<f64>,
}

impl Derived {
    fn new(g: &GlobalParams) -> Result<Self> {
        let k = g.theta_star.len();
        let (zeta, lambda) = compute_zeta_lambda(g);
        let lambda: Vec<f64> = lambda.iter().copied().collect();
        let mut e_log_g = Vec::with_capacity(lambda.len());
        let mut e_eta = Vec::with_capacity(lambda.len());
        for p in g.nig_star.iter() {
            e_log_g.push(p.expected_log_g()?);
            e_eta.push(p.expected_natural());
        }
        let base = lambda.iter().zip(&e_log_g).map(|(l, e)| l + e + LOG_H).collect();
        Ok(Self { k, zeta, lambda, e_log_g, e_eta, base })
    }
}

#[derive(Debug, Clone)]
struct ChunkAccum {
    z: Vec<f64>,
    n: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
}

impl ChunkAccum {
    fn zeros(m: usize, k: usize) -> Self {
        Self {
            z: vec![0.0; k],
            n: vec![0.0; m * k],
            t1: vec![0.0; m * k],
            t2: vec![0.0; m * k],
        }
    }

    fn add(mut self, other: &ChunkAccum) -> Self {
        for (x, y) in self.z.iter_mut().zip(&other.z) {
            *x += y;
        }
        for (x, y) in self.n.iter_mut().zip(&other.n) {
            *x += y;
        }
        for (x, y) in self.t1.iter_mut().zip(&other.t1) {
            *x += y;
        }
        for (x, y) in self.t2.iter_mut().zip(&other.t2) {
            *x += y;
        }
        self
    }

    fn into_accumulators(self, m: usize, k: usize) -> Accumulators {
        let n_bar = Array2::from_shape_vec((m, k), self.n).expect("shape");
        let t_bar = Array2::from_shape_fn((m, k), |(i, j)| SuffStats {
            t1: self.t1[i * k + j],
            t2: self.t2[i * k + j],
            n: n_bar[[i, j]],
        });
        Accumulators { z_bar: self.z, n_bar, t_bar }
    }
}

impl Chunk {
    fn accumulate(&self, m: usize, k: usize) -> ChunkAccum {
        let mut acc = ChunkAccum::zeros(m, k);
        for i in 0..self.len {
            let g = &self.resp[i * k..(i + 1) * k];
            for (z, gk) in acc.z.iter_mut().zip(g) {
                *z += gk;
            }
            for e in &self.obs[self.obs_off[i]..self.obs_off[i + 1]] {
                let row = e.m as usize * k;
                let t2 = e.t * e.t;
                for j in 0..k {
                    acc.n[row + j] += g[j];
                    acc.t1[row + j] += g[j] * e.t;
                    acc.t2[row + j] += g[j] * t2;
                }
            }
            for c in self.cens_off[i]..self.cens_off[i + 1] {
                let e = self.cens[c];
                let loc = &self.local[c];
                let row = e.m as usize * k;
                for j in 0..k {
                    let w = loc.pi * g[j];
                    acc.n[row + j] += w;
                    acc.t1[row + j] += w * loc.mom.e_t;
                    acc.t2[row + j] += w * loc.mom.e_t2;
                }
            }
        }
        acc
    }

    fn update_responsibilities(&mut self, d: &Derived) {
        let k = d.k;
        let mut c = vec![0.0; k];
        for i in 0..self.len {
            c.copy_from_slice(&d.zeta);
            for e in &self.obs[self.obs_off[i]..self.obs_off[i + 1]] {
                let row = e.m as usize * k;
                let t2 = e.t * e.t;
                for j in 0..k {
                    let eta = d.e_eta[row + j];
                    c[j] += d.base[row + j] + eta.eta1 * e.t + eta.eta2 * t2;
                }
            }
            for ci in self.cens_off[i]..self.cens_off[i + 1] {
                let e = self.cens[ci];
                let loc = self.local[ci];
                let row = e.m as usize * k;
                for j in 0..k {
                    let eta = d.e_eta[row + j];
                    c[j] += loc.pi * (d.base[row + j] + eta.dot(&loc.mom));
                }
            }
            softmax_in_place(&mut c);
            self.resp[i * k..(i + 1) * k].copy_from_slice(&c);
        }
    }

    fn update_locals(&mut self, d: &Derived, rule: IncompleteUpdate) -> Result<()> {
        let k = d.k;
        let mut e_eta = vec![GaussianNatural { eta1: 0.0, eta2: 0.0 }; k];
        for i in 0..self.len {
            let g = &self.resp[i * k..(i + 1) * k];
            for ci in self.cens_off[i]..self.cens_off[i + 1] {
                let e = self.cens[ci];
                let row = e.m as usize * k;
                e_eta.copy_from_slice(&d.e_eta[row..row + k]);
                let new_eta = local_eta(g, &e_eta);
                let loc = &mut self.local[ci];
                let (mean, sd) = (new_eta.mean(), new_eta.sd());
                if !(mean.is_finite() && sd > 0.0 && sd.is_finite()) {
                    return Err(Error::Consistency(format!("degenerate local onset for condition {}", e.m)));
                }
                if e.side == Side::Incomplete {
                    let (mom, ln_mass) = left_truncated_with_mass(mean, sd, e.bound);
                    let logit = match rule {
                        IncompleteUpdate::Literal => (0..k)
                            .map(|j| g[j] * (d.base[row + j] + e_eta[j].dot(&loc.mom)))
                            .sum::<f64>(),
                        IncompleteUpdate::MeanField => {
                            let lin: f64 =
                                (0..k).map(|j| g[j] * (d.lambda[row + j] + d.e_log_g[row + j])).sum();
                            lin - new_eta.log_g() + ln_mass
                        }
                    };
                    if !logit.is_finite() {
                        return Err(Error::Consistency(format!(
                            "non-finite presence logit for condition {}",
                            e.m
                        )));
                    }
                    loc.pi = logistic(logit);
                    loc.mom = mom;
                } else {
                    loc.mom = truncated_normal_moments(mean, sd, e.truncation())?;
                }
                loc.eta = new_eta;
            }
        }
        Ok(())
    }
}

/// Variational state: global parameters plus all per-individual locals.
pub struct VbEngine {
    hyper: Hyperparameters,
    m: usize,
    k: usize,
    chunks: Vec<Chunk>,
    globals: GlobalParams,
    options: FitOptions,
    trace: Vec<f64>,
}

/// Everything a fit produces.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: FittedModel,
    /// δ per iteration.
    pub trace: Vec<f64>,
    /// Final responsibilities for the training individuals (N×K).
    pub responsibilities: Array2<f64>,
}

/// Dirichlet(1) responsibilities, one row per individual.
pub fn random_responsibilities(n: usize, k: usize, seed: u64) -> Result<Array2<f64>> {
    if k < 1 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n, k));
    for mut row in out.rows_mut() {
        let mut sum = 0.0;
        for x in row.iter_mut() {
            let e: f64 = Exp1.sample(&mut rng);
            *x = e;
            sum += e;
        }
        row.mapv_inplace(|x| x / sum);
    }
    Ok(out)
}

impl VbEngine {
    /// Build an engine with Dirichlet(1) initial responsibilities drawn from `options.seed`.
    pub fn new(ds: &Dataset, hyper: &Hyperparameters, options: FitOptions) -> Result<Self> {
        let resp = random_responsibilities(ds.n(), hyper.k(), options.seed)?;
        Self::with_responsibilities(ds, hyper, resp, options)
    }

    /// Build an engine from given initial responsibilities. Latent presence
    /// starts at 0.5 and latent onsets at the responsibility-weighted prior
    /// expected naturals.
    pub fn with_responsibilities(
        ds: &Dataset,
        hyper: &Hyperparameters,
        resp: Array2<f64>,
        options: FitOptions,
    ) -> Result<Self> {
        hyper.validate()?;
        ensure_valid(ds)?;
        let (m, k) = (ds.m(), hyper.k());
        if hyper.m() != m {
            return Err(Error::DimensionMismatch(format!(
                "hyperparameters cover {} conditions, data has {m}",
                hyper.m()
            )));
        }
        if resp.dim() != (ds.n(), k) {
            return Err(Error::DimensionMismatch(format!(
                "initial responsibilities must be {}x{k}",
                ds.n()
            )));
        }
        let prior_eta: Vec<GaussianNatural> = hyper.nig.iter().map(|p| p.expected_natural()).collect();
        let mut chunks = Vec::new();
        for (ci, block) in ds.individuals.chunks(CHUNK).enumerate() {
            let mut chunk = Chunk {
                len: block.len(),
                obs_off: vec![0],
                obs: Vec::new(),
                cens_off: vec![0],
                cens: Vec::new(),
                local: Vec::new(),
                resp: Vec::with_capacity(block.len() * k),
            };
            for (i, tr) in block.iter().enumerate() {
                let g = resp.row(ci * CHUNK + i).to_vec();
                chunk.resp.extend_from_slice(&g);
                for j in 0..m {
                    let side = match (tr.kappa[j], tr.d[j]) {
                        (CensorMark::Observed, Presence::Present) => {
                            let t = tr.t[j].expect("validated");
                            chunk.obs.push(ObsEntry { m: j as u32, t });
                            continue;
                        }
                        (CensorMark::Observed, _) => continue,
                        (CensorMark::Unreliable, _) => Side::Unreliable,
                        (CensorMark::Incomplete, _) => Side::Incomplete,
                    };
                    let bound = match side {
                        Side::Unreliable => tr.rho,
                        Side::Incomplete => tr.tau,
                    };
                    let eta = local_eta(&g, &prior_eta[j * k..(j + 1) * k]);
                    let cens = CensEntry { m: j as u32, side, bound };
                    let mom = truncated_normal_moments(eta.mean(), eta.sd(), cens.truncation())?;
                    chunk.cens.push(cens);
                    chunk.local.push(Local { pi: if side == Side::Incomplete { 0.5 } else { 1.0 }, eta, mom });
                }
                chunk.obs_off.push(chunk.obs.len());
                chunk.cens_off.push(chunk.cens.len());
            }
            chunks.push(chunk);
        }
        Ok(Self {
            globals: GlobalParams::from_prior(hyper),
            hyper: hyper.clone(),
            m,
            k,
            chunks,
            options,
            trace: Vec::new(),
        })
    }

    pub fn globals(&self) -> &GlobalParams {
        &self.globals
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn epsilon(&self) -> f64 {
        self.options.epsilon.unwrap_or_else(|| default_epsilon(self.m, self.k))
    }

    /// Expected sufficient statistics under the current locals.
    pub fn accumulate(&self) -> Accumulators {
        let (m, k) = (self.m, self.k);
        let total = match self.options.reduction {
            Reduction::Deterministic => {
                let parts: Vec<ChunkAccum> = self.chunks.par_iter().map(|c| c.accumulate(m, k)).collect();
                parts
                    .iter()
                    .fold(ChunkAccum::zeros(m, k), |acc, p| acc.add(p))
            }
            Reduction::Unordered => self
                .chunks
                .par_iter()
                .map(|c| c.accumulate(m, k))
                .reduce(|| ChunkAccum::zeros(m, k), |a, b| a.add(&b)),
        };
        total.into_accumulators(m, k)
    }

    /// One full iteration; returns δ.
    pub fn step(&mut self) -> Result<f64> {
        let acc = self.accumulate();
        let next = update_global(&self.hyper, &acc)?;
        let delta = next.distance(&self.globals);
        self.globals = next;
        let derived = Derived::new(&self.globals)?;
        let rule = self.options.incomplete_update;
        self.chunks.par_iter_mut().try_for_each(|c| {
            c.update_responsibilities(&derived);
            c.update_locals(&derived, rule)
        })?;
        self.trace.push(delta);
        Ok(delta)
    }

    /// Iterate until δ < ε or `max_iter` iterations have run.
    pub fn run(&mut self) -> Result<bool> {
        let eps = self.epsilon();
        for it in 0..self.options.max_iter {
            let delta = self.step()?;
            if (it + 1) % 100 == 0 {
                info!("iteration {} delta {delta:.4e} (epsilon {eps:.4e})", it + 1);
            } else {
                debug!("iteration {} delta {delta:.6e}", it + 1);
            }
            if delta < eps {
                return Ok(true);
            }
        }
        Ok(false)
    }

    pub fn responsibilities(&self) -> Array2<f64> {
        let n: usize = self.chunks.iter().map(|c| c.len).sum();
        let flat: Vec<f64> = self.chunks.iter().flat_map(|c| c.resp.iter().copied()).collect();
        Array2::from_shape_vec((n, self.k), flat).expect("shape")
    }

    /// Latent presence probabilities of Incomplete entries as (individual, condition, π*).
    pub fn incomplete_presence(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        let mut base = 0;
        for c in &self.chunks {
            for i in 0..c.len {
                for ci in c.cens_off[i]..c.cens_off[i + 1] {
                    if c.cens[ci].side == Side::Incomplete {
                        out.push((base + i, c.cens[ci].m as usize, c.local[ci].pi));
                    }
                }
            }
            base += c.len;
        }
        out
    }

    pub fn finish(self, conditions: Vec<crate::model::ConditionMeta>, converged: bool) -> Result<FitOutput> {
        let responsibilities = self.responsibilities();
        let eps = self.epsilon();
        let meta = FitMeta {
            iterations: self.trace.len(),
            final_delta: self.trace.last().copied().unwrap_or(0.0),
            converged,
            seed: self.options.seed,
            epsilon: eps,
            hyperparameters: self.hyper,
        };
        let g = self.globals;
        let model = FittedModel::from_posterior(conditions, g.theta_star, g.a_star, g.b_star, g.nig_star, meta)?;
        Ok(FitOutput { model, trace: self.trace, responsibilities })
    }
}

/// Fit the model with Dirichlet(1) initialization from `options.seed`.
pub fn fit(ds: &Dataset, hyper: &Hyperparameters, options: FitOptions) -> Result<FitOutput> {
    let mut engine = VbEngine::new(ds, hyper, options)?;
    let converged = engine.run()?;
    if !converged {
        warn!(
            "no convergence after {} iterations (last delta {:.3e}, epsilon {:.3e})",
            engine.trace.len(),
            engine.trace.last().copied().unwrap_or(f64::NAN),
            engine.epsilon()
        );
    }
    engine.finish(ds.conditions.clone(), converged)
}
