//! Acceptance checks AC1 to AC7. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! AC1 (full cohort) and AC6 fit the 160k-individual cohort twice and take
//! a long time on small machines.

use std::fs;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use accrual_core::engine::{fit, FitOptions, FitOutput};
use accrual_core::eval::{
    cluster_recovery, holdout_protocol, k_sweep_each, test_responsibilities, uniform_age_protocol,
    HoldoutOptions, PresenceMetrics, PriorTemplate, UniformAge,
};
use accrual_core::expfam::{truncated_normal_moments, truncation_mass, NIGParams, Truncation};
use accrual_core::forecast::{Forecaster, PartialTrajectory};
use accrual_core::model::{
    ConditionMeta, Dataset, FitMeta, FittedModel, Hyperparameters, Presence, Trajectory, VitalStatus,
};
use accrual_core::synth::{generate, SimConfig, SimOutput};
use accrual_service::{serve_listener, AppState, LoadedModel};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: &str, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    eprintln!("{id}: running");
    let start = Instant::now();
    let o = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("{id} {verdict} {title}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
    std::io::stdout().flush().ok();
    o.pass
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

// ---------- independent numerics used as oracles ----------

/// Adaptive Gauss–Kronrod (7/15) on [a, b].
fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    const XK: [f64; 8] = [
        0.991455371120812639206854697526329,
        0.949107912342758524526189684047851,
        0.864864423359769072789712788640926,
        0.741531185599394439863864773280788,
        0.586087235467691130294144845693013,
        0.405845151377397166906606412076961,
        0.207784955007898467600689403773245,
        0.000000000000000000000000000000000,
    ];
    const WK: [f64; 8] = [
        0.022935322010529224963732008058970,
        0.063092092629978553290700663189204,
        0.104790010322250183839876322541518,
        0.140653259715525918745189590510238,
        0.169004726639267902826583426598550,
        0.190350578064785409913256402421014,
        0.204432940075298892414161999234649,
        0.209482141084727828012999174891714,
    ];
    const WG: [f64; 4] = [
        0.129484966168869693270611432679082,
        0.279705391489276667901467771423780,
        0.381830050505118944950369775488975,
        0.417959183673469387755102040816327,
    ];
    fn gk(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let fc = f(c);
        let mut k = WK[7] * fc;
        let mut g = WG[3] * fc;
        for j in 0..7 {
            let x = h * XK[j];
            let s = f(c - x) + f(c + x);
            k += WK[j] * s;
            if j % 2 == 1 {
                g += WG[j / 2] * s;
            }
        }
        (k * h, ((k - g) * h).abs())
    }
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk(f, a, b);
        if err <= tol || depth > 40 {
            return v;
        }
        let c = 0.5 * (a + b);
        rec(f, a, c, 0.5 * tol, depth + 1) + rec(f, c, b, 0.5 * tol, depth + 1)
    }
    rec(f, a, b, tol, 0)
}

/// Student-t written out from its textbook density.
#[derive(Clone, Copy)]
struct RefT {
    df: f64,
    loc: f64,
    scale: f64,
}

impl RefT {
    fn from_nig(p: &NIGParams) -> Self {
        Self { df: 2.0 * p.alpha, loc: p.u, scale: (p.beta * (p.v + 1.0) / (p.alpha * p.v)).sqrt() }
    }

    fn pdf(&self, t: f64) -> f64 {
        let z = (t - self.loc) / self.scale;
        let ln_c = libm::lgamma(0.5 * (self.df + 1.0))
            - libm::lgamma(0.5 * self.df)
            - 0.5 * (self.df * std::f64::consts::PI).ln()
            - self.scale.ln();
        (ln_c - 0.5 * (self.df + 1.0) * (1.0 + z * z / self.df).ln()).exp()
    }

    fn dpdf(&self, t: f64) -> f64 {
        let x = t - self.loc;
        self.pdf(t) * (-(self.df + 1.0) * x / (self.df * self.scale * self.scale + x * x))
    }

    /// ∫ₜ^∞ pdf, via t = loc + scale·tan φ.
    fn sf(&self, t: f64) -> f64 {
        let phi0 = ((t - self.loc) / self.scale).atan();
        let g = |phi: f64| {
            let c = phi.cos();
            if c <= 0.0 {
                return 0.0;
            }
            self.pdf(self.loc + self.scale * phi.tan()) * self.scale / (c * c)
        };
        integrate(&g, phi0, std::f64::consts::FRAC_PI_2, 1e-15)
    }
}

/// Predictive density as the ratio of NIG normalizers after and before one
/// observation at t.
fn normalizer_ratio_density(p: &NIGParams, t: f64) -> f64 {
    let ln_z = |v: f64, a: f64, b: f64| libm::lgamma(a) - a * b.ln() + 0.5 * (2.0 * std::f64::consts::PI / v).ln();
    let v1 = p.v + 1.0;
    let a1 = p.alpha + 0.5;
    let b1 = p.beta + p.v * (t - p.u) * (t - p.u) / (2.0 * v1);
    (ln_z(v1, a1, b1) - ln_z(p.v, p.alpha, p.beta) - 0.5 * (2.0 * std::f64::consts::PI).ln()).exp()
}

/// Standard normal conditioned on Z > a.
fn sample_tail(rng: &mut ChaCha8Rng, a: f64) -> f64 {
    if a <= 0.5 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > a {
                return z;
            }
        }
    }
    // exponential proposal with the optimal rate
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let z = a + e / lambda;
        let u: f64 = rng.gen();
        if u <= (-0.5 * (z - lambda) * (z - lambda)).exp() {
            return z;
        }
    }
}

// ---------- AC2 ----------

fn ac2() -> Outcome {
    let (n, m) = (400, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut individuals = Vec::new();
    for i in 0..n {
        let rho = rng.gen_range(20.0..60.0);
        let mut tr = Trajectory::blank(format!("p{i}"), None, rho, rho + 30.0, VitalStatus::Dead, m);
        for j in 0..m {
            if rng.gen::<f64>() < 0.3 + 0.2 * j as f64 {
                tr.set_observed_present(j, rng.gen_range(rho + 0.01..rho + 30.0));
            } else {
                tr.set_observed_absent(j);
            }
        }
        individuals.push(tr);
    }
    let ds = Dataset::new((0..m).map(|j| ConditionMeta::plain(format!("C{j}"))).collect(), individuals);
    let prior = NIGParams { u: 50.0, v: 0.3, alpha: 5.0, beta: 750.0 };
    let hyper = Hyperparameters::uniform(m, 1, 1.0, 1.0, 1.0, prior).unwrap();
    let out = fit(&ds, &hyper, FitOptions { max_iter: 2, ..Default::default() }).unwrap();
    let model = &out.model;

    let mut worst: f64 = rel_err(model.theta_star[0], 1.0 + n as f64);
    for j in 0..m {
        let ts: Vec<f64> = ds.individuals.iter().filter_map(|tr| tr.t[j].filter(|_| tr.d[j] == Presence::Present)).collect();
        let cnt = ts.len() as f64;
        let mean = ts.iter().sum::<f64>() / cnt;
        let ss: f64 = ts.iter().map(|t| (t - mean) * (t - mean)).sum();
        let v = prior.v + cnt;
        let u = (prior.v * prior.u + cnt * mean) / v;
        let alpha = prior.alpha + 0.5 * cnt;
        let beta = prior.beta + 0.5 * ss + prior.v * cnt * (mean - prior.u).powi(2) / (2.0 * v);
        let got = model.nig_star[[j, 0]];
        for (g, e) in [
            (model.a_star[[j, 0]], 1.0 + cnt),
            (model.b_star[[j, 0]], 1.0 + n as f64 - cnt),
            (got.u, u),
            (got.v, v),
            (got.alpha, alpha),
            (got.beta, beta),
        ] {
            worst = worst.max(rel_err(g, e));
        }
    }
    let it = model.fit_meta.iterations;
    outcome(
        worst <= 1e-8 && it <= 2 && model.fit_meta.converged,
        format!("max relative error {worst:.2e}, converged={} after {it} iterations", model.fit_meta.converged),
    )
}

// ---------- AC3 ----------

fn ac3() -> Outcome {
    const DRAWS: usize = 10_000_000;
    let means = [-3.0, 0.0, 35.0, 62.5, 90.0];
    let sds = [0.4, 1.0, 8.66, 25.0];
    let offsets = [-5.0, -1.5, 0.0, 2.0, 5.0];
    let mut grid = Vec::new();
    for &mu in &means {
        for &sd in &sds {
            for &z in &offsets {
                for left in [true, false] {
                    grid.push((mu, sd, mu + z * sd, left));
                }
            }
        }
    }
    assert_eq!(grid.len(), 200);
    let zs: Vec<[f64; 2]> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(mu, sd, bound, left))| {
            let mut rng = ChaCha8Rng::seed_from_u64(3_000 + i as u64);
            // Z > a for left truncation; Z < a handled as −Z > −a
            let a = (bound - mu) / sd;
            let sign = if left { 1.0 } else { -1.0 };
            let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..DRAWS {
                let z = sign * sample_tail(&mut rng, sign * a);
                let z2 = z * z;
                s1 += z;
                s2 += z2;
                s3 += z2 * z;
                s4 += z2 * z2;
            }
            let nf = DRAWS as f64;
            let (m1, m2, m3, m4) = (s1 / nf, s2 / nf, s3 / nf, s4 / nf);
            let var_z = m2 - m1 * m1;
            let mc_t = mu + sd * m1;
            let mc_t2 = mu * mu + 2.0 * mu * sd * m1 + sd * sd * m2;
            let se_t = (sd * sd * var_z / nf).sqrt();
            let var_t2 = 4.0 * mu * mu * sd * sd * var_z
                + 4.0 * mu * sd.powi(3) * (m3 - m1 * m2)
                + sd.powi(4) * (m4 - m2 * m2);
            let se_t2 = (var_t2 / nf).sqrt();
            let trunc = if left { Truncation::Left(bound) } else { Truncation::Right(bound) };
            let an = truncated_normal_moments(mu, sd, trunc).unwrap();
            let zz = [(an.e_t - mc_t) / se_t, (an.e_t2 - mc_t2) / se_t2];
            zz
        })
        .collect();
    let all: Vec<f64> = zs.iter().flatten().map(|z| z.abs()).collect();
    let max_z = all.iter().cloned().fold(0.0, f64::max);
    let beyond3 = all.iter().filter(|&&z| z > 3.0).count();

    // ±40 sd sweep
    let mut bad = 0usize;
    let mut checked = 0usize;
    for &mu in &[0.0, 50.0, -20.0] {
        for &sd in &[0.3, 1.0, 12.0] {
            for i in 0..=1600 {
                let z = -40.0 + 0.05 * i as f64;
                let bound = mu + z * sd;
                for (trunc, left) in [(Truncation::Left(bound), true), (Truncation::Right(bound), false)] {
                    checked += 1;
                    let ok = match truncated_normal_moments(mu, sd, trunc) {
                        Ok(mo) => {
                            let var = mo.variance();
                            let side = if left { mo.e_t >= bound - 1e-9 * sd } else { mo.e_t <= bound + 1e-9 * sd };
                            mo.e_t.is_finite()
                                && mo.e_t2.is_finite()
                                && var >= 0.0
                                && var <= sd * sd * (1.0 + 1e-9)
                                && side
                                && truncation_mass(mu, sd, trunc).is_finite()
                        }
                        Err(_) => false,
                    };
                    if !ok {
                        bad += 1;
                    }
                }
            }
        }
    }
    // 400 comparisons: about one 3-SE exceedance is expected by chance alone
    let pass = max_z <= 5.0 && beyond3 <= 4 && bad == 0;
    outcome(
        pass,
        format!(
            "200 cases x 2 moments at 1e7 draws: max |z| {max_z:.2}, {beyond3} of 400 beyond 3 SE \
             (chance expectation 1.1); ±40 sd sweep: {bad} bad of {checked}"
        ),
    )
}

// ---------- AC4 ----------

fn ac4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ratio: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    let mut worst_fs: f64 = 0.0;
    for _ in 0..100 {
        let p = NIGParams {
            u: rng.gen_range(20.0..80.0),
            v: rng.gen_range(0.1..50.0),
            alpha: rng.gen_range(1.0..100.0),
            beta: rng.gen_range(1.0..5000.0),
        };
        let st = p.predictive();
        for s in [-8.0, -4.0, -2.0, -1.0, 0.0, 0.5, 1.0, 3.0, 8.0] {
            let t = p.u + s * st.scale;
            let got = p.predictive_density(t);
            let want = normalizer_ratio_density(&p, t);
            worst_ratio = worst_ratio.max((got - want).abs() / want);
            worst_fs = worst_fs.max((p.predictive_cdf(t) + p.predictive_survival(t) - 1.0).abs());
        }
        for t in [-1e6, -50.0, 0.0, 110.0, 1e6] {
            worst_fs = worst_fs.max((p.predictive_cdf(t) + p.predictive_survival(t) - 1.0).abs());
        }
        let g = |phi: f64| {
            let c = phi.cos();
            if c <= 0.0 {
                return 0.0;
            }
            p.predictive_density(st.loc + st.scale * phi.tan()) * st.scale / (c * c)
        };
        let h = std::f64::consts::FRAC_PI_2;
        let total = integrate(&g, -h, h, 1e-12);
        worst_norm = worst_norm.max((total - 1.0).abs());
    }
    outcome(
        worst_ratio <= 1e-10 && worst_norm <= 1e-6 && worst_fs <= 1e-12,
        format!(
            "100 random NIG: Student-t vs normalizer ratio rel err {worst_ratio:.2e}, \
             |∫p − 1| {worst_norm:.2e}, |F + S − 1| {worst_fs:.2e}"
        ),
    )
}

// ---------- AC5 ----------

fn toy_model() -> FittedModel {
    let nig = |u: f64, v: f64, a: f64, sd: f64| NIGParams { u, v, alpha: a, beta: a * sd * sd };
    let nig_star = array![
        [nig(45.0, 12.0, 6.0, 7.7), nig(60.0, 8.0, 4.0, 9.5)],
        [nig(58.0, 10.0, 7.0, 7.1), nig(52.0, 15.0, 9.0, 6.3)],
        [nig(70.0, 5.0, 3.5, 10.0), nig(48.0, 20.0, 12.0, 5.5)]
    ];
    let a = array![[6.0, 1.0], [2.0, 7.0], [5.0, 5.0]];
    let b = array![[4.0, 9.0], [8.0, 3.0], [5.0, 5.0]];
    let meta = FitMeta {
        iterations: 0,
        final_delta: 0.0,
        converged: true,
        seed: 0,
        epsilon: 0.0,
        hyperparameters: Hyperparameters::weakly_informative(3, 2),
    };
    let conditions = ["A", "B", "C"].iter().map(|c| ConditionMeta::plain(*c)).collect();
    FittedModel::from_posterior(conditions, vec![3.0, 1.0], a, b, nig_star, meta).unwrap()
}

/// Direct evaluation of the forecasting formulas for the toy model.
struct Direct {
    phi: Vec<f64>,
    tau: f64,
    pi: Array2<f64>,
    t: Array2<RefT>,
}

impl Direct {
    fn new(model: &FittedModel, p: &PartialTrajectory, absent: &[usize]) -> Self {
        let t = model.nig_star.mapv(|q| RefT::from_nig(&q));
        let pi = model.pi_bar.clone();
        let mut w: Vec<f64> = model.theta_bar.clone();
        for (k, wk) in w.iter_mut().enumerate() {
            for m in 0..3 {
                let tk = t[[m, k]];
                let pk = pi[[m, k]];
                if let Some(&(_, age)) = p.observed.iter().find(|o| o.0 == m) {
                    *wk *= pk * tk.pdf(age);
                } else if p.unreliable.contains(&m) {
                    *wk *= pk * (1.0 - tk.sf(p.rho_prime));
                } else if absent.contains(&m) {
                    *wk *= 1.0 - pk;
                } else {
                    *wk *= 1.0 - pk * (1.0 - tk.sf(p.tau_prime));
                }
            }
        }
        let z: f64 = w.iter().sum();
        Self { phi: w.iter().map(|x| x / z).collect(), tau: p.tau_prime, pi, t }
    }

    fn pi_tilde(&self, m: usize, k: usize) -> f64 {
        let s = self.t[[m, k]].sf(self.tau);
        let p = self.pi[[m, k]];
        p * s / (p * s + 1.0 - p)
    }

    fn risk(&self, m: usize, g: f64) -> f64 {
        (0..2)
            .map(|k| {
                let t = self.t[[m, k]];
                self.phi[k] * self.pi_tilde(m, k) * (1.0 - t.sf(g) / t.sf(self.tau))
            })
            .sum()
    }

    fn total(&self, m: usize) -> f64 {
        (0..2).map(|k| self.phi[k] * self.pi_tilde(m, k)).sum()
    }

    /// Mode of the onset density on [τ′, τ′ + h].
    fn mode(&self, m: usize, h: f64) -> f64 {
        let w: Vec<f64> = (0..2).map(|k| self.phi[k] * self.pi_tilde(m, k) / self.t[[m, k]].sf(self.tau)).collect();
        let f = |x: f64| (0..2).map(|k| w[k] * self.t[[m, k]].pdf(x)).sum::<f64>();
        let d = |x: f64| (0..2).map(|k| w[k] * self.t[[m, k]].dpdf(x)).sum::<f64>();
        let n = 100_000;
        let (mut bi, mut bv) = (0, f(self.tau));
        for i in 1..=n {
            let v = f(self.tau + h * i as f64 / n as f64);
            if v > bv {
                bi = i;
                bv = v;
            }
        }
        if bi == 0 || bi == n {
            return self.tau + h * bi as f64 / n as f64;
        }
        let (mut lo, mut hi) = (self.tau + h * (bi - 1) as f64 / n as f64, self.tau + h * (bi + 1) as f64 / n as f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if d(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn ac5() -> Outcome {
    let model = toy_model();
    let f = Forecaster::new(&model);
    let mut q1 = PartialTrajectory::empty(40.0, 55.0);
    q1.observed.push((0, 48.0));
    let mut q2 = PartialTrajectory::empty(40.0, 55.0);
    q2.unreliable.push(0);
    q2.absent.push(2);
    let q3 = PartialTrajectory::empty(30.0, 62.0);
    let mut worst: f64 = 0.0;
    let mut worst_mode: f64 = 0.0;
    for (p, absent) in [(&q1, vec![]), (&q2, vec![2]), (&q3, vec![])] {
        let d = Direct::new(&model, p, &absent);
        let got = f.cluster_posterior(p).unwrap();
        for k in 0..2 {
            worst = worst.max((got[k] - d.phi[k]).abs());
        }
        let q = f.query(p).unwrap();
        for m in 0..3 {
            if q.status[m] != accrual_core::forecast::ConditionStatus::Open {
                continue;
            }
            for k in 0..2 {
                worst = worst.max((f.surviving_presence_prob(m, k, p.tau_prime) - d.pi_tilde(m, k)).abs());
            }
            let grid: Vec<f64> = (0..=16).map(|i| p.tau_prime + 2.5 * i as f64).collect();
            for (g, r) in grid.iter().zip(f.risk_curve(&q, m, &grid).unwrap()) {
                worst = worst.max((r - d.risk(m, *g)).abs());
            }
            worst = worst.max((f.total_future_risk(&q, m) - d.total(m)).abs());
            for h in [5.0, 10.0, 30.0] {
                let w = f.predict_window(&q, m, h).unwrap();
                worst = worst.max((w.prob_within - d.risk(m, p.tau_prime + h)).abs());
                worst_mode = worst_mode.max((w.map_onset.unwrap() - d.mode(m, h)).abs());
            }
        }
    }

    // Monte Carlo over sample_future for q1
    let d = Direct::new(&model, &q1, &[]);
    let sampler = f.future_sampler(&q1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1_000_000;
    let mut present = [0usize; 3];
    let mut within = [0usize; 3];
    for _ in 0..n {
        for e in sampler.sample(&mut rng) {
            present[e.condition] += 1;
            if e.onset <= q1.tau_prime + 10.0 {
                within[e.condition] += 1;
            }
        }
    }
    let mut max_sigma: f64 = 0.0;
    for m in [1, 2] {
        for (count, p) in [(present[m], d.total(m)), (within[m], d.risk(m, q1.tau_prime + 10.0))] {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            max_sigma = max_sigma.max((count as f64 / n as f64 - p).abs() / sigma);
        }
    }
    outcome(
        worst <= 1e-10 && worst_mode <= 1e-10 && max_sigma <= 3.0 && present[0] == 0,
        format!(
            "max |formula diff| {worst:.2e}, MAP onset diff {worst_mode:.2e}, \
             sample_future at 1e6 draws within {max_sigma:.2} sigma"
        ),
    )
}

// ---------- AC1 / AC6 ----------

fn paper_options() -> FitOptions {
    FitOptions::default()
}

struct UniformAgeResult {
    recovery: f64,
    metrics: PresenceMetrics,
}

fn uniform_age(model: &FittedModel, sim: &SimOutput) -> UniformAgeResult {
    let metrics = uniform_age_protocol(model, &sim.test, UniformAge::new(1)).unwrap();
    let resp = test_responsibilities(model, &sim.test.data).unwrap();
    let recovery = cluster_recovery(&sim.test.labels(), resp.view()).unwrap();
    UniformAgeResult { recovery, metrics }
}

fn describe(r: &UniformAgeResult) -> String {
    format!(
        "recovery {:.3}, accuracy {:.3}, AUROC {:.4}, MAE {:.2}",
        r.recovery,
        r.metrics.accuracy,
        r.metrics.auroc.unwrap_or(f64::NAN),
        r.metrics.mae.unwrap_or(f64::NAN)
    )
}

struct Smoke {
    sim: SimOutput,
    model: FittedModel,
}

fn ac1_smoke() -> (Outcome, Option<Smoke>) {
    let start = Instant::now();
    let sim = generate(&SimConfig::smoke()).unwrap();
    let hyper = PriorTemplate::default().build(sim.train.data.m(), 6).unwrap();
    let out = fit(&sim.train.data, &hyper, paper_options()).unwrap();
    let r = uniform_age(&out.model, &sim);
    let secs = start.elapsed().as_secs_f64();
    let pass = r.recovery >= 0.85 && r.metrics.auroc.is_some_and(|a| a >= 0.95) && secs <= 120.0;
    let detail = format!(
        "smoke N=20000 M=30 K=6: {}, {} iterations, {secs:.0}s (need recovery >= 0.85, AUROC >= 0.95, <= 120s)",
        describe(&r),
        out.model.fit_meta.iterations
    );
    (outcome(pass, detail), Some(Smoke { sim, model: out.model }))
}

struct Full {
    detail: String,
    pass: bool,
    sweep: Option<(f64, f64)>,
}

/// Paper-scale cohort: K=2 and K=10 fits through `k_sweep`; the K=10 fit
/// also serves AC1.
fn full_cohort() -> Full {
    let t0 = Instant::now();
    let sim = generate(&SimConfig::paper()).unwrap();
    let sim_secs = t0.elapsed().as_secs_f64();
    let mut k10: Option<(FitOutput, f64)> = None;
    let mut last = Instant::now();
    let rows = k_sweep_each(
        &sim.train.data,
        &sim.test.data,
        &PriorTemplate::default(),
        &[2, 10],
        &paper_options(),
        HoldoutOptions::default(),
        |row, out| {
            let secs = last.elapsed().as_secs_f64();
            eprintln!("  K={} fitted: {} iterations, converged={}, {secs:.0}s", row.k, row.iterations, row.converged);
            if row.k == 10 {
                k10 = Some((out, secs));
            }
            last = Instant::now();
        },
    )
    .unwrap();
    let auroc = |k: usize| rows.iter().find(|r| r.k == k).and_then(|r| r.auroc).unwrap_or(f64::NAN);
    let (out, fit_secs) = k10.expect("K=10 fit");
    let t1 = Instant::now();
    let r = uniform_age(&out.model, &sim);
    let secs = sim_secs + fit_secs + t1.elapsed().as_secs_f64();
    let pass = r.recovery >= 0.88
        && r.metrics.accuracy >= 0.85
        && r.metrics.auroc.is_some_and(|a| a >= 0.97)
        && r.metrics.mae.is_some_and(|m| m <= 9.5)
        && secs <= 1800.0;
    let detail = format!(
        "full N=200000 M=80 K=10: {}, {} iterations, converged={}, {secs:.0}s on {} thread(s) \
         (need recovery >= 0.88, accuracy >= 0.85, AUROC >= 0.97, MAE <= 9.5, <= 1800s)",
        describe(&r),
        out.model.fit_meta.iterations,
        out.model.fit_meta.converged,
        rayon::current_num_threads()
    );
    Full { detail, pass, sweep: Some((auroc(2), auroc(10))) }
}

const BASELINE: &str = "tests/baselines/last10_smoke.json";

fn pinned_last10(smoke: &Smoke) -> (bool, String) {
    let got = holdout_protocol(&smoke.model, &smoke.sim.test.data, HoldoutOptions::default()).unwrap();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(BASELINE);
    if std::env::var_os("ACCRUAL_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let Ok(text) = fs::read_to_string(&path) else {
        return (false, format!("no baseline at {BASELINE}"));
    };
    let want: PresenceMetrics = serde_json::from_str(&text).unwrap();
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => rel_err(a, b) <= 1e-9,
        (None, None) => true,
        _ => false,
    };
    let same = got.scored == want.scored
        && got.positives == want.positives
        && close(Some(got.accuracy), Some(want.accuracy))
        && close(got.auroc, want.auroc)
        && close(got.mae, want.mae)
        && got.per_condition.len() == want.per_condition.len()
        && got.per_condition.iter().zip(&want.per_condition).all(|(a, b)| {
            a.code == b.code
                && a.positives == b.positives
                && a.negatives == b.negatives
                && close(a.auroc, b.auroc)
                && close(a.mae, b.mae)
        });
    let msg = format!(
        "last-10-years on smoke data: AUROC {:.4}, MAE {:.2}, {} scored pairs; {} pinned baseline",
        got.auroc.unwrap_or(f64::NAN),
        got.mae.unwrap_or(f64::NAN),
        got.scored,
        if same { "matches" } else { "differs from" }
    );
    (same, msg)
}

// ---------- AC7 ----------

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_accrual"))
        .env("RUST_LOG", "warn")
        .env_remove("ACCRUAL_THREADS")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn http_post(addr: std::net::SocketAddr, path: &str, body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "POST {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status = raw[9..12].parse().unwrap();
    let body = raw.split_once("\r\n\r\n").unwrap().1.to_string();
    (status, body)
}

fn ac7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    fs::write(d.join("sim.toml"), "preset = \"smoke\"\nn = 3000\nm = 12\nk = 4\ncluster_weight_range = [0.15, 0.4]\n")
        .unwrap();
    cli(&["simulate", "--config", &p("sim.toml"), "--seed", "7", "--out-dir", &p("s1")]);
    cli(&["simulate", "--config", &p("sim.toml"), "--seed", "7", "--out-dir", &p("s2")]);
    let mut same_sim = true;
    for f in ["train/individuals.csv", "train/events.csv", "test/events.csv", "train/clusters.csv", "true_params.json"] {
        same_sim &= fs::read(d.join("s1").join(f)).unwrap() == fs::read(d.join("s2").join(f)).unwrap();
    }
    let train = p("s1/train");
    let fit_args = |threads: &'static str, out: String| {
        vec![
            "--threads".to_string(),
            threads.to_string(),
            "fit".into(),
            "--data".into(),
            train.clone(),
            "--k".into(),
            "4".into(),
            "--max-iter".into(),
            "150".into(),
            "--reduction".into(),
            "deterministic".into(),
            "--out".into(),
            out,
        ]
    };
    for (threads, out) in [("1", p("m1.json")), ("4", p("m2.json"))] {
        let args = fit_args(threads, out);
        cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let same_fit = fs::read(d.join("m1.json")).unwrap() == fs::read(d.join("m2.json")).unwrap()
        && fs::read(d.join("m1.trace.csv")).unwrap() == fs::read(d.join("m2.trace.csv")).unwrap();

    let query = r#"{"sex": "female", "baseline_age": 42.5, "current_age": 61.25,
        "observed": [{"code": "C03", "age": 50.1}, {"code": "C07", "age": 58.0}],
        "unreliable": ["C01"], "absent": ["C11"], "horizon": 10, "grid_step": 0.5}"#;
    fs::write(d.join("patient.json"), query).unwrap();
    cli(&["predict", "--model", &p("m1.json"), "--patient", &p("patient.json"), "--out", &p("pred")]);
    let cli_body: Value = serde_json::from_str(&fs::read_to_string(d.join("pred/profile.json")).unwrap()).unwrap();

    let loaded = LoadedModel::load(d.join("m1.json")).unwrap();
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(serve_listener(listener, AppState::with_model(loaded)));
    let (status, body) = http_post(addr, "/v1/forecast", query);
    let svc_body: Value = serde_json::from_str(&body).unwrap();
    let parity = status == 200 && svc_body == cli_body;
    rt.shutdown_background();
    let conds = cli_body["conditions"].as_array().map_or(0, |c| c.len());
    outcome(
        same_sim && same_fit && parity,
        format!(
            "simulate repeat identical: {same_sim}; fit on 1 vs 4 threads identical: {same_fit}; \
             predict vs /v1/forecast (HTTP {status}, {conds} conditions) identical: {parity}"
        ),
    )
}

/// `ACCRUAL_ACCEPTANCE=AC2,AC5` restricts the run to the listed criteria.
fn wanted(id: &str) -> bool {
    match std::env::var("ACCRUAL_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').any(|x| x.trim().eq_ignore_ascii_case(id)),
        _ => true,
    }
}

fn main() {
    let mut ok = true;
    let quick: [(&str, &str, fn() -> Outcome); 5] = [
        ("AC2", "conjugate oracle", ac2),
        ("AC3", "truncated-moment oracle", ac3),
        ("AC4", "predictive-density oracles", ac4),
        ("AC5", "forecasting formula oracle", ac5),
        ("AC7", "determinism and parity", ac7),
    ];
    for (id, title, f) in quick {
        if wanted(id) {
            ok &= report(id, title, f);
        }
    }
    if !(wanted("AC1") || wanted("AC6")) {
        if !ok {
            std::process::exit(1);
        }
        return;
    }

    let mut smoke = None;
    let smoke_outcome = panic::catch_unwind(AssertUnwindSafe(|| {
        let (o, s) = ac1_smoke();
        smoke = s;
        o
    }))
    .unwrap_or_else(|_| outcome(false, "smoke run panicked"));
    eprintln!("AC1 smoke: {}", smoke_outcome.detail);
    // blessing only needs the smoke model
    if std::env::var_os("ACCRUAL_BLESS").is_some() {
        let (pin_ok, pin_msg) = smoke.as_ref().map_or((false, "no smoke model".into()), pinned_last10);
        eprintln!("blessed: {pin_msg}");
        std::process::exit(if pin_ok { 0 } else { 1 });
    }

    eprintln!("fitting the full cohort (K=2 and K=10)");
    let full = panic::catch_unwind(full_cohort).unwrap_or_else(|_| Full {
        detail: "full cohort run panicked".into(),
        pass: false,
        sweep: None,
    });

    if wanted("AC1") {
        ok &= report("AC1", "simulation replication", || {
            outcome(smoke_outcome.pass && full.pass, format!("{}; {}", smoke_outcome.detail, full.detail))
        });
    }
    if wanted("AC6") {
        ok &= report("AC6", "protocol coverage", || {
            let (sweep_ok, sweep_msg) = match full.sweep {
                Some((a2, a10)) => (
                    a10 - a2 > 0.05,
                    format!("k_sweep last-10-years AUROC K=2 {a2:.4}, K=10 {a10:.4}, gain {:.4} (need > 0.05)", a10 - a2),
                ),
                None => (false, "k_sweep did not run".into()),
            };
            let (pin_ok, pin_msg) = match &smoke {
                Some(s) => pinned_last10(s),
                None => (false, "no smoke model".into()),
            };
            outcome(
                sweep_ok && pin_ok,
                format!(
                    "{sweep_msg}; {pin_msg}; biobank targets (AUROC 0.86, MAE 9.97, K=50 elbow, cluster \
                     content) need the original cohort and are not reproducible here"
                ),
            )
        });
    }
    if !ok {
        std::process::exit(1);
    }
}
