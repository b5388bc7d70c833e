use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use accrual_core::engine::{fit, FitOptions, IncompleteUpdate, Reduction};
use accrual_core::eval::{
    cluster_recovery, holdout_protocol, k_sweep, test_responsibilities, uniform_age_protocol, HoldoutOptions,
    PresenceMetrics, UniformAge,
};
use accrual_core::io::{
    load_dataset, load_truth, read_dataset, read_json, save_dataset, save_model, save_trace, save_truth, write_json,
    DatasetPaths, FitConfigFile, LoadOptions, SimConfigFile,
};
use accrual_core::model::Dataset;
use accrual_core::synth::{generate, Split};
use accrual_core::wire::{forecast, sha256_hex, ForecastError, ForecastResponse, PatientQuery};
use accrual_service::{AppState, LoadedModel};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

const FORMATS: &str = "\
FILE FORMATS
  Dataset directory (simulate output, --data, --test):
    individuals.csv   id,sex,baseline_age,extraction_age,vital_status
                      sex: male|female|empty; vital_status: alive|dead
    events.csv        id,condition_code,age_at_diagnosis
    conditions.csv    code,name,sex_specific,lifelong
                      sex_specific: male|empty; lifelong: true|false
    clusters.csv      id,cluster                    (ground truth, simulated data only)
    latent_onsets.csv id,condition_code,onset_age   (ground truth, simulated data only)
  Model file: JSON document with format \"accrual-model\" and schema_version \"1\".
  Config files: flat TOML. Simulation keys mirror the generator settings
    (preset, n, m, k, cluster_weight_range, prevalence_prior, onset_prior,
    baseline_range, followup_years, death_prob, train_fraction, seed); fit keys are
    k, tol, max_iter, seed, reduction, incomplete_update, prior_theta, prior_a,
    prior_b, prior_u, prior_v, prior_alpha, prior_beta. Flags override file values.
  Patient file (predict): JSON
    {\"sex\": \"male\", \"baseline_age\": 40, \"current_age\": 60,
     \"observed\": [{\"code\": \"C05\", \"age\": 54}], \"unreliable\": [\"C02\"],
     \"absent\": [], \"horizon\": 10, \"grid_step\": 1}
  Predict output directory: profile.json (same body as POST /v1/forecast),
    clusters.csv (cluster,probability), risks.csv (code,name,status,
    total_future_risk,population_risk[,prob_within,map_onset]), curves.csv (code,age,risk).

ENVIRONMENT
  ACCRUAL_THREADS   default worker count for --threads
  RUST_LOG          log filter (default: info)";

#[derive(Parser, Debug)]
#[command(name = "accrual", version, about = "Cluster and forecast long-term-condition accrual", after_long_help = FORMATS)]
struct Cli {
    /// Worker threads for parallel work (0 = all cores).
    #[arg(long, global = true, env = "ACCRUAL_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with ground truth.
    Simulate(SimulateArgs),
    /// Fit the model to a dataset.
    Fit(FitArgs),
    /// Score a model on held-out data.
    Evaluate(EvaluateArgs),
    /// Forecast for one patient file.
    Predict(PredictArgs),
    /// Fit over a range of K and report held-out AUROC.
    SweepK(SweepArgs),
    /// Serve the HTTP forecasting API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Smoke,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// TOML generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Settings used when no config is given (or for keys it leaves unset).
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct FitFlags {
    /// TOML fit settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Convergence threshold on the global-parameter change.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    reduction: Option<ReductionArg>,
    #[arg(long, value_enum)]
    incomplete_update: Option<UpdateArg>,
    /// Load despite semantic violations (offending events are dropped).
    #[arg(long)]
    permissive: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReductionArg {
    Deterministic,
    Unordered,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum UpdateArg {
    Literal,
    MeanField,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    flags: FitFlags,
    /// Model output path.
    #[arg(long)]
    out: PathBuf,
    /// Convergence trace output (default: <out stem>.trace.csv).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Protocol {
    UniformAge,
    #[value(name = "last-10-years")]
    Last10Years,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Held-out dataset directory (uniform-age also needs its ground truth).
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum)]
    protocol: Protocol,
    /// Seed for sampled current ages (uniform-age).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Count window-censored unreliable entries as positives (last-10-years).
    #[arg(long)]
    include_window_censored: bool,
    /// Per-condition breakdown CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    permissive: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Patient JSON file.
    #[arg(long)]
    patient: PathBuf,
    /// Window length for prob_within (overrides the patient file).
    #[arg(long)]
    horizon: Option<f64>,
    /// Curve age step in years (overrides the patient file).
    #[arg(long)]
    grid: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset directory (default: the training data).
    #[arg(long)]
    test: Option<PathBuf>,
    /// K values as lo:hi:step or a comma list.
    #[arg(long)]
    grid: String,
    #[command(flatten)]
    flags: FitFlags,
    /// Result table (default: standard output only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

/// Failures the user should fix on the command line (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot configure thread pool: {e}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::SweepK(a) => sweep(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut file = match &a.config {
        Some(p) => SimConfigFile::load(p)?,
        None => SimConfigFile::default(),
    };
    if let Some(p) = a.preset {
        if file.preset.is_none() {
            file.preset = Some(match p {
                PresetArg::Paper => accrual_core::io::Preset::Paper,
                PresetArg::Smoke => accrual_core::io::Preset::Smoke,
            });
        }
    }
    if a.seed.is_some() {
        file.seed = a.seed;
    }
    let cfg = file.resolve()?;
    let out = generate(&cfg)?;
    let write_split = |split: &Split, name: &str| -> Result<()> {
        let dir = a.out_dir.join(name);
        save_dataset(&split.data, &DatasetPaths::in_dir(&dir))?;
        save_truth(split, &dir)?;
        Ok(())
    };
    write_split(&out.train, "train")?;
    write_split(&out.test, "test")?;
    write_json(&out.params, a.out_dir.join("true_params.json"))?;
    fs::write(a.out_dir.join("sim_config.toml"), toml::to_string(&cfg)?)
        .with_context(|| format!("writing {}", a.out_dir.display()))?;
    let all = Dataset::new(
        out.train.data.conditions.clone(),
        out.train.data.individuals.iter().chain(&out.test.data.individuals).cloned().collect(),
    );
    let latent: usize = out
        .train
        .truth
        .iter()
        .chain(&out.test.truth)
        .map(|r| r.onset.iter().filter(|o| o.is_some()).count())
        .sum();
    println!(
        "N={} M={} K={} train={} test={} mean_conditions={:.3} mean_recorded={:.3} seed={}",
        cfg.n,
        cfg.m,
        cfg.k,
        out.train.data.n(),
        out.test.data.n(),
        latent as f64 / cfg.n.max(1) as f64,
        all.mean_present(),
        cfg.seed
    );
    Ok(())
}

fn load_data(dir: &Path, permissive: bool) -> Result<Dataset> {
    let paths = DatasetPaths::in_dir(dir);
    if permissive {
        return Ok(load_dataset(&paths, LoadOptions { permissive })?.dataset);
    }
    let report = read_dataset(&paths)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if !report.violations.is_empty() {
        for v in &report.violations {
            eprintln!("violation: {v}");
        }
        bail!("{} has {} validation violation(s)", dir.display(), report.violations.len());
    }
    Ok(report.dataset)
}

fn fit_settings(flags: &FitFlags, k: Option<usize>) -> Result<(FitConfigFile, FitOptions, usize)> {
    let mut file = match &flags.config {
        Some(p) => FitConfigFile::load(p)?,
        None => FitConfigFile::default(),
    };
    if flags.tol.is_some() {
        file.tol = flags.tol;
    }
    if flags.max_iter.is_some() {
        file.max_iter = flags.max_iter;
    }
    if flags.seed.is_some() {
        file.seed = flags.seed;
    }
    if let Some(r) = flags.reduction {
        file.reduction = Some(match r {
            ReductionArg::Deterministic => Reduction::Deterministic,
            ReductionArg::Unordered => Reduction::Unordered,
        });
    }
    if let Some(u) = flags.incomplete_update {
        file.incomplete_update = Some(match u {
            UpdateArg::Literal => IncompleteUpdate::Literal,
            UpdateArg::MeanField => IncompleteUpdate::MeanField,
        });
    }
    if k.is_some() {
        file.k = k;
    }
    let options = file.options();
    let k = file.k.unwrap_or(0);
    Ok((file, options, k))
}

fn fit_cmd(a: FitArgs) -> Result<()> {
    let (file, options, k) = fit_settings(&a.flags, a.k)?;
    if k == 0 {
        return Err(UsageError("--k (or k in the fit config) must be at least 1".into()).into());
    }
    let ds = load_data(&a.data, a.flags.permissive)?;
    let hyper = file.prior().build(ds.m(), k)?;
    let out = fit(&ds, &hyper, options)?;
    save_model(&out.model, &a.out)?;
    let trace_path = a.trace.unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
        a.out.with_file_name(format!("{stem}.trace.csv"))
    });
    save_trace(&out.trace, &trace_path)?;
    let meta = &out.model.fit_meta;
    if !meta.converged {
        log::warn!("model written but not converged; check {}", trace_path.display());
    }
    println!(
        "K={} N={} M={} iterations={} final_delta={:e} epsilon={:e} converged={}",
        k,
        ds.n(),
        ds.m(),
        meta.iterations,
        meta.final_delta,
        meta.epsilon,
        meta.converged
    );
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

fn print_metrics(m: &PresenceMetrics, recovery: Option<f64>) {
    println!("protocol\t{}", m.protocol);
    println!("scored_set\t{}", m.scored_set);
    println!("individuals\t{}", m.individuals);
    println!("scored\t{}", m.scored);
    println!("positives\t{}", m.positives);
    if let Some(r) = recovery {
        println!("cluster_recovery\t{r:.4}");
    }
    println!("accuracy\t{:.4}", m.accuracy);
    println!("auroc\t{}", fmt_opt(m.auroc));
    println!("mae\t{}", fmt_opt(m.mae));
}

fn write_breakdown(m: &PresenceMetrics, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["code", "positives", "negatives", "auroc", "mae"])?;
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    for c in &m.per_condition {
        w.write_record([c.code.clone(), c.positives.to_string(), c.negatives.to_string(), opt(c.auroc), opt(c.mae)])?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = accrual_core::io::load_model(&a.model)?;
    let data = load_data(&a.test, a.permissive)?;
    let has_truth = a.test.join("clusters.csv").exists();
    let (metrics, recovery) = match a.protocol {
        Protocol::UniformAge => {
            if !has_truth {
                bail!("uniform-age needs ground truth (clusters.csv, latent_onsets.csv) in {}", a.test.display());
            }
            let truth = load_truth(&data, &a.test)?;
            let split = Split { data, truth };
            let metrics = uniform_age_protocol(&model, &split, UniformAge::new(a.seed))?;
            let resp = test_responsibilities(&model, &split.data)?;
            let recovery = if model.k() == resp.ncols() && split.truth.iter().all(|r| r.cluster < model.k()) {
                Some(cluster_recovery(&split.labels(), resp.view())?)
            } else {
                None
            };
            (metrics, recovery)
        }
        Protocol::Last10Years => {
            let opts = HoldoutOptions { include_window_censored: a.include_window_censored, ..Default::default() };
            (holdout_protocol(&model, &data, opts)?, None)
        }
    };
    print_metrics(&metrics, recovery);
    if let Some(p) = &a.out {
        write_breakdown(&metrics, p)?;
    }
    if let Some(p) = &a.json {
        write_json(&metrics, p)?;
    }
    Ok(())
}

/// Same body the service returns for this query.
fn predict_response(model_path: &Path, query: &PatientQuery) -> Result<ForecastResponse> {
    let bytes = fs::read(model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let text = std::str::from_utf8(&bytes).context("model file is not UTF-8")?;
    let model = accrual_core::io::model_from_str(text, model_path)?;
    match forecast(&model, &sha256_hex(&bytes), query) {
        Ok(r) => Ok(r),
        Err(ForecastError::Query(accrual_core::wire::QueryError::Invalid(errs))) => {
            for e in &errs {
                eprintln!("violation: {}: {}", e.field, e.message);
            }
            bail!("patient file has {} violation(s)", errs.len())
        }
        Err(e) => Err(e.into()),
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut query: PatientQuery = read_json(&a.patient)?;
    if a.horizon.is_some() {
        query.horizon = a.horizon;
    }
    if a.grid.is_some() {
        query.grid_step = a.grid;
    }
    let resp = predict_response(&a.model, &query)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut body = serde_json::to_string(&resp)?;
    body.push('\n');
    fs::write(a.out.join("profile.json"), body)?;

    let mut w = csv::Writer::from_path(a.out.join("clusters.csv"))?;
    w.write_record(["cluster", "probability"])?;
    for (k, p) in resp.cluster_probs.iter().enumerate() {
        w.write_record([k.to_string(), p.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(a.out.join("risks.csv"))?;
    let mut header = vec!["code", "name", "status", "total_future_risk", "population_risk"];
    if resp.horizon.is_some() {
        header.extend(["prob_within", "map_onset"]);
    }
    w.write_record(&header)?;
    for c in &resp.conditions {
        let status = serde_json::to_value(c.status)?.as_str().unwrap_or_default().to_string();
        let mut row = vec![
            c.code.clone(),
            c.name.clone(),
            status,
            c.total_future_risk.to_string(),
            c.population_risk.to_string(),
        ];
        if resp.horizon.is_some() {
            row.push(c.prob_within.map_or_else(String::new, |x| x.to_string()));
            row.push(c.map_onset.map_or_else(String::new, |x| x.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(a.out.join("curves.csv"))?;
    w.write_record(["code", "age", "risk"])?;
    for c in &resp.conditions {
        for (age, risk) in c.curve.age.iter().zip(&c.curve.risk) {
            w.write_record([c.code.clone(), age.to_string(), risk.to_string()])?;
        }
    }
    w.flush()?;

    let probs: Vec<String> = resp.cluster_probs.iter().map(|p| format!("{p:.4}")).collect();
    println!("cluster_probs\t{}", probs.join(","));
    let mut ranked: Vec<_> = resp.conditions.iter().collect();
    ranked.sort_by(|x, y| y.total_future_risk.total_cmp(&x.total_future_risk));
    for c in ranked.iter().take(5) {
        println!("{}\t{:.4}", c.code, c.total_future_risk);
    }
    Ok(())
}

/// `lo:hi:step` (inclusive) or `a,b,c`.
fn parse_grid(s: &str) -> Result<Vec<usize>, UsageError> {
    let bad = || UsageError(format!("invalid K grid {s:?}; expected lo:hi:step or a comma list"));
    let grid: Vec<usize> = if s.contains(':') {
        let parts: Vec<usize> = s.split(':').map(|p| p.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
        let [lo, hi, step] = parts[..] else { return Err(bad()) };
        if step == 0 {
            return Err(bad());
        }
        (lo..=hi).step_by(step).collect()
    } else if s.trim().is_empty() {
        Vec::new()
    } else {
        s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?
    };
    if grid.is_empty() {
        return Err(UsageError(format!("K grid {s:?} is empty")));
    }
    if grid.contains(&0) {
        return Err(UsageError("K values must be at least 1".into()));
    }
    Ok(grid)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let grid = parse_grid(&a.grid)?;
    let (file, options, _) = fit_settings(&a.flags, None)?;
    let train = load_data(&a.data, a.flags.permissive)?;
    let test = match &a.test {
        Some(p) => load_data(p, a.flags.permissive)?,
        None => {
            log::warn!("no --test given; scoring on the training data");
            train.clone()
        }
    };
    let rows = k_sweep(&train, &test, &file.prior(), &grid, &options, HoldoutOptions::default())?;
    println!("K\tauroc\titerations\tconverged");
    for r in &rows {
        println!("{}\t{}\t{}\t{}", r.k, fmt_opt(r.auroc), r.iterations, r.converged);
    }
    if let Some(p) = &a.out {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
        w.write_record(["k", "auroc", "iterations", "converged"])?;
        for r in &rows {
            w.write_record([
                r.k.to_string(),
                r.auroc.map_or_else(String::new, |x| x.to_string()),
                r.iterations.to_string(),
                r.converged.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let loaded = LoadedModel::load(&a.model)?;
    log::info!("model {} (sha256 {})", a.model.display(), loaded.sha256);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(accrual_service::serve(SocketAddr::new(a.host, a.port), AppState::with_model(loaded)))?;
    Ok(())
}
