//! Dataset tables, model documents, run configuration and ground-truth files.
//!
//! Datasets are three CSV tables (column order is fixed):
//!
//! * `individuals.csv`: `id,sex,baseline_age,extraction_age,vital_status`
//! * `events.csv`: `id,condition_code,age_at_diagnosis`
//! * `conditions.csv`: `code,name,sex_specific,lifelong`
//!
//! Censor marks are derived on load and never stored.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::{FitOptions, IncompleteUpdate, Reduction};
use crate::error::{Error, Result};
use crate::eval::PriorTemplate;
use crate::expfam::NIGParams;
use crate::model::{
    validate_dataset, CensorMark, ConditionMeta, Dataset, FitMeta, FittedModel, Hyperparameters, Presence, Sex,
    SexSpecific, Trajectory, VitalStatus,
};
use crate::synth::{LatentRecord, SimConfig, Split};

pub const MODEL_FORMAT: &str = "accrual-model";
pub const MODEL_SCHEMA_VERSION: &str = "1";

pub const INDIVIDUALS_HEADER: [&str; 5] = ["id", "sex", "baseline_age", "extraction_age", "vital_status"];
pub const EVENTS_HEADER: [&str; 3] = ["id", "condition_code", "age_at_diagnosis"];
pub const CONDITIONS_HEADER: [&str; 4] = ["code", "name", "sex_specific", "lifelong"];
pub const CLUSTERS_HEADER: [&str; 2] = ["id", "cluster"];
pub const LATENT_ONSETS_HEADER: [&str; 3] = ["id", "condition_code", "onset_age"];

/// Locations of the three dataset tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub individuals: PathBuf,
    pub events: PathBuf,
    pub conditions: PathBuf,
}

impl DatasetPaths {
    /// `individuals.csv`, `events.csv` and `conditions.csv` inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            individuals: dir.join("individuals.csv"),
            events: dir.join("events.csv"),
            conditions: dir.join("conditions.csv"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Report semantic violations as warnings instead of failing.
    pub permissive: bool,
}

/// A parsed dataset with everything noticed on the way in.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Notes that never block loading (e.g. ignored sex-excluded events).
    pub warnings: Vec<String>,
    /// Semantic problems; events behind them were dropped.
    pub violations: Vec<String>,
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn parse_err(path: &Path, line: u64, column: u64, message: impl Into<String>) -> Error {
    Error::Parse { path: display(path), line, column, message: message.into() }
}

struct Table {
    path: PathBuf,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path, header: &[&str]) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let found = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        let found: Vec<&str> = found.iter().collect();
        if found != header {
            return Err(parse_err(
                path,
                1,
                1,
                format!("expected header {:?}, found {:?}", header.join(","), found.join(",")),
            ));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != header.len() {
                return Err(parse_err(path, line, 1, format!("expected {} fields, found {}", header.len(), rec.len())));
            }
            rows.push((line, rec));
        }
        Ok(Self { path: path.to_path_buf(), rows })
    }

    fn err(&self, line: u64, col: usize, message: impl Into<String>) -> Error {
        parse_err(&self.path, line, col as u64 + 1, message)
    }

    fn float(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<f64> {
        let raw = &rec[col];
        match raw.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(self.err(line, col, format!("expected a finite number, found {raw:?}"))),
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let (line, column) = match e.position() {
        Some(p) => (p.line(), 1),
        None => (0, 0),
    };
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: display(path), source },
        kind => parse_err(path, line, column, format!("{kind:?}")),
    }
}

pub fn parse_sex(raw: &str) -> Option<Option<Sex>> {
    match raw.to_ascii_lowercase().as_str() {
        "" => Some(None),
        "m" | "male" => Some(Some(Sex::Male)),
        "f" | "female" => Some(Some(Sex::Female)),
        _ => None,
    }
}

fn sex_str(s: Option<Sex>) -> &'static str {
    match s {
        None => "",
        Some(Sex::Male) => "male",
        Some(Sex::Female) => "female",
    }
}

fn read_conditions(path: &Path) -> Result<Vec<ConditionMeta>> {
    let table = Table::read(path, &CONDITIONS_HEADER)?;
    let mut seen = HashMap::new();
    let mut out = Vec::with_capacity(table.rows.len());
    for (line, rec) in &table.rows {
        let code = rec[0].to_string();
        if code.is_empty() {
            return Err(table.err(*line, 0, "empty condition code"));
        }
        if let Some(first) = seen.insert(code.clone(), *line) {
            return Err(table.err(*line, 0, format!("duplicate condition code {code:?} (first on line {first})")));
        }
        let sex_specific = match rec[2].to_ascii_lowercase().as_str() {
            "" => None,
            "male" | "male_only" => Some(SexSpecific::MaleOnly),
            other => return Err(table.err(*line, 2, format!("sex_specific must be empty or \"male\", found {other:?}"))),
        };
        let lifelong = match rec[3].to_ascii_lowercase().as_str() {
            "true" | "1" => true,
            "false" | "0" | "" => false,
            other => return Err(table.err(*line, 3, format!("lifelong must be true or false, found {other:?}"))),
        };
        out.push(ConditionMeta { code, name: rec[1].to_string(), sex_specific, lifelong });
    }
    Ok(out)
}

/// Parse the three tables and derive censor marks. Semantic problems are
/// collected in the report rather than returned as errors.
pub fn read_dataset(paths: &DatasetPaths) -> Result<LoadReport> {
    let conditions = read_conditions(&paths.conditions)?;
    let code_index: HashMap<&str, usize> = conditions.iter().enumerate().map(|(i, c)| (c.code.as_str(), i)).collect();
    let m = conditions.len();

    let table = Table::read(&paths.individuals, &INDIVIDUALS_HEADER)?;
    let mut individuals = Vec::with_capacity(table.rows.len());
    let mut id_index = HashMap::with_capacity(table.rows.len());
    for (line, rec) in &table.rows {
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(table.err(*line, 0, "empty individual id"));
        }
        if id_index.insert(id.clone(), individuals.len()).is_some() {
            return Err(table.err(*line, 0, format!("duplicate individual id {id:?}")));
        }
        let sex = parse_sex(&rec[1])
            .ok_or_else(|| table.err(*line, 1, format!("sex must be male, female or empty, found {:?}", &rec[1])))?;
        let rho = table.float(*line, rec, 2)?;
        let tau = table.float(*line, rec, 3)?;
        let vital = match rec[4].to_ascii_lowercase().as_str() {
            "alive" => VitalStatus::Alive,
            "dead" => VitalStatus::Dead,
            other => return Err(table.err(*line, 4, format!("vital_status must be alive or dead, found {other:?}"))),
        };
        let mut tr = Trajectory::blank(id, sex, rho, tau, vital, m);
        for (j, meta) in conditions.iter().enumerate() {
            if meta.absence_is_certain(sex, tau) {
                tr.set_observed_absent(j);
            }
        }
        individuals.push(tr);
    }

    let table = Table::read(&paths.events, &EVENTS_HEADER)?;
    // earliest diagnosis per (individual, condition), independent of row order
    let mut first: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (line, rec) in &table.rows {
        let &i = id_index
            .get(&rec[0])
            .ok_or_else(|| table.err(*line, 0, format!("event for unknown individual {:?}", &rec[0])))?;
        let &j = code_index
            .get(&rec[1])
            .ok_or_else(|| table.err(*line, 1, format!("unknown condition code {:?}", &rec[1])))?;
        let age = table.float(*line, rec, 2)?;
        first.entry((i, j)).and_modify(|a| *a = a.min(age)).or_insert(age);
    }

    let mut warnings = Vec::new();
    let mut violations = Vec::new();
    for ((i, j), age) in first {
        let tr = &mut individuals[i];
        let meta = &conditions[j];
        let who = format!("individual {} condition {}", tr.id, meta.code);
        if meta.excluded_for(tr.sex) {
            warnings.push(format!("{who}: event ignored, condition does not apply to this sex (kept observed-absent)"));
            continue;
        }
        if age < 0.0 {
            violations.push(format!("{who}: diagnosis age {age} is negative; event dropped"));
            continue;
        }
        if age > tr.tau {
            violations.push(format!("{who}: diagnosis age {age} is after extraction age {}; event dropped", tr.tau));
            continue;
        }
        tr.record_diagnosis(j, age);
    }

    let dataset = Dataset::new(conditions, individuals);
    violations.extend(validate_dataset(&dataset).iter().map(|v| v.to_string()));
    Ok(LoadReport { dataset, warnings, violations })
}

/// Load a dataset, failing on any semantic violation unless permissive.
pub fn load_dataset(paths: &DatasetPaths, opts: LoadOptions) -> Result<LoadReport> {
    let report = read_dataset(paths)?;
    if !opts.permissive {
        if let Some(first) = report.violations.first() {
            return Err(Error::Validation(report.violations.len(), first.clone()));
        }
    }
    for w in report.warnings.iter().chain(&report.violations) {
        log::warn!("{w}");
    }
    Ok(report)
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| csv_err(path, e);
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the three tables. Unreliable entries are written with age = baseline.
pub fn save_dataset(ds: &Dataset, paths: &DatasetPaths) -> Result<()> {
    write_rows(
        &paths.conditions,
        &CONDITIONS_HEADER,
        ds.conditions.iter().map(|c| {
            [
                c.code.clone(),
                c.name.clone(),
                if c.sex_specific.is_some() { "male".into() } else { String::new() },
                c.lifelong.to_string(),
            ]
        }),
    )?;
    write_rows(
        &paths.individuals,
        &INDIVIDUALS_HEADER,
        ds.individuals.iter().map(|tr| {
            let vital = match tr.vital {
                VitalStatus::Alive => "alive",
                VitalStatus::Dead => "dead",
            };
            [tr.id.clone(), sex_str(tr.sex).into(), tr.rho.to_string(), tr.tau.to_string(), vital.into()]
        }),
    )?;
    let events = ds.individuals.iter().flat_map(|tr| {
        (0..tr.m()).filter_map(move |j| {
            let age = match (tr.kappa[j], tr.d[j]) {
                (CensorMark::Observed, Presence::Present) => tr.t[j]?,
                (CensorMark::Unreliable, _) => tr.rho,
                _ => return None,
            };
            Some([tr.id.clone(), ds.conditions[j].code.clone(), age.to_string()])
        })
    });
    write_rows(&paths.events, &EVENTS_HEADER, events)
}

/// Write true cluster labels and the uncensored onset ages of a split into `dir`.
pub fn save_truth(split: &Split, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let ids = split.data.individuals.iter().map(|t| &t.id);
    write_rows(
        &dir.join("clusters.csv"),
        &CLUSTERS_HEADER,
        ids.clone().zip(&split.truth).map(|(id, r)| [id.clone(), r.cluster.to_string()]),
    )?;
    let onsets = ids.zip(&split.truth).flat_map(|(id, r)| {
        r.onset.iter().enumerate().filter_map(move |(j, o)| {
            o.map(|t| [id.clone(), split.data.conditions[j].code.clone(), t.to_string()])
        })
    });
    write_rows(&dir.join("latent_onsets.csv"), &LATENT_ONSETS_HEADER, onsets)
}

/// Read ground truth written by `save_truth`, aligned with `ds`.
pub fn load_truth(ds: &Dataset, dir: impl AsRef<Path>) -> Result<Vec<LatentRecord>> {
    let dir = dir.as_ref();
    let index: HashMap<&str, usize> = ds.individuals.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let mut truth: Vec<Option<LatentRecord>> = vec![None; ds.n()];
    let table = Table::read(&dir.join("clusters.csv"), &CLUSTERS_HEADER)?;
    for (line, rec) in &table.rows {
        let &i = index
            .get(&rec[0])
            .ok_or_else(|| table.err(*line, 0, format!("unknown individual {:?}", &rec[0])))?;
        let cluster = rec[1]
            .parse::<usize>()
            .map_err(|_| table.err(*line, 1, format!("expected a cluster index, found {:?}", &rec[1])))?;
        truth[i] = Some(LatentRecord { cluster, onset: vec![None; ds.m()] });
    }
    let table = Table::read(&dir.join("latent_onsets.csv"), &LATENT_ONSETS_HEADER)?;
    for (line, rec) in &table.rows {
        let &i = index
            .get(&rec[0])
            .ok_or_else(|| table.err(*line, 0, format!("unknown individual {:?}", &rec[0])))?;
        let j = ds
            .condition_index(&rec[1])
            .ok_or_else(|| table.err(*line, 1, format!("unknown condition code {:?}", &rec[1])))?;
        let age = table.float(*line, rec, 2)?;
        let r = truth[i]
            .as_mut()
            .ok_or_else(|| table.err(*line, 0, format!("individual {:?} has no cluster label", &rec[0])))?;
        r.onset[j] = Some(age);
    }
    truth
        .into_iter()
        .zip(&ds.individuals)
        .map(|(r, tr)| r.ok_or_else(|| Error::Consistency(format!("no ground truth for individual {}", tr.id))))
        .collect()
}

/// Serialize as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    parse_err(path, e.line() as u64, e.column() as u64, e.to_string())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

/// Matrix of NIG parameters stored as four M×K tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NigTables {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl NigTables {
    fn from_array(a: &Array2<NIGParams>) -> Self {
        let t = |f: fn(&NIGParams) -> f64| rows(&a.map(f));
        Self { u: t(|p| p.u), v: t(|p| p.v), alpha: t(|p| p.alpha), beta: t(|p| p.beta) }
    }

    fn to_array(&self, name: &str, m: usize, k: usize) -> Result<Array2<NIGParams>> {
        let u = matrix(&self.u, &format!("{name}.u"), m, k)?;
        let v = matrix(&self.v, &format!("{name}.v"), m, k)?;
        let alpha = matrix(&self.alpha, &format!("{name}.alpha"), m, k)?;
        let beta = matrix(&self.beta, &format!("{name}.beta"), m, k)?;
        Ok(Array2::from_shape_fn((m, k), |ix| NIGParams { u: u[ix], v: v[ix], alpha: alpha[ix], beta: beta[ix] }))
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>], name: &str, m: usize, k: usize) -> Result<Array2<f64>> {
    if rows.len() != m || rows.iter().any(|r| r.len() != k) {
        return Err(Error::DimensionMismatch(format!("{name} must be {m}x{k}")));
    }
    Ok(Array2::from_shape_fn((m, k), |(i, j)| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparameterDoc {
    pub theta: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub nig: NigTables,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDoc {
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
    pub seed: u64,
    pub epsilon: f64,
}

/// On-disk model document. Matrices are row-per-condition, column-per-cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub format: String,
    pub schema_version: String,
    pub k: usize,
    pub m: usize,
    pub conditions: Vec<ConditionMeta>,
    pub theta_bar: Vec<f64>,
    pub pi_bar: Vec<Vec<f64>>,
    pub theta_star: Vec<f64>,
    pub a_star: Vec<Vec<f64>>,
    pub b_star: Vec<Vec<f64>>,
    pub nig_star: NigTables,
    pub hyperparameters: HyperparameterDoc,
    pub fit: FitDoc,
}

impl ModelDoc {
    pub fn from_model(model: &FittedModel) -> Self {
        let h = &model.fit_meta.hyperparameters;
        let f = &model.fit_meta;
        Self {
            format: MODEL_FORMAT.into(),
            schema_version: MODEL_SCHEMA_VERSION.into(),
            k: model.k(),
            m: model.m(),
            conditions: model.conditions.clone(),
            theta_bar: model.theta_bar.clone(),
            pi_bar: rows(&model.pi_bar),
            theta_star: model.theta_star.clone(),
            a_star: rows(&model.a_star),
            b_star: rows(&model.b_star),
            nig_star: NigTables::from_array(&model.nig_star),
            hyperparameters: HyperparameterDoc {
                theta: h.theta.clone(),
                a: rows(&h.a),
                b: rows(&h.b),
                nig: NigTables::from_array(&h.nig),
            },
            fit: FitDoc {
                iterations: f.iterations,
                final_delta: f.final_delta,
                converged: f.converged,
                seed: f.seed,
                epsilon: f.epsilon,
            },
        }
    }

    pub fn into_model(self) -> Result<FittedModel> {
        let (m, k) = (self.m, self.k);
        if self.conditions.len() != m || self.theta_bar.len() != k || self.theta_star.len() != k {
            return Err(Error::DimensionMismatch(format!("model document declares m={m}, k={k} inconsistently")));
        }
        let h = &self.hyperparameters;
        if h.theta.len() != k {
            return Err(Error::DimensionMismatch("hyperparameters.theta length differs from k".into()));
        }
        let hyperparameters = Hyperparameters {
            theta: h.theta.clone(),
            a: matrix(&h.a, "hyperparameters.a", m, k)?,
            b: matrix(&h.b, "hyperparameters.b", m, k)?,
            nig: h.nig.to_array("hyperparameters.nig", m, k)?,
        };
        hyperparameters.validate()?;
        let model = FittedModel {
            conditions: self.conditions,
            theta_star: self.theta_star,
            a_star: matrix(&self.a_star, "a_star", m, k)?,
            b_star: matrix(&self.b_star, "b_star", m, k)?,
            nig_star: self.nig_star.to_array("nig_star", m, k)?,
            theta_bar: self.theta_bar,
            pi_bar: matrix(&self.pi_bar, "pi_bar", m, k)?,
            fit_meta: FitMeta {
                iterations: self.fit.iterations,
                final_delta: self.fit.final_delta,
                converged: self.fit.converged,
                seed: self.fit.seed,
                epsilon: self.fit.epsilon,
                hyperparameters,
            },
        };
        for p in model.nig_star.iter() {
            p.validate()?;
        }
        Ok(model)
    }
}

/// Canonical model text: the same model always yields the same bytes.
pub fn model_to_string(model: &FittedModel) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&ModelDoc::from_model(model))?;
    text.push('\n');
    Ok(text)
}

pub fn model_from_str(text: &str, origin: &Path) -> Result<FittedModel> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| json_err(origin, e))?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(MODEL_FORMAT) => {}
        other => {
            return Err(parse_err(origin, 1, 1, format!("not a model document (format {other:?})")));
        }
    }
    match value.get("schema_version").and_then(|v| v.as_str()) {
        Some(MODEL_SCHEMA_VERSION) => {}
        other => {
            return Err(Error::SchemaVersion {
                found: other.unwrap_or("<missing>").to_string(),
                expected: MODEL_SCHEMA_VERSION.to_string(),
            })
        }
    }
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| json_err(origin, e))?;
    doc.into_model()
}

pub fn save_model(model: &FittedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = model_to_string(model)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text, path)
}

/// Write `iteration,delta` rows.
pub fn save_trace(trace: &[f64], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["iteration", "delta"],
        trace.iter().enumerate().map(|(i, d)| [(i + 1).to_string(), d.to_string()]),
    )
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|s| {
                let before = &text[..s.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                (line as u64, column as u64)
            })
            .unwrap_or((0, 0));
        parse_err(path, line, column, e.message().to_string())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Smoke,
}

/// Flat TOML mirror of `SimConfig`; unset keys come from `preset` (default paper).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfigFile {
    pub preset: Option<Preset>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub cluster_weight_range: Option<(f64, f64)>,
    pub prevalence_prior: Option<(f64, f64)>,
    pub onset_prior: Option<NIGParams>,
    pub baseline_range: Option<(f64, f64)>,
    pub followup_years: Option<f64>,
    pub death_prob: Option<f64>,
    pub train_fraction: Option<f64>,
    pub seed: Option<u64>,
}

impl SimConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_toml(path.as_ref())
    }

    pub fn resolve(&self) -> Result<SimConfig> {
        let base = match self.preset.unwrap_or(Preset::Paper) {
            Preset::Paper => SimConfig::paper(),
            Preset::Smoke => SimConfig::smoke(),
        };
        let cfg = SimConfig {
            n: self.n.unwrap_or(base.n),
            m: self.m.unwrap_or(base.m),
            k: self.k.unwrap_or(base.k),
            cluster_weight_range: self.cluster_weight_range.unwrap_or(base.cluster_weight_range),
            prevalence_prior: self.prevalence_prior.unwrap_or(base.prevalence_prior),
            onset_prior: self.onset_prior.unwrap_or(base.onset_prior),
            baseline_range: self.baseline_range.unwrap_or(base.baseline_range),
            followup_years: self.followup_years.unwrap_or(base.followup_years),
            death_prob: self.death_prob.unwrap_or(base.death_prob),
            train_fraction: self.train_fraction.unwrap_or(base.train_fraction),
            seed: self.seed.unwrap_or(base.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Flat TOML fit settings. Prior keys set one value shared by all clusters
/// and conditions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfigFile {
    pub k: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub seed: Option<u64>,
    pub reduction: Option<Reduction>,
    pub incomplete_update: Option<IncompleteUpdate>,
    pub prior_theta: Option<f64>,
    pub prior_a: Option<f64>,
    pub prior_b: Option<f64>,
    pub prior_u: Option<f64>,
    pub prior_v: Option<f64>,
    pub prior_alpha: Option<f64>,
    pub prior_beta: Option<f64>,
}

impl FitConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_toml(path.as_ref())
    }

    pub fn options(&self) -> FitOptions {
        let d = FitOptions::default();
        FitOptions {
            epsilon: self.tol.or(d.epsilon),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            seed: self.seed.unwrap_or(d.seed),
            reduction: self.reduction.unwrap_or(d.reduction),
            incomplete_update: self.incomplete_update.unwrap_or(d.incomplete_update),
        }
    }

    pub fn prior(&self) -> PriorTemplate {
        let d = PriorTemplate::default();
        PriorTemplate {
            theta: self.prior_theta.unwrap_or(d.theta),
            a: self.prior_a.unwrap_or(d.a),
            b: self.prior_b.unwrap_or(d.b),
            nig: NIGParams {
                u: self.prior_u.unwrap_or(d.nig.u),
                v: self.prior_v.unwrap_or(d.nig.v),
                alpha: self.prior_alpha.unwrap_or(d.nig.alpha),
                beta: self.prior_beta.unwrap_or(d.nig.beta),
            },
        }
    }
}
