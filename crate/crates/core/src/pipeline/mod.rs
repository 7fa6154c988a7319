//! Configuration and orchestration of the file-based workflow.
//!
//! A run reads the input CSVs named in a TOML config, builds the window
//! panel, computes pseudo-observations, fits the propensity forest, and
//! fits the weighted GEE. Every stage writes its artifact into the output
//! directory. If any stage fails the files written so far are removed.

pub mod io;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::StageContext;
use crate::event_data::{
    assemble_dataset, derive_alternating_events, validate_subject, LongitudinalDataset, SubjectHistory, WindowGrid,
};
use crate::exec::Execution;
use crate::forest::{fit_forest, oob_predict, ForestConfig, TrainingPanel, WeightTable};
use crate::gee::{fit_weighted_gee, FitResult, GeeRow, ModelSpec, WorkingCorrelation};
use crate::history::{propensity_features, HistoryConfig, Regime};
use crate::pseudo_obs::{pseudo_panel, PoMethod, PseudoPanel};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Events file; alternatively `measurements` plus `threshold`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurements: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub subjects: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_varying: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub starts: Vec<f64>,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistorySection {
    pub regime: Regime,
    pub lookback: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    #[default]
    Forest,
    /// Complete-case fit with unit weights.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub formula: String,
    #[serde(default)]
    pub correlation: WorkingCorrelation,
    #[serde(default)]
    pub weights: WeightMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; the forest seed is derived from it and `forest.seed`.
    pub seed: u64,
    pub input: InputConfig,
    pub grid: GridConfig,
    pub history: HistorySection,
    #[serde(default)]
    pub forest: ForestConfig,
    pub model: ModelSection,
    pub output: OutputConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.input.events, &mut self.input.measurements, &mut self.input.time_varying]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.input.subjects);
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.input.events, &self.input.measurements) {
            (Some(_), None) => {}
            (None, Some(_)) if self.input.threshold.is_some() => {}
            (None, Some(_)) => return Err(Error::Config("input.measurements needs input.threshold".into())),
            _ => return Err(Error::Config("give exactly one of input.events and input.measurements".into())),
        }
        let mut files = vec![&self.input.subjects];
        files.extend(self.input.events.iter());
        files.extend(self.input.measurements.iter());
        files.extend(self.input.time_varying.iter());
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", f.display())));
            }
        }
        self.window_grid()?;
        self.history_config()?;
        self.model_spec()?;
        Ok(())
    }

    pub fn window_grid(&self) -> Result<WindowGrid> {
        WindowGrid::new(self.grid.starts.clone(), self.grid.tau)
    }

    pub fn history_config(&self) -> Result<HistoryConfig> {
        HistoryConfig::new(self.history.regime, self.history.lookback)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::from_formula(&self.model.formula, self.model.correlation)
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig { seed: seed::derive(self.seed, self.forest.seed), ..self.forest.clone() }
    }
}

/// How far a run goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Transform,
    Weights,
    Fit,
}

pub const WINDOWS_FILE: &str = "windows.csv";
pub const PSEUDO_FILE: &str = "pseudo.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const FIT_FILE: &str = "fit.csv";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub dataset: LongitudinalDataset,
    pub pseudo: Option<PseudoPanel>,
    pub weights: Option<WeightTable>,
    pub fit: Option<FitResult>,
    pub files: Vec<PathBuf>,
}

/// Loads subjects with their events and time-varying covariates.
pub fn load_subjects(cfg: &PipelineConfig) -> Result<Vec<SubjectHistory>> {
    let table = io::read_subjects(&cfg.input.subjects)?;
    let mut seen = BTreeSet::new();
    for r in &table.rows {
        if !seen.insert(r.subject_id.as_str()) {
            return Err(Error::DuplicateSubject(r.subject_id.clone()));
        }
    }

    let mut pairs: HashMap<String, Vec<(f64, Option<f64>)>> = if let Some(events) = &cfg.input.events {
        io::read_events(events)?.into_iter().collect()
    } else {
        let path = cfg.input.measurements.as_ref().expect("validated");
        let m = io::read_measurements(path)?;
        let censor: HashMap<String, f64> =
            table.rows.iter().map(|r| (r.subject_id.clone(), r.censor_time)).collect();
        derive_alternating_events(&m, cfg.input.threshold.expect("validated"), Some(&censor))?
            .into_iter()
            .map(|s| (s.id.clone(), s.pairs.iter().map(|p| (p.primary, p.secondary)).collect()))
            .collect()
    };
    if let Some(id) = pairs.keys().filter(|k| !seen.contains(k.as_str())).min() {
        return Err(Error::InvalidSubject { subject: id.clone(), reason: "has events but no row in the subjects file".into() });
    }
    let mut tv = match &cfg.input.time_varying {
        Some(p) => io::read_time_varying(p)?,
        None => HashMap::new(),
    };

    let mut subjects = Vec::with_capacity(table.rows.len());
    for r in table.rows {
        let p = pairs.remove(&r.subject_id).unwrap_or_default();
        let mut s = SubjectHistory::new(r.subject_id.clone(), &p, r.censor_time);
        s.baseline = r.baseline;
        s.full_history = r.full_history;
        s.time_varying = tv.remove(&r.subject_id).unwrap_or_default();
        if let Some(v) = validate_subject(&s).first() {
            return Err(Error::InvalidSubject { subject: s.id.clone(), reason: v.to_string() });
        }
        subjects.push(s);
    }
    Ok(subjects)
}

/// Checks that every model variable is available for every subject.
fn check_model_columns(spec: &ModelSpec, subjects: &[SubjectHistory]) -> Result<()> {
    for term in &spec.terms {
        for var in term.variables() {
            if var == "t" {
                continue;
            }
            let known = |s: &SubjectHistory| {
                s.baseline.contains_key(var) || s.time_varying.iter().any(|(_, c)| c.contains_key(var))
            };
            if let Some(s) = subjects.iter().find(|s| !known(s)) {
                log::error!("subject {} has no value for `{var}`", s.id);
                return Err(Error::MissingCovariate(var.to_string()));
            }
        }
    }
    Ok(())
}

struct Artifacts {
    files: Vec<PathBuf>,
    keep: bool,
}

impl Artifacts {
    fn add(&mut self, dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        self.files.push(p.clone());
        p
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if !self.keep {
            for f in &self.files {
                let _ = std::fs::remove_file(f);
            }
        }
    }
}

/// Runs the pipeline up to `until`, writing artifacts into the output
/// directory.
pub fn run_pipeline(cfg: &PipelineConfig, until: Stage, exec: Execution) -> Result<PipelineOutput> {
    cfg.validate().stage("config")?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(Error::from).stage("output")?;
    let mut artifacts = Artifacts { files: Vec::new(), keep: false };

    let grid = cfg.window_grid().stage("config")?;
    let spec = cfg.model_spec().stage("config")?;
    let subjects = load_subjects(cfg).stage("input")?;
    check_model_columns(&spec, &subjects).stage("input")?;

    let dataset = assemble_dataset(&subjects, &grid, |s, t| Ok(s.covariates_at(t))).stage("transform")?;
    io::write_windows(&artifacts.add(dir, WINDOWS_FILE), &dataset).stage("transform")?;
    let mut out = PipelineOutput { dataset, pseudo: None, weights: None, fit: None, files: Vec::new() };
    if until == Stage::Transform {
        artifacts.keep = true;
        out.files = artifacts.files.clone();
        return Ok(out);
    }

    let panel = pseudo_panel(&out.dataset, PoMethod::Fast, exec);
    io::write_pseudo(&artifacts.add(dir, PSEUDO_FILE), &panel).stage("pseudo-observations")?;

    let weights = match cfg.model.weights {
        WeightMode::Forest => {
            let table = forest_weights(cfg, &subjects, &out.dataset, exec).stage("weights")?;
            io::write_weights(&artifacts.add(dir, WEIGHTS_FILE), &out.dataset, &table).stage("weights")?;
            Some(table)
        }
        WeightMode::None => None,
    };
    out.pseudo = Some(panel);
    out.weights = weights;
    if until == Stage::Weights {
        artifacts.keep = true;
        out.files = artifacts.files.clone();
        return Ok(out);
    }

    let fit = fit_stage(&spec, &out).stage("fit")?;
    io::write_fit(&artifacts.add(dir, FIT_FILE), &fit).stage("fit")?;
    let meta = [
        ("weights", match cfg.model.weights {
            WeightMode::Forest => format!("forest ({} history, {} trees)", cfg.history.regime.name(), cfg.forest.n_trees),
            WeightMode::None => "none".to_string(),
        }),
        ("tau", cfg.grid.tau.to_string()),
        ("window starts", format!("{:?}", cfg.grid.starts)),
        ("seed", cfg.seed.to_string()),
    ];
    io::write_text(&artifacts.add(dir, REPORT_FILE), &io::render_report(&fit, &meta)).stage("report")?;
    out.fit = Some(fit);
    artifacts.keep = true;
    out.files = artifacts.files.clone();
    Ok(out)
}

fn forest_weights(
    cfg: &PipelineConfig,
    subjects: &[SubjectHistory],
    ds: &LongitudinalDataset,
    exec: Execution,
) -> Result<WeightTable> {
    let hcfg = cfg.history_config()?;
    let by_id: HashMap<&str, &SubjectHistory> = subjects.iter().map(|s| (s.id.as_str(), s)).collect();
    let features: Vec<_> = ds
        .rows
        .iter()
        .map(|r| propensity_features(by_id[r.subject_id.as_str()], r.t, &hcfg))
        .collect();
    let panel = TrainingPanel::new(ds.rows.iter().zip(&features).map(|(r, f)| (r.subject_id.as_str(), r.at_risk, f)))?;
    let forest = fit_forest(&panel, &cfg.forest_config(), exec)?;
    Ok(oob_predict(&forest, &panel, exec))
}

fn fit_stage(spec: &ModelSpec, out: &PipelineOutput) -> Result<FitResult> {
    let panel = out.pseudo.as_ref().expect("pseudo stage ran");
    let rows = panel
        .values
        .iter()
        .map(|v| {
            let r = &out.dataset.rows[v.row];
            Ok(GeeRow {
                cluster: v.subject_id.clone(),
                window: v.window,
                y: v.po,
                weight: out.weights.as_ref().map_or(1.0, |w| 1.0 / w.pi_hat[v.row]),
                x: spec.design_row(&r.covariates, r.t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fit_weighted_gee(&rows, spec)
}
