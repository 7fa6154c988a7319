use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::{Scenario, SubjectTruth};
use crate::event_data::{assemble_dataset, LongitudinalDataset};
use crate::exec::Execution;
use crate::forest::{fit_forest, oob_predict, ForestConfig, TrainingPanel};
use crate::gee::{fit_weighted_gee, GeeRow, ModelSpec, WorkingCorrelation, Z_975};
use crate::history::{propensity_features, HistoryConfig, Regime};
use crate::pseudo_obs::{pseudo_panel, PoMethod};
use crate::seed;
use crate::{Error, Result};

/// How the at-risk rows are weighted before the GEE fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Unweighted,
    /// True at-risk probabilities from the generator.
    Oracle,
    /// Forest propensities with the given history regime.
    Pair(Regime),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Unweighted => "unweighted",
            Method::Oracle => "oracle",
            Method::Pair(r) => r.name(),
        }
    }

    /// Parses a comma-separated list such as `full,p3,none,unweighted`.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unweighted" => Ok(Method::Unweighted),
            "oracle" => Ok(Method::Oracle),
            other => other.parse().map(Method::Pair),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Forest settings; the seed is replaced per replicate and regime.
    pub forest: ForestConfig,
    pub correlation: WorkingCorrelation,
    pub exec: Execution,
}

impl SimConfig {
    pub fn new(n: usize, replicates: usize, seed: u64, methods: Vec<Method>) -> Self {
        SimConfig {
            n,
            replicates,
            seed,
            methods,
            forest: ForestConfig::default(),
            correlation: WorkingCorrelation::Independence,
            exec: Execution::default(),
        }
    }
}

/// One coefficient estimate from one replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub method: Method,
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub truth: f64,
}

impl Estimate {
    pub fn covered(&self) -> bool {
        (self.estimate - self.truth).abs() <= Z_975 * self.se
    }
}

/// Weighted mean pseudo-observation in one window against the mean of the
/// true restricted times over the uncensored subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowMean {
    pub method: Method,
    pub window: usize,
    pub t: f64,
    pub estimate: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub estimates: Vec<Estimate>,
    pub window_means: Vec<WindowMean>,
    /// Methods that failed, with the error text.
    pub failures: Vec<(Method, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: Method,
    pub term: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Mean of `|β̂ − β| / |β|`.
    pub relative_bias: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub esd: f64,
    pub se_esd: f64,
    pub n_ok: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub replicates: usize,
    pub failures: usize,
}

impl MetricsTable {
    pub fn from_replicates(results: &[ReplicateResult], methods: &[Method], terms: &[String]) -> Self {
        let mut rows = Vec::new();
        for &method in methods {
            for term in terms {
                let est: Vec<&Estimate> = results
                    .iter()
                    .flat_map(|r| &r.estimates)
                    .filter(|e| e.method == method && &e.term == term)
                    .collect();
                if est.is_empty() {
                    continue;
                }
                let k = est.len() as f64;
                let truth = est[0].truth;
                let mean_estimate = est.iter().map(|e| e.estimate).sum::<f64>() / k;
                let esd = if est.len() > 1 {
                    (est.iter().map(|e| (e.estimate - mean_estimate).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
                } else {
                    f64::NAN
                };
                let mean_se = est.iter().map(|e| e.se).sum::<f64>() / k;
                rows.push(MetricRow {
                    method,
                    term: term.clone(),
                    truth,
                    mean_estimate,
                    bias: mean_estimate - truth,
                    relative_bias: est.iter().map(|e| (e.estimate - truth).abs()).sum::<f64>() / k / truth.abs(),
                    coverage: est.iter().filter(|e| e.covered()).count() as f64 / k,
                    mean_se,
                    esd,
                    se_esd: mean_se / esd,
                    n_ok: est.len(),
                });
            }
        }
        MetricsTable {
            rows,
            replicates: results.len(),
            failures: results.iter().map(|r| r.failures.len()).sum(),
        }
    }

    pub fn get(&self, method: Method, term: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method && r.term == term)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowBiasRow {
    pub method: Method,
    pub window: usize,
    pub t: f64,
    pub mean_estimate: f64,
    pub truth: f64,
    pub bias: f64,
    pub replicates: usize,
}

/// Averages the per-window means over replicates.
pub fn window_bias_profile(results: &[ReplicateResult]) -> Vec<WindowBiasRow> {
    let mut acc: std::collections::BTreeMap<(Method, usize), (f64, f64, f64, usize)> = Default::default();
    for m in results.iter().flat_map(|r| &r.window_means) {
        let e = acc.entry((m.method, m.window)).or_insert((m.t, 0.0, 0.0, 0));
        e.1 += m.estimate;
        e.2 += m.truth;
        e.3 += 1;
    }
    acc.into_iter()
        .map(|((method, window), (t, est, truth, k))| {
            let kf = k as f64;
            WindowBiasRow {
                method,
                window,
                t,
                mean_estimate: est / kf,
                truth: truth / kf,
                bias: (est - truth) / kf,
                replicates: k,
            }
        })
        .collect()
}

/// Everything produced by a simulation run.
#[derive(Clone, Debug)]
pub struct SimulationRun {
    pub metrics: MetricsTable,
    pub replicates: Vec<ReplicateResult>,
    pub terms: Vec<String>,
}

pub fn run_replicates<S: Scenario>(scenario: &S, cfg: &SimConfig) -> Result<SimulationRun> {
    if cfg.replicates < 2 {
        return Err(Error::Config("at least two replicates are needed".into()));
    }
    let spec = ModelSpec::new(&scenario.model_terms(), cfg.correlation)?;
    let terms = spec.term_names();
    let replicates = cfg
        .exec
        .map_range(cfg.replicates, |i| run_one(scenario, cfg, &spec, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let metrics = MetricsTable::from_replicates(&replicates, &cfg.methods, &terms);
    if metrics.failures > 0 {
        log::warn!("{} method fits failed and were excluded", metrics.failures);
    }
    Ok(SimulationRun { metrics, replicates, terms })
}

/// Per-row inverse weights for one method, aligned with `ds.rows`. Rows that
/// are not at risk get weight zero.
pub(crate) fn method_weights<S: Scenario>(
    scenario: &S,
    method: Method,
    ds: &LongitudinalDataset,
    subjects: &HashMap<&str, (&crate::event_data::SubjectHistory, &SubjectTruth)>,
    forest: &ForestConfig,
    replicate_seed: u64,
    exec: Execution,
) -> Result<Vec<f64>> {
    let inverse = |at_risk: bool, p: f64| if at_risk { 1.0 / p } else { 0.0 };
    match method {
        Method::Unweighted => Ok(ds.rows.iter().map(|r| f64::from(u8::from(r.at_risk))).collect()),
        Method::Oracle => Ok(ds
            .rows
            .iter()
            .map(|r| inverse(r.at_risk, subjects[r.subject_id.as_str()].1.pi(r.t).max(forest.clip)))
            .collect()),
        Method::Pair(regime) => {
            let hcfg = HistoryConfig::new(regime, scenario.lookback())?;
            let features: Vec<_> = ds
                .rows
                .iter()
                .map(|r| propensity_features(subjects[r.subject_id.as_str()].0, r.t, &hcfg))
                .collect();
            let panel = TrainingPanel::new(
                ds.rows.iter().zip(&features).map(|(r, f)| (r.subject_id.as_str(), r.at_risk, f)),
            )?;
            let fcfg = ForestConfig {
                seed: seed::derive_path(replicate_seed, &[&"forest", &regime.name()]),
                ..forest.clone()
            };
            let fitted = fit_forest(&panel, &fcfg, exec)?;
            let table = oob_predict(&fitted, &panel, exec);
            Ok(ds.rows.iter().zip(&table.pi_hat).map(|(r, &p)| inverse(r.at_risk, p)).collect())
        }
    }
}

fn run_one<S: Scenario>(scenario: &S, cfg: &SimConfig, spec: &ModelSpec, i: usize) -> Result<ReplicateResult> {
    let rep_seed = seed::derive(cfg.seed, i);
    let cohort = scenario.generate(cfg.n, seed::derive(rep_seed, "cohort"))?;
    let grid = scenario.grid();
    let tau = grid.tau();
    let ds = assemble_dataset(&cohort.subjects, &grid, |s, t| Ok(s.covariates_at(t)))?;
    let panel = pseudo_panel(&ds, PoMethod::Fast, cfg.exec);
    let subjects: HashMap<&str, _> = cohort
        .subjects
        .iter()
        .zip(&cohort.truth)
        .map(|(s, t)| (s.id.as_str(), (s, t)))
        .collect();

    let mut truth_sum = vec![0.0; grid.len()];
    let mut truth_n = vec![0usize; grid.len()];
    for r in &ds.rows {
        truth_sum[r.window] += subjects[r.subject_id.as_str()].1.restricted_time(r.t, tau);
        truth_n[r.window] += 1;
    }

    let designs = panel
        .values
        .iter()
        .map(|v| spec.design_row(&ds.rows[v.row].covariates, v.t))
        .collect::<Result<Vec<_>>>()?;
    let beta = scenario.true_beta();
    let terms = spec.term_names();

    let mut out = ReplicateResult {
        replicate: i,
        seed: rep_seed,
        estimates: Vec::new(),
        window_means: Vec::new(),
        failures: Vec::new(),
    };
    for &method in &cfg.methods {
        let weights = match method_weights(scenario, method, &ds, &subjects, &cfg.forest, rep_seed, cfg.exec) {
            Ok(w) => w,
            Err(e) => {
                out.failures.push((method, e.to_string()));
                continue;
            }
        };
        let rows: Vec<GeeRow> = panel
            .values
            .iter()
            .zip(&designs)
            .map(|(v, x)| GeeRow {
                cluster: v.subject_id.clone(),
                window: v.window,
                y: v.po,
                weight: weights[v.row],
                x: x.clone(),
            })
            .collect();

        let mut num = vec![0.0; grid.len()];
        let mut den = vec![0.0; grid.len()];
        for r in &rows {
            num[r.window] += r.weight * r.y;
            den[r.window] += r.weight;
        }
        for (w, &t) in grid.starts().iter().enumerate() {
            if den[w] > 0.0 && truth_n[w] > 0 {
                out.window_means.push(WindowMean {
                    method,
                    window: w,
                    t,
                    estimate: num[w] / den[w],
                    truth: truth_sum[w] / truth_n[w] as f64,
                });
            }
        }

        match fit_weighted_gee(&rows, spec) {
            Ok(fit) => {
                for (k, term) in terms.iter().enumerate() {
                    out.estimates.push(Estimate {
                        method,
                        term: term.clone(),
                        estimate: fit.estimate[k],
                        se: fit.se[k],
                        truth: beta[k],
                    });
                }
            }
            Err(e) => out.failures.push((method, e.to_string())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::correlated::CorrelatedScenario;
    use super::super::independent::IndependentScenario;
    use super::*;

    fn small_forest() -> ForestConfig {
        ForestConfig { n_trees: 20, ..Default::default() }
    }

    #[test]
    fn method_names_round_trip() {
        let all = Method::parse_list("full,p1,p2,p3,p4,reflective,none,unweighted,oracle").unwrap();
        assert_eq!(all.len(), 9);
        for m in &all {
            assert_eq!(&m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn smoke_run_has_finite_entries() {
        let sc = IndependentScenario::default();
        let mut cfg = SimConfig::new(60, 2, 1, vec![Method::Unweighted, Method::Pair(Regime::Full)]);
        cfg.forest = small_forest();
        let run = run_replicates(&sc, &cfg).unwrap();
        assert_eq!(run.metrics.failures, 0);
        assert_eq!(run.metrics.rows.len(), 8);
        for r in &run.metrics.rows {
            assert!(r.bias.is_finite() && r.mean_se.is_finite() && r.esd.is_finite());
            assert!([0.0, 0.5, 1.0].contains(&r.coverage));
        }
    }

    #[test]
    fn results_do_not_depend_on_execution() {
        let sc = CorrelatedScenario::default();
        let methods = vec![Method::Unweighted, Method::Oracle, Method::Pair(Regime::P4)];
        let mut cfg = SimConfig::new(80, 3, 9, methods);
        cfg.forest = small_forest();
        cfg.exec = Execution::Sequential;
        let a = run_replicates(&sc, &cfg).unwrap();
        cfg.exec = Execution::Parallel;
        let b = run_replicates(&sc, &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.replicates, b.replicates);
    }

    #[test]
    fn unweighted_and_oracle_agree_without_selection() {
        // episodes so short that everyone is always at risk at window starts
        let sc = CorrelatedScenario { secondary_kappa: 1e9, ..Default::default() };
        let cfg = SimConfig::new(100, 2, 4, vec![Method::Unweighted, Method::Oracle]);
        let run = run_replicates(&sc, &cfg).unwrap();
        let profile = window_bias_profile(&run.replicates);
        let (u, o): (Vec<_>, Vec<_>) = profile.iter().partition(|r| r.method == Method::Unweighted);
        for (a, b) in u.iter().zip(&o) {
            assert_eq!(a.window, b.window);
            assert!((a.mean_estimate - b.mean_estimate).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_replicates_is_a_config_error() {
        let cfg = SimConfig::new(10, 1, 0, vec![Method::Unweighted]);
        assert!(run_replicates(&IndependentScenario::default(), &cfg).unwrap_err().is_validation());
    }
}
