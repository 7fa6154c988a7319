use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pairgee::event_data::derive_alternating_events;
use pairgee::exec::Execution;
use pairgee::forest::ForestConfig;
use pairgee::gee::WorkingCorrelation;
use pairgee::pipeline::{self, io, PipelineConfig, Stage, WeightMode};
use pairgee::simulate::careqol::{self, CareQolLike};
use pairgee::simulate::correlated::CorrelatedScenario;
use pairgee::simulate::independent::IndependentScenario;
use pairgee::simulate::{run_replicates, window_bias_profile, Method, SimConfig, SimulationRun};
use pairgee::{Error, Result};

#[derive(Parser)]
#[command(name = "pairgee", version, about = "Weighted pseudo-observation regression for alternating recurrent events")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Worker threads for the parallel paths (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Correlated,
    Independent,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorrelationArg {
    Independence,
    Unstructured,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Forest,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Turn repeated scores into an events CSV.
    DeriveEvents {
        #[arg(long)]
        measurements: PathBuf,
        /// Rise over the first score that marks an episode.
        #[arg(long)]
        threshold: f64,
        /// Subjects CSV supplying `censor_time`; otherwise the last
        /// measurement is the censoring time.
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the window panel.
    Transform {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pseudo-observations and forest propensities.
    Weights {
        #[arg(long)]
        config: PathBuf,
    },
    /// Full pipeline through the GEE fit.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Override `model.weights` from the config.
        #[arg(long, value_enum)]
        weights: Option<WeightsArg>,
    },
    /// Monte Carlo study on a built-in scenario.
    Simulate {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
        #[arg(long, default_value_t = 750)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "full,p1,p2,p3,p4,reflective,none,unweighted")]
        regimes: String,
        #[arg(long, default_value_t = 500)]
        trees: usize,
        #[arg(long, value_enum, default_value = "independence")]
        correlation: CorrelationArg,
        /// Administrative censoring only.
        #[arg(long)]
        no_censoring: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a fit or simulation metrics CSV as a table.
    Report {
        #[arg(long, conflicts_with = "metrics", required_unless_present = "metrics")]
        fit: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Write a synthetic caregiver study and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 257)]
        n: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon_threads(t) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

#[cfg(feature = "parallel")]
fn rayon_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

#[cfg(not(feature = "parallel"))]
fn rayon_threads(_: usize) -> Result<()> {
    Ok(())
}

fn run(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::DeriveEvents { measurements, threshold, subjects, out } => {
            let m = io::read_measurements(&measurements)?;
            let censor: Option<HashMap<String, f64>> = match subjects {
                Some(p) => Some(
                    io::read_subjects(&p)?
                        .rows
                        .into_iter()
                        .map(|r| (r.subject_id, r.censor_time))
                        .collect(),
                ),
                None => None,
            };
            let subjects = derive_alternating_events(&m, threshold, censor.as_ref())?;
            io::write_events(&out, &subjects)?;
            println!("{} subjects, {} episodes -> {}", subjects.len(), subjects.iter().map(|s| s.pairs.len()).sum::<usize>(), out.display());
        }
        Command::Transform { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = pipeline::run_pipeline(&cfg, Stage::Transform, exec)?;
            let at_risk = out.dataset.rows.iter().filter(|r| r.at_risk).count();
            println!("{} rows ({at_risk} at risk) for {} subjects", out.dataset.rows.len(), out.dataset.n_subjects());
            print_files(&out.files);
        }
        Command::Weights { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = pipeline::run_pipeline(&cfg, Stage::Weights, exec)?;
            print_files(&out.files);
        }
        Command::Fit { config, weights } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(w) = weights {
                cfg.model.weights = match w {
                    WeightsArg::Forest => WeightMode::Forest,
                    WeightsArg::None => WeightMode::None,
                };
            }
            let out = pipeline::run_pipeline(&cfg, Stage::Fit, exec)?;
            let report = std::fs::read_to_string(cfg.output.dir.join(pipeline::REPORT_FILE))?;
            print!("{report}");
            print_files(&out.files);
        }
        Command::Simulate { scenario, replicates, n, seed, regimes, trees, correlation, no_censoring, out } => {
            let methods = Method::parse_list(&regimes)?;
            if methods.is_empty() {
                return Err(Error::Config("no methods given in --regimes".into()));
            }
            let mut sim = SimConfig::new(n, replicates, seed, methods);
            sim.forest = ForestConfig { n_trees: trees, ..Default::default() };
            sim.correlation = match correlation {
                CorrelationArg::Independence => WorkingCorrelation::Independence,
                CorrelationArg::Unstructured => WorkingCorrelation::Unstructured,
            };
            sim.exec = exec;
            let run = match scenario {
                ScenarioArg::Correlated => {
                    let mut sc = CorrelatedScenario { n, ..Default::default() };
                    sc.censoring.enabled = !no_censoring;
                    run_replicates(&sc, &sim)?
                }
                ScenarioArg::Independent => {
                    let mut sc = IndependentScenario { n, ..Default::default() };
                    sc.censoring.enabled = !no_censoring;
                    run_replicates(&sc, &sim)?
                }
            };
            write_simulation(&out, &run)?;
            print!("{}", io::render_metrics(&io::read_metrics(&out.join("metrics.csv"))?));
            if run.metrics.failures > 0 {
                eprintln!("{} method fits failed and were excluded", run.metrics.failures);
            }
        }
        Command::Report { fit, metrics } => {
            if let Some(p) = fit {
                let rows = io::read_fit(&p)?;
                let table: Vec<_> = rows
                    .into_iter()
                    .map(|r| (r.term, [r.estimate, r.se, r.ci_lo, r.ci_hi, r.p_value]))
                    .collect();
                print!("{}", io::render_table(&table));
            } else if let Some(p) = metrics {
                print!("{}", io::render_metrics(&io::read_metrics(&p)?));
            }
        }
        Command::Synth { out, seed, n } => {
            std::fs::create_dir_all(&out)?;
            let study = CareQolLike { n, ..Default::default() }.generate(seed);
            io::write_measurements(&out.join("measurements.csv"), &study.measurements)?;
            io::write_subjects(&out.join("subjects.csv"), &study.subjects)?;
            io::write_time_varying(&out.join("time_varying.csv"), &study.time_varying)?;
            let cfg = synth_config(seed);
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            println!("wrote synthetic study with {n} subjects to {}", out.display());
        }
    }
    Ok(())
}

fn synth_config(seed: u64) -> PipelineConfig {
    use pairgee::history::Regime;
    use pairgee::pipeline::{GridConfig, HistorySection, InputConfig, ModelSection, OutputConfig};
    PipelineConfig {
        seed,
        input: InputConfig {
            events: None,
            measurements: Some("measurements.csv".into()),
            threshold: Some(CareQolLike::default().threshold),
            subjects: "subjects.csv".into(),
            time_varying: Some("time_varying.csv".into()),
        },
        grid: GridConfig { starts: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0], tau: 2.0 },
        history: HistorySection { regime: Regime::Reflective, lookback: -12.0 },
        forest: ForestConfig::default(),
        model: ModelSection {
            formula: careqol::TERMS.join(" + "),
            correlation: WorkingCorrelation::Independence,
            weights: WeightMode::Forest,
        },
        output: OutputConfig { dir: "out".into() },
    }
}

fn write_simulation(dir: &Path, run: &SimulationRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_metrics(&dir.join("metrics.csv"), &run.metrics)?;
    io::write_window_bias(&dir.join("window_bias.csv"), &window_bias_profile(&run.replicates))?;
    io::write_estimates(&dir.join("estimates.csv"), &run.replicates)?;
    Ok(())
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}
