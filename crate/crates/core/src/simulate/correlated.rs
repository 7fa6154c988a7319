//! Binary-covariate scenario with strongly correlated primary gap times.
//!
//! Gap times follow a calendar-time piecewise exponential hazard that depends
//! on `z`. Within a subject the gaps are tied together by an equicorrelated
//! Gaussian copula. Episode lengths come from a subject-level rate that is a
//! deterministic function of the subject's primary hazard profile: subjects
//! whose primary events come quickly also recover quickly, so the at-risk set
//! at any window start over-represents short gaps.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{thin, Censoring, Cohort, PiecewiseHazard, Scenario, SecondaryRate, SubjectTruth};
use crate::event_data::WindowGrid;
use crate::exec::Execution;
use crate::seed;
use crate::Result;

/// Latent pairwise correlation giving a realized gap-time correlation of
/// about 0.80 (see `examples/calibrate_correlated.rs`).
pub const LATENT_CORRELATION: f64 = 0.826;

/// Episode rate multiplier `κ` in `κ / q^a`.
pub const SECONDARY_KAPPA: f64 = 4.0;

/// Frailty exponent `a` in `κ / q^a`.
pub const SECONDARY_POWER: f64 = 2.0;

pub const TERMS: [&str; 4] = [
    "I(z==1)*I(t<6)",
    "I(z==0)*I(t<6)",
    "I(z==1)*I(t>=6)",
    "I(z==0)*I(t>=6)",
];

/// Target of the four-indicator model under this generator with censoring:
/// window means of `min{T(t), τ}` averaged with weights `P(C > t)`.
pub const TRUE_BETA_CENSORED: [f64; 4] = [0.7030, 0.6151, 0.8191, 0.7565];

/// Same target with equal window weights.
pub const TRUE_BETA_UNCENSORED: [f64; 4] = [0.7030, 0.6151, 0.8191, 0.7565];

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelatedScenario {
    pub n: usize,
    pub latent_correlation: f64,
    /// Primary hazards for `z = 0` and `z = 1`.
    pub hazards: [PiecewiseHazard; 2],
    pub secondary_kappa: f64,
    pub secondary_power: f64,
    pub censoring: Censoring,
    /// Start of the oracle stream; also the history lookback.
    pub origin: f64,
    /// Share of subjects flagged as having a full pre-study record.
    pub full_history_fraction: f64,
    pub tau: f64,
}

impl Default for CorrelatedScenario {
    fn default() -> Self {
        CorrelatedScenario {
            n: 750,
            latent_correlation: LATENT_CORRELATION,
            hazards: [
                PiecewiseHazard { before: 0.5, after: 0.25, change: 6.0 },
                PiecewiseHazard { before: 1.0 / 3.0, after: 1.0 / 6.0, change: 6.0 },
            ],
            secondary_kappa: SECONDARY_KAPPA,
            secondary_power: SECONDARY_POWER,
            censoring: Censoring::default(),
            origin: -12.0,
            full_history_fraction: 0.5,
            tau: 1.0,
        }
    }
}

/// Mean and Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

/// One subject's uncensored draw.
#[derive(Clone, Debug)]
pub struct OracleStream {
    pub z: u8,
    pub events: Vec<f64>,
    /// `-ln Φ̄(√r·U)`: the subject's typical gap on the unit-hazard scale.
    pub frailty: f64,
}

fn upper_tail_log(y: f64) -> f64 {
    let normal = Normal::standard();
    -normal.sf(y).ln()
}

impl CorrelatedScenario {
    fn horizon(&self) -> f64 {
        self.censoring.cap + self.tau + 1.0
    }

    /// Draws the oracle primary stream for a subject with hazard `h` from
    /// `origin` until past `horizon`.
    pub fn draw_stream<R: Rng>(&self, h: &PiecewiseHazard, origin: f64, horizon: f64, rng: &mut R) -> (Vec<f64>, f64) {
        let r = self.latent_correlation;
        let u: f64 = StandardNormal.sample(rng);
        let shared = r.sqrt() * u;
        let mut events = Vec::new();
        let mut s = origin;
        while s <= horizon {
            let e: f64 = StandardNormal.sample(rng);
            let y = shared + (1.0 - r).sqrt() * e;
            s += h.invert(s, upper_tail_log(y));
            events.push(s);
        }
        (events, upper_tail_log(shared))
    }

    pub fn oracle_stream(&self, seed: u64) -> OracleStream {
        let mut rng = seed::rng(seed);
        let z = u8::from(rng.random_bool(0.5));
        let (events, frailty) = self.draw_stream(&self.hazards[z as usize], self.origin, self.horizon(), &mut rng);
        OracleStream { z, events, frailty }
    }

    pub fn secondary_rate(&self, stream: &OracleStream) -> SecondaryRate {
        SecondaryRate {
            scale: self.secondary_kappa / stream.frailty.powf(self.secondary_power),
            shape: self.hazards[stream.z as usize],
        }
    }

    /// Large-sample values of the four model coefficients, from oracle
    /// streams that are never interrupted by episodes. Windows are weighted
    /// by `P(C > t)` when `censored` is set.
    pub fn monte_carlo_truth(&self, n_subjects: usize, seed: u64, censored: bool, exec: Execution) -> [McEstimate; 4] {
        let grid = self.grid();
        let weights: Vec<f64> = grid
            .starts()
            .iter()
            .map(|&t| if censored { self.censoring.survival(t) } else { 1.0 })
            .collect();
        let per_subject = exec.map_range(n_subjects, |i| {
            let stream = self.oracle_stream(seed::derive(seed, i));
            let truth = SubjectTruth {
                oracle: stream.events,
                secondary: SecondaryRate { scale: 1.0, shape: PiecewiseHazard::constant(1.0) },
            };
            let (mut early, mut late, mut we, mut wl) = (0.0, 0.0, 0.0, 0.0);
            for (&t, &w) in grid.starts().iter().zip(&weights) {
                let y = truth.restricted_time(t, self.tau);
                if t < 6.0 {
                    early += w * y;
                    we += w;
                } else {
                    late += w * y;
                    wl += w;
                }
            }
            (stream.z, early / we, late / wl)
        });
        // order matches TERMS
        let cells: [(u8, bool); 4] = [(1, true), (0, true), (1, false), (0, false)];
        cells.map(|(z, early)| {
            let v: Vec<f64> = per_subject
                .iter()
                .filter(|s| s.0 == z)
                .map(|s| if early { s.1 } else { s.2 })
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            McEstimate { mean, se: (var / n).sqrt() }
        })
    }

    fn subject(&self, i: usize, width: usize, seed: u64) -> (crate::event_data::SubjectHistory, SubjectTruth) {
        let stream = self.oracle_stream(seed::derive(seed, i));
        let secondary = self.secondary_rate(&stream);
        let mut rng = seed::rng(seed::derive(seed::derive(seed, i), "observed"));
        let censor = self.censoring.draw(&mut rng);
        let full = rng.random_bool(self.full_history_fraction);
        let mut subject = thin(format!("s{:0width$}", i + 1), &stream.events, &secondary, censor, &mut rng)
            .with_baseline("z", f64::from(stream.z));
        subject.full_history = full;
        (subject, SubjectTruth { oracle: stream.events, secondary })
    }
}

impl Scenario for CorrelatedScenario {
    fn name(&self) -> &'static str {
        "correlated"
    }

    fn n(&self) -> usize {
        self.n
    }

    fn generate(&self, n: usize, seed: u64) -> Result<Cohort> {
        let width = n.to_string().len().max(4);
        let (subjects, truth) = (0..n).map(|i| self.subject(i, width, seed)).unzip();
        Ok(Cohort { subjects, truth })
    }

    fn grid(&self) -> WindowGrid {
        WindowGrid::regular(0.0, 1.0, 12, self.tau).expect("valid grid")
    }

    fn lookback(&self) -> f64 {
        self.origin
    }

    fn model_terms(&self) -> Vec<&'static str> {
        TERMS.to_vec()
    }

    fn true_beta(&self) -> Vec<f64> {
        if self.censoring.enabled {
            TRUE_BETA_CENSORED.to_vec()
        } else {
            TRUE_BETA_UNCENSORED.to_vec()
        }
    }
}

/// One-sample Kolmogorov–Smirnov statistic.
#[cfg(test)]
pub(crate) fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}
