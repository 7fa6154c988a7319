//! Simulation scenarios and the replicate harness.
//!
//! Both scenarios use the same construction. An oracle primary stream is
//! drawn as if the subject were always at risk. An oracle event that arrives
//! while the subject is at risk opens an episode whose length is drawn from a
//! subject-specific secondary hazard; oracle events inside an episode are
//! never observed. The time to the next oracle event is the counterfactual
//! `T(t)`, and the probability of being at risk given the oracle past is
//! available in closed form.

pub mod careqol;
pub mod correlated;
mod harness;
pub mod independent;

pub use harness::{
    run_replicates, window_bias_profile, Estimate, Method, MetricRow, MetricsTable, ReplicateResult, SimConfig,
    SimulationRun, WindowBiasRow, WindowMean,
};

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::event_data::SubjectHistory;
use crate::exec::Execution;
use crate::Result;

/// Hazard that switches value at a calendar time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiecewiseHazard {
    pub before: f64,
    pub after: f64,
    pub change: f64,
}

impl PiecewiseHazard {
    pub fn constant(rate: f64) -> Self {
        PiecewiseHazard { before: rate, after: rate, change: f64::INFINITY }
    }

    /// `∫_a^b h(u) du` for `a ≤ b`.
    pub fn cumulative(&self, a: f64, b: f64) -> f64 {
        let early = (b.min(self.change) - a.min(self.change)).max(0.0);
        let late = (b.max(self.change) - a.max(self.change)).max(0.0);
        early * self.before + late * self.after
    }

    /// Duration `d` with `cumulative(start, start + d) = h`.
    pub fn invert(&self, start: f64, h: f64) -> f64 {
        if start < self.change {
            let cap = (self.change - start) * self.before;
            if h <= cap {
                return h / self.before;
            }
            return (self.change - start) + (h - cap) / self.after;
        }
        h / self.after
    }
}

/// Subject-level secondary (episode-ending) hazard, `scale · h(u)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SecondaryRate {
    pub scale: f64,
    pub shape: PiecewiseHazard,
}

impl SecondaryRate {
    pub fn cumulative(&self, a: f64, b: f64) -> f64 {
        self.scale * self.shape.cumulative(a, b)
    }

    pub fn draw_duration<R: Rng>(&self, start: f64, rng: &mut R) -> f64 {
        let e: f64 = Exp1.sample(rng);
        self.shape.invert(start, e / self.scale)
    }
}

/// Oracle quantities kept alongside each generated subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTruth {
    /// Every oracle primary time from the stream origin up to the horizon.
    pub oracle: Vec<f64>,
    pub secondary: SecondaryRate,
}

impl SubjectTruth {
    /// `P{R(t) = 1}` given the oracle stream. Whether or not the last oracle
    /// event in `(0, t]` started an episode, the subject is busy at that
    /// event, and by memorylessness of the episode duration it is still busy
    /// at `t` with probability `exp{-Γ(s, t)}`. With no such event the
    /// subject is free, since episodes are closed at 0.
    pub fn pi(&self, t: f64) -> f64 {
        let k = self.oracle.partition_point(|&s| s <= t);
        match self.oracle[..k].last() {
            Some(&s) if s > 0.0 => -(-self.secondary.cumulative(s, t)).exp_m1(),
            _ => 1.0,
        }
    }

    /// `min{T(t), τ}` where `T(t)` is the time to the next oracle event.
    pub fn restricted_time(&self, t: f64, tau: f64) -> f64 {
        let k = self.oracle.partition_point(|&s| s <= t);
        self.oracle.get(k).map_or(tau, |&s| (s - t).min(tau))
    }
}

/// A generated cohort with oracle truth, in subject order.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub subjects: Vec<SubjectHistory>,
    pub truth: Vec<SubjectTruth>,
}

/// Turns an oracle stream into observed alternating events.
///
/// The subject is at risk at `origin`. An episode still open at time 0 is
/// closed at 0. Events after `censor` are dropped and an episode open at
/// `censor` is left without its secondary time. A subject censored at or
/// before time 0 keeps no events at all.
pub fn thin<R: Rng>(
    id: String,
    oracle: &[f64],
    secondary: &SecondaryRate,
    censor: f64,
    rng: &mut R,
) -> SubjectHistory {
    if !(censor > 0.0) {
        return SubjectHistory::new(id, &[], censor);
    }
    let mut pairs: Vec<(f64, Option<f64>)> = Vec::new();
    let mut episode_end = f64::NEG_INFINITY;
    for &e in oracle {
        if e < episode_end {
            continue;
        }
        // keep a zero-length episode strictly ordered
        let mut end = (e + secondary.draw_duration(e, rng)).max(e.next_up());
        if e < 0.0 && end > 0.0 {
            end = 0.0;
        }
        episode_end = end;
        if e >= censor {
            break;
        }
        pairs.push((e, (end <= censor).then_some(end)));
    }
    SubjectHistory::new(id, &pairs, censor)
}

/// Inverse-CDF Laplace draw.
pub fn laplace<R: Rng>(mu: f64, b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    mu - b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// `P{min(cap, L) > t}` for `L ~ Laplace(mu, b)`.
pub fn laplace_censor_survival(t: f64, mu: f64, b: f64, cap: f64) -> f64 {
    if t >= cap {
        return 0.0;
    }
    if t < mu {
        1.0 - 0.5 * ((t - mu) / b).exp()
    } else {
        0.5 * (-(t - mu) / b).exp()
    }
}

/// Administrative censoring at `cap` combined with a Laplace dropout time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Censoring {
    pub enabled: bool,
    pub cap: f64,
    pub mu: f64,
    pub b: f64,
}

impl Default for Censoring {
    fn default() -> Self {
        Censoring { enabled: true, cap: 12.0, mu: 12.0, b: 1.5 }
    }
}

impl Censoring {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.enabled {
            self.cap.min(laplace(self.mu, self.b, rng))
        } else {
            self.cap
        }
    }

    pub fn survival(&self, t: f64) -> f64 {
        if self.enabled {
            laplace_censor_survival(t, self.mu, self.b, self.cap)
        } else if t < self.cap {
            1.0
        } else {
            0.0
        }
    }
}

/// A data-generating process usable by the replicate harness.
pub trait Scenario: Sync {
    fn name(&self) -> &'static str;
    fn n(&self) -> usize;
    fn generate(&self, n: usize, seed: u64) -> Result<Cohort>;
    fn grid(&self) -> crate::event_data::WindowGrid;
    fn lookback(&self) -> f64;
    fn model_terms(&self) -> Vec<&'static str>;
    fn true_beta(&self) -> Vec<f64>;
}

/// Generates cohorts for several seeds.
pub fn generate_many<S: Scenario>(scenario: &S, n: usize, seeds: &[u64], exec: Execution) -> Result<Vec<Cohort>> {
    exec.map(seeds, |&s| scenario.generate(n, s)).into_iter().collect()
}
