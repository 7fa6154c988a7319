//! Continuous-covariate scenario with independent exponential gap times.
//!
//! Each subject's primary rate is chosen so that the restricted mean of the
//! next gap equals a linear function of `(z1, z2, z3)`. Episode lengths use a
//! separate rate driven partly by the same covariates and partly by extra
//! covariates that only the weight model sees.

use rand::Rng;
use rand_distr::{Beta, ChiSquared, Distribution, Normal, StandardNormal};

use super::{thin, Censoring, Cohort, PiecewiseHazard, Scenario, SecondaryRate, SubjectTruth};
use crate::event_data::{SubjectHistory, WindowGrid};
use crate::seed;
use crate::{Error, Result};

pub const TERMS: [&str; 4] = ["1", "z1", "z2", "z1*I(z3>=0)"];

pub const TRUE_BETA: [f64; 4] = [0.5, 0.25, -0.4, 0.3];

const MAX_ATTEMPTS: usize = 10_000;

/// `E[min(T, τ)]` for `T ~ Exp(λ)`.
pub fn restricted_mean_exp(lambda: f64, tau: f64) -> f64 {
    -(-lambda * tau).exp_m1() / lambda
}

/// Rate `λ` with `E[min(T, τ)] = target` for `T ~ Exp(λ)`, by bisection.
pub fn solve_lambda_from_rmst(target: f64, tau: f64) -> Result<f64> {
    if !(target > 0.0 && target < tau) {
        return Err(Error::NoSolution(format!(
            "restricted mean {target} must lie strictly between 0 and tau = {tau}"
        )));
    }
    // restricted_mean_exp is decreasing in λ
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while restricted_mean_exp(hi, tau) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let m = if mid == 0.0 { tau } else { restricted_mean_exp(mid, tau) };
        if m > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndependentScenario {
    pub n: usize,
    pub beta: [f64; 4],
    pub lambda_range: (f64, f64),
    /// Standard deviation of `x2`.
    pub x2_sd: f64,
    pub censoring: Censoring,
    pub origin: f64,
    pub full_history_fraction: f64,
    pub tau: f64,
}

impl Default for IndependentScenario {
    fn default() -> Self {
        IndependentScenario {
            n: 750,
            beta: TRUE_BETA,
            lambda_range: (1.0 / 6.0, 5.0 / 8.0),
            x2_sd: 0.5,
            censoring: Censoring::default(),
            origin: -12.0,
            full_history_fraction: 0.5,
            tau: 1.0,
        }
    }
}

/// Subject-level draws before any events.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDraw {
    pub z: [f64; 3],
    /// `x1, …, x6`.
    pub x: [f64; 6],
    pub lambda: f64,
    pub gamma: f64,
}

impl IndependentScenario {
    pub fn target_mean(&self, z: &[f64; 3]) -> f64 {
        let [b0, b1, b2, b3] = self.beta;
        b0 + b1 * z[0] + b2 * z[1] + b3 * z[0] * f64::from(u8::from(z[2] >= 0.0))
    }

    /// Draws covariates until the implied rate falls inside `lambda_range`,
    /// then the remaining covariates and the episode rate.
    pub fn draw_subject<R: Rng>(&self, rng: &mut R) -> Result<SubjectDraw> {
        let beta = Beta::new(5.0, 1.0).expect("valid beta");
        let (lo, hi) = self.lambda_range;
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let z1 = beta.sample(rng);
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let z2 = a;
            let z3 = 0.2 * a + (1.0 - 0.04f64).sqrt() * b;
            let z = [z1, z2, z3];
            // the restricted mean falls as the rate rises
            let m = self.target_mean(&z);
            if m < restricted_mean_exp(hi, self.tau) || m > restricted_mean_exp(lo, self.tau) {
                continue;
            }
            let lambda = solve_lambda_from_rmst(m, self.tau)?.clamp(lo, hi);
            accepted = Some((z, lambda));
            break;
        }
        let (z, lambda) = accepted.ok_or(Error::RejectionLimit(MAX_ATTEMPTS))?;
        let x1: f64 = StandardNormal.sample(rng);
        let x2 = Normal::new(1.0, self.x2_sd).expect("valid sd").sample(rng);
        let x3 = ChiSquared::new(3.0).expect("valid df").sample(rng);
        let x4: f64 = StandardNormal.sample(rng);
        let x5: f64 = StandardNormal.sample(rng);
        let x6 = f64::from(u8::from(rng.random_bool(0.5)));
        let gamma = (x2 + 0.5 * x3 + 10.0 * x6 * x6 - 5.0 * (z[0] + z[2])).exp();
        Ok(SubjectDraw { z, x: [x1, x2, x3, x4, x5, x6], lambda, gamma })
    }

    fn horizon(&self) -> f64 {
        self.censoring.cap + self.tau + 1.0
    }

    /// Poisson stream of rate `λ` from `origin` until past the horizon.
    pub fn draw_stream<R: Rng>(&self, lambda: f64, rng: &mut R) -> Vec<f64> {
        let mut events = Vec::new();
        let mut s = self.origin;
        while s <= self.horizon() {
            let e: f64 = rand_distr::Exp1.sample(rng);
            s += e / lambda;
            events.push(s);
        }
        events
    }

    fn subject(&self, i: usize, width: usize, seed: u64) -> Result<(SubjectHistory, SubjectTruth)> {
        let mut rng = seed::rng(seed::derive(seed, i));
        let draw = self.draw_subject(&mut rng)?;
        let oracle = self.draw_stream(draw.lambda, &mut rng);
        let secondary = SecondaryRate { scale: draw.gamma, shape: PiecewiseHazard::constant(1.0) };
        let censor = self.censoring.draw(&mut rng);
        let full = rng.random_bool(self.full_history_fraction);
        let mut subject = thin(format!("s{:0width$}", i + 1), &oracle, &secondary, censor, &mut rng);
        for (k, v) in draw.z.iter().enumerate() {
            subject = subject.with_baseline(&format!("z{}", k + 1), *v);
        }
        for (k, v) in draw.x.iter().enumerate() {
            subject = subject.with_baseline(&format!("x{}", k + 1), *v);
        }
        subject.full_history = full;
        Ok((subject, SubjectTruth { oracle, secondary }))
    }

    /// Pearson correlation between `λ` and `γ` over `n` subject draws.
    pub fn lambda_gamma_correlation(&self, n: usize, seed: u64) -> Result<f64> {
        let mut rng = seed::rng(seed);
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let d = self.draw_subject(&mut rng)?;
            pairs.push((d.lambda, d.gamma));
        }
        let nf = n as f64;
        let ml = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
        let mg = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
        let (mut c, mut vl, mut vg) = (0.0, 0.0, 0.0);
        for (l, g) in &pairs {
            c += (l - ml) * (g - mg);
            vl += (l - ml).powi(2);
            vg += (g - mg).powi(2);
        }
        Ok(c / (vl * vg).sqrt())
    }
}

impl Scenario for IndependentScenario {
    fn name(&self) -> &'static str {
        "independent"
    }

    fn n(&self) -> usize {
        self.n
    }

    fn generate(&self, n: usize, seed: u64) -> Result<Cohort> {
        let width = n.to_string().len().max(4);
        let (subjects, truth) = (0..n)
            .map(|i| self.subject(i, width, seed))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
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
        self.beta.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::super::correlated::ks_statistic;
    use super::*;
    use crate::event_data::validate_subject;

    #[test]
    fn lambda_round_trip() {
        let target = (1.0 - (-0.5f64).exp()) / 0.5;
        assert!((target - 0.78694).abs() < 1e-5);
        assert!((solve_lambda_from_rmst(target, 1.0).unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn lambda_for_half_matches_quadrature() {
        let lambda = solve_lambda_from_rmst(0.5, 1.0).unwrap();
        assert!((lambda - 1.5936).abs() < 1e-4, "{lambda}");
        // ∫₀^τ yλe^{−λy}dy + τe^{−λτ} by composite Simpson
        let n = 2000;
        let h = 1.0 / n as f64;
        let f = |y: f64| y * lambda * (-lambda * y).exp();
        let mut s = f(0.0) + f(1.0);
        for k in 1..n {
            s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = s * h / 3.0 + (-lambda).exp();
        assert!((integral - 0.5).abs() < 1e-10);
    }

    #[test]
    fn lambda_near_tau_is_small() {
        let lambda = solve_lambda_from_rmst(0.999, 1.0).unwrap();
        assert!(lambda > 0.0 && lambda < 0.01, "{lambda}");
        assert!(solve_lambda_from_rmst(1.0, 1.0).is_err());
        assert!(solve_lambda_from_rmst(0.0, 1.0).is_err());
    }

    #[test]
    fn accepted_rates_respect_the_range() {
        let sc = IndependentScenario::default();
        let mut rng = seed::rng(3);
        for _ in 0..2000 {
            let d = sc.draw_subject(&mut rng).unwrap();
            assert!(d.lambda >= 1.0 / 6.0 && d.lambda <= 5.0 / 8.0);
            let m = restricted_mean_exp(d.lambda, 1.0);
            assert!((m - sc.target_mean(&d.z)).abs() < 1e-9);
        }
    }

    #[test]
    fn impossible_range_hits_the_rejection_limit() {
        let sc = IndependentScenario { beta: [5.0, 0.0, 0.0, 0.0], ..Default::default() };
        let mut rng = seed::rng(3);
        assert!(matches!(sc.draw_subject(&mut rng), Err(Error::RejectionLimit(_))));
    }

    #[test]
    fn window_times_are_memoryless() {
        let sc = IndependentScenario::default();
        let mut rng = seed::rng(4);
        let lambda = 0.4;
        let mut sample: Vec<f64> = (0..5000)
            .map(|_| {
                let truth = SubjectTruth {
                    oracle: sc.draw_stream(lambda, &mut rng),
                    secondary: SecondaryRate { scale: 1.0, shape: PiecewiseHazard::constant(1.0) },
                };
                // unrestricted time to the next event from t = 5
                truth.restricted_time(5.0, f64::INFINITY)
            })
            .filter(|x| x.is_finite())
            .collect();
        let n = sample.len();
        let d = ks_statistic(&mut sample, |x| 1.0 - (-lambda * x).exp());
        assert!(d < 1.628 / (n as f64).sqrt(), "D = {d}");
    }

    #[test]
    fn lambda_gamma_correlation_is_weak() {
        let sc = IndependentScenario::default();
        let r = sc.lambda_gamma_correlation(20_000, 8).unwrap();
        assert!(r.abs() < 0.05, "{r}");
    }

    #[test]
    fn cohorts_are_valid() {
        let sc = IndependentScenario::default();
        let c = sc.generate(300, 2).unwrap();
        for s in &c.subjects {
            assert!(validate_subject(s).is_empty(), "{s:?}");
            for k in ["z1", "z2", "z3", "x1", "x2", "x3", "x4", "x5", "x6"] {
                assert!(s.baseline.contains_key(k));
            }
        }
        assert_eq!(c.subjects, sc.generate(300, 2).unwrap().subjects);
    }
}
