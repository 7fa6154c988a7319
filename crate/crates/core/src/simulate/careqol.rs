//! Synthetic caregiver cohort with weekly depression scores.
//!
//! Stands in for a mobile-health study: weekly symptom scores, demographic
//! covariates, two weekly activity measures, and a randomized push
//! notification arm. Scores follow a subject-level AR(1) around the baseline
//! score, so subjects prone to depressive episodes also spend more weeks
//! outside the at-risk set.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::event_data::{Covariates, Measurement};
use crate::seed;

/// Model terms for the restricted mean of the time to a depressive state.
pub const TERMS: [&str; 10] = [
    "1",
    "non_hispanic",
    "age",
    "white",
    "male",
    "tbi_independent",
    "tbi_partial",
    "sleep",
    "steps",
    "push",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CareQolLike {
    pub n: usize,
    /// Last scheduled week.
    pub weeks: usize,
    /// Score rise over baseline that marks a depressive state.
    pub threshold: f64,
    /// Share of subjects leaving the study early.
    pub dropout: f64,
}

impl Default for CareQolLike {
    fn default() -> Self {
        CareQolLike { n: 257, weeks: 12, threshold: 2.0, dropout: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub censor_time: f64,
    pub full_history: bool,
    pub baseline: Covariates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovariateUpdate {
    pub subject_id: String,
    pub time: f64,
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticStudy {
    pub measurements: Vec<Measurement>,
    pub subjects: Vec<SubjectRecord>,
    pub time_varying: Vec<CovariateUpdate>,
}

struct Raw {
    record: SubjectRecord,
    scores: Vec<f64>,
    sleep: Vec<f64>,
    steps: Vec<f64>,
}

fn bern<R: Rng>(rng: &mut R, p: f64) -> f64 {
    f64::from(u8::from(rng.random_bool(p)))
}

impl CareQolLike {
    fn draw_subject(&self, i: usize, seed: u64) -> Raw {
        let mut rng = seed::rng(seed::derive(seed, i));
        let z = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

        let age = (45.0 + 12.0 * z(&mut rng)).clamp(20.0, 80.0).round();
        let dependence: f64 = rng.random();
        let mut baseline = Covariates::new();
        baseline.insert("non_hispanic".into(), bern(&mut rng, 0.9));
        baseline.insert("age".into(), age);
        baseline.insert("white".into(), bern(&mut rng, 0.8));
        baseline.insert("male".into(), bern(&mut rng, 0.2));
        baseline.insert("tbi_independent".into(), f64::from(u8::from(dependence >= 0.7)));
        baseline.insert("tbi_partial".into(), f64::from(u8::from((0.3..0.7).contains(&dependence))));
        let push = bern(&mut rng, 0.5);
        baseline.insert("push".into(), push);

        let proneness = z(&mut rng);
        let sleep_mean = 400.0 + 40.0 * z(&mut rng) - 10.0 * proneness;
        let steps_mean = (7000.0 + 2500.0 * z(&mut rng) - 600.0 * proneness).max(500.0);
        let shock = Normal::new(0.0, 1.6).expect("valid sd");

        let mut scores = Vec::with_capacity(self.weeks + 1);
        let mut sleep = Vec::with_capacity(self.weeks + 1);
        let mut steps = Vec::with_capacity(self.weeks + 1);
        let start = 55.0 + 8.0 * z(&mut rng);
        let mut excess = 0.0;
        for week in 0..=self.weeks {
            let s = sleep_mean + 30.0 * z(&mut rng);
            let st = (steps_mean + 1500.0 * z(&mut rng)).max(0.0);
            if week > 0 {
                let drift = 0.5 + 0.9 * proneness + 0.4 * push - 0.00015 * (st - 7000.0);
                excess = 0.6 * excess + 0.4 * drift + shock.sample(&mut rng);
            }
            scores.push(start + excess);
            sleep.push(s);
            steps.push(st);
        }
        let censor_time = if rng.random_bool(self.dropout) {
            rng.random_range(4..self.weeks) as f64
        } else {
            self.weeks as f64
        };
        let full_history = rng.random_bool(0.5);
        Raw {
            record: SubjectRecord { subject_id: format!("cg{:03}", i + 1), censor_time, full_history, baseline },
            scores,
            sleep,
            steps,
        }
    }

    /// Generates the study. Sleep and step counts are standardized over all
    /// subject-weeks before they are reported.
    pub fn generate(&self, seed: u64) -> SyntheticStudy {
        let raw: Vec<Raw> = (0..self.n).map(|i| self.draw_subject(i, seed)).collect();
        let standardize = |pick: fn(&Raw) -> &Vec<f64>| -> (f64, f64) {
            let all: Vec<f64> = raw.iter().flat_map(|r| pick(r).iter().copied()).collect();
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let sd = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            (mean, sd)
        };
        let (sleep_mean, sleep_sd) = standardize(|r| &r.sleep);
        let (steps_mean, steps_sd) = standardize(|r| &r.steps);

        let mut study = SyntheticStudy { measurements: Vec::new(), subjects: Vec::new(), time_varying: Vec::new() };
        for r in raw {
            let id = &r.record.subject_id;
            let last = r.record.censor_time as usize;
            for week in 0..=last {
                let time = week as f64;
                study.measurements.push(Measurement { subject_id: id.clone(), time, value: round3(r.scores[week]) });
                for (name, value) in [
                    ("sleep", (r.sleep[week] - sleep_mean) / sleep_sd),
                    ("steps", (r.steps[week] - steps_mean) / steps_sd),
                ] {
                    study.time_varying.push(CovariateUpdate {
                        subject_id: id.clone(),
                        time,
                        name: name.into(),
                        value: round3(value),
                    });
                }
            }
            study.subjects.push(r.record);
        }
        study
    }
}

// keeps the CSV files short and their round trip exact
fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}
