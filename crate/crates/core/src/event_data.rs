//! Alternating recurrent event data and its windowed longitudinal form.
//!
//! A subject alternates between being at risk for a primary event and being
//! inside an episode that ends with a secondary event. For every window start
//! `t` on a grid, [`build_windows`] records the time to the first event of
//! either kind after `t`, whether it was observed before censoring, and
//! whether the subject was at risk for the primary event at `t`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};

pub type Covariates = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Primary,
    Secondary,
}

/// One episode: entry at `primary`, exit at `secondary`.
///
/// `secondary` is `None` when the episode is still open at censoring.
#[derive(Clone, Debug, PartialEq)]
pub struct EventPair {
    pub index: i64,
    pub primary: f64,
    pub secondary: Option<f64>,
}

impl EventPair {
    pub fn time(&self, kind: EventKind) -> Option<f64> {
        match kind {
            EventKind::Primary => Some(self.primary),
            EventKind::Secondary => self.secondary,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectHistory {
    pub id: String,
    /// Ordered episodes. Pre-study episodes carry negative indices and times.
    pub pairs: Vec<EventPair>,
    pub censor_time: f64,
    pub baseline: Covariates,
    /// Time-stamped covariate updates, ascending in time.
    pub time_varying: Vec<(f64, Covariates)>,
    /// Marks subjects whose full pre-study record is available (partial
    /// history regime P3).
    pub full_history: bool,
}

impl SubjectHistory {
    /// Builds a subject from `(primary, secondary)` times. Pairs whose primary
    /// time is negative are numbered `-q, …, -1`; the rest `0, 1, …`.
    pub fn new(id: impl Into<String>, pairs: &[(f64, Option<f64>)], censor_time: f64) -> Self {
        let q = pairs.iter().filter(|(p, _)| *p < 0.0).count() as i64;
        let pairs = pairs
            .iter()
            .enumerate()
            .map(|(k, &(primary, secondary))| EventPair {
                index: k as i64 - q,
                primary,
                secondary,
            })
            .collect();
        SubjectHistory {
            id: id.into(),
            pairs,
            censor_time,
            baseline: Covariates::new(),
            time_varying: Vec::new(),
            full_history: true,
        }
    }

    pub fn with_baseline(mut self, name: &str, value: f64) -> Self {
        self.baseline.insert(name.to_string(), value);
        self
    }

    pub fn on_study_pairs(&self) -> impl Iterator<Item = &EventPair> {
        self.pairs.iter().filter(|p| p.index >= 0)
    }

    pub fn pre_study_pairs(&self) -> impl Iterator<Item = &EventPair> {
        self.pairs.iter().filter(|p| p.index < 0)
    }

    /// Baseline covariates overlaid with the most recent time-varying values
    /// recorded at or before `t`.
    pub fn covariates_at(&self, t: f64) -> Covariates {
        let mut out = self.baseline.clone();
        for (_, values) in self.time_varying.iter().take_while(|(time, _)| *time <= t) {
            for (k, v) in values {
                out.insert(k.clone(), *v);
            }
        }
        out
    }

    /// Whether `t` falls inside an episode, i.e. the last primary event at or
    /// before `t` has not yet been followed by its secondary event.
    pub fn in_episode_at(&self, t: f64) -> bool {
        self.pairs
            .iter()
            .rev()
            .find(|p| p.primary <= t)
            .is_some_and(|p| p.secondary.is_none_or(|s| s > t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Rule {
    NonFinite,
    PrimaryNotBeforeSecondary,
    OverlapsPrevious { previous: i64 },
    OpenEpisodeNotLast,
    AfterCensoring,
    OpenAtStudyStart,
    IndexOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub pair: Option<i64>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let j = self.pair.map(|j| j.to_string()).unwrap_or_else(|| "-".into());
        match &self.rule {
            Rule::NonFinite => write!(f, "non-finite time at j={j}"),
            Rule::PrimaryNotBeforeSecondary => write!(f, "primary ≥ secondary at j={j}"),
            Rule::OverlapsPrevious { previous } => {
                write!(f, "pair j={j} starts before pair j={previous} ends")
            }
            Rule::OpenEpisodeNotLast => write!(f, "open episode at j={j} is not the last pair"),
            Rule::AfterCensoring => write!(f, "event after censoring at j={j}"),
            Rule::OpenAtStudyStart => write!(f, "episode j={j} is open at study start t=0"),
            Rule::IndexOrder => write!(f, "pair index j={j} out of sequence"),
        }
    }
}

/// Checks the structural invariants of a subject. Returns an empty list when
/// the subject is valid.
///
/// Events landing exactly on the censoring time are accepted: a window sees
/// them as censored because `δ = I(X < C)`.
pub fn validate_subject(subject: &SubjectHistory) -> Vec<Violation> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<Violation>, j: i64, rule: Rule| {
        out.push(Violation { pair: Some(j), rule })
    };
    if subject.censor_time.is_nan() {
        out.push(Violation { pair: None, rule: Rule::NonFinite });
    }
    let last = subject.pairs.len().saturating_sub(1);
    for (k, pair) in subject.pairs.iter().enumerate() {
        let j = pair.index;
        if !pair.primary.is_finite() || pair.secondary.is_some_and(|s| !s.is_finite()) {
            push(&mut out, j, Rule::NonFinite);
            continue;
        }
        if k > 0 && pair.index != subject.pairs[k - 1].index + 1 {
            push(&mut out, j, Rule::IndexOrder);
        }
        if (pair.index < 0) != (pair.primary < 0.0) {
            push(&mut out, j, Rule::IndexOrder);
        }
        match pair.secondary {
            Some(s) if pair.primary >= s => push(&mut out, j, Rule::PrimaryNotBeforeSecondary),
            None if k != last => push(&mut out, j, Rule::OpenEpisodeNotLast),
            _ => {}
        }
        if k > 0 {
            let prev = &subject.pairs[k - 1];
            let prev_end = prev.secondary.unwrap_or(prev.primary);
            if pair.primary <= prev_end {
                push(&mut out, j, Rule::OverlapsPrevious { previous: prev.index });
            }
        }
        let latest = pair.secondary.unwrap_or(pair.primary);
        if latest > subject.censor_time {
            push(&mut out, j, Rule::AfterCensoring);
        }
        if pair.primary <= 0.0 && pair.secondary.is_none_or(|s| s > 0.0) {
            push(&mut out, j, Rule::OpenAtStudyStart);
        }
    }
    out
}

/// Index of the first event of `kind` strictly after `t`, among observed
/// events.
pub fn eta(subject: &SubjectHistory, t: f64, kind: EventKind) -> Option<i64> {
    subject
        .pairs
        .iter()
        .find(|p| p.time(kind).is_some_and(|x| x > t))
        .map(|p| p.index)
}

fn next_event_time(subject: &SubjectHistory, t: f64, kind: EventKind) -> Option<f64> {
    subject.pairs.iter().filter_map(|p| p.time(kind)).find(|&x| x > t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid {
    starts: Vec<f64>,
    tau: f64,
}

impl WindowGrid {
    pub fn new(starts: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidInput(format!("window length must be positive, got {tau}")));
        }
        if starts.is_empty() {
            return Err(Error::InvalidInput("window grid is empty".into()));
        }
        if starts.iter().any(|s| !s.is_finite()) || starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("window starts must be finite and strictly increasing".into()));
        }
        Ok(WindowGrid { starts, tau })
    }

    /// `count` starts beginning at `first`, spaced `step` apart.
    pub fn regular(first: f64, step: f64, count: usize, tau: f64) -> Result<Self> {
        Self::new((0..count).map(|k| first + step * k as f64).collect(), tau)
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.starts.iter().position(|&s| s == t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowObservation {
    pub subject_id: String,
    /// Position of `t` in the grid.
    pub window: usize,
    pub t: f64,
    /// Time from `t` to the first observed event of either kind, or to
    /// censoring.
    pub x: f64,
    pub delta: bool,
    pub at_risk: bool,
    pub residual_censoring: f64,
    pub covariates: Covariates,
}

/// Builds the windowed rows for one subject. Windows starting at or after
/// the censoring time are dropped.
///
/// `covariates` receives the subject and the window start and must only use
/// information available at that time.
pub fn build_windows<F>(
    subject: &SubjectHistory,
    grid: &WindowGrid,
    covariates: F,
) -> Result<Vec<WindowObservation>>
where
    F: Fn(&SubjectHistory, f64) -> Result<Covariates>,
{
    let mut rows = Vec::new();
    for (window, &t) in grid.starts().iter().enumerate() {
        if t >= subject.censor_time {
            break;
        }
        let primary = next_event_time(subject, t, EventKind::Primary).map(|x| x - t);
        let secondary = next_event_time(subject, t, EventKind::Secondary).map(|x| x - t);
        let residual_censoring = subject.censor_time - t;
        let x = [primary, secondary]
            .into_iter()
            .flatten()
            .fold(residual_censoring, f64::min);
        let at_risk = match (primary, secondary) {
            (Some(p), Some(s)) => p < s,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            // Nothing observed after t: the next event kind is fixed by
            // whether t sits inside an episode.
            (None, None) => !subject.in_episode_at(t),
        };
        let z = covariates(subject, t)?;
        if let Some((name, &value)) = z.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteCovariate {
                subject: subject.id.clone(),
                t,
                name: name.clone(),
                value,
            });
        }
        rows.push(WindowObservation {
            subject_id: subject.id.clone(),
            window,
            t,
            x,
            delta: x < residual_censoring,
            at_risk,
            residual_censoring,
            covariates: z,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowTally {
    /// Subjects uncensored at the window start.
    pub n: usize,
    /// Of those, subjects at risk for the primary event.
    pub n_at_risk: usize,
}

#[derive(Clone, Debug)]
pub struct LongitudinalDataset {
    pub rows: Vec<WindowObservation>,
    pub grid: WindowGrid,
    pub tallies: Vec<WindowTally>,
}

impl LongitudinalDataset {
    pub fn n_subjects(&self) -> usize {
        let mut n = 0;
        let mut last: Option<&str> = None;
        for r in &self.rows {
            if last != Some(r.subject_id.as_str()) {
                n += 1;
                last = Some(&r.subject_id);
            }
        }
        n
    }
}

/// Stacks the windowed rows of all subjects, ordered by subject id and then
/// by window start.
pub fn assemble_dataset<F>(
    subjects: &[SubjectHistory],
    grid: &WindowGrid,
    covariates: F,
) -> Result<LongitudinalDataset>
where
    F: Fn(&SubjectHistory, f64) -> Result<Covariates>,
{
    let mut seen = HashSet::new();
    for s in subjects {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateSubject(s.id.clone()));
        }
    }
    let mut order: Vec<&SubjectHistory> = subjects.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let mut rows = Vec::new();
    let mut tallies = vec![WindowTally { n: 0, n_at_risk: 0 }; grid.len()];
    for s in order {
        for row in build_windows(s, grid, &covariates)? {
            tallies[row.window].n += 1;
            tallies[row.window].n_at_risk += usize::from(row.at_risk);
            rows.push(row);
        }
    }
    Ok(LongitudinalDataset { rows, grid: grid.clone(), tallies })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub subject_id: String,
    pub time: f64,
    pub value: f64,
}

/// Turns repeated scores into alternating events.
///
/// The first measurement of each subject is its baseline. An episode starts at
/// the first measurement with `value ≥ baseline + threshold` and ends at the
/// next measurement that falls back below that level. Unless `censor_times`
/// supplies one, the censoring time is the last measurement time; later
/// measurements are ignored when an explicit censoring time is given.
pub fn derive_alternating_events(
    measurements: &[Measurement],
    threshold: f64,
    censor_times: Option<&HashMap<String, f64>>,
) -> Result<Vec<SubjectHistory>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_subject: HashMap<&str, Vec<&Measurement>> = HashMap::new();
    for m in measurements {
        if !m.time.is_finite() || !m.value.is_finite() {
            return Err(Error::InvalidSubject {
                subject: m.subject_id.clone(),
                reason: format!("non-finite measurement at time {}", m.time),
            });
        }
        by_subject
            .entry(&m.subject_id)
            .or_insert_with(|| {
                order.push(&m.subject_id);
                Vec::new()
            })
            .push(m);
    }
    if let Some(ct) = censor_times {
        let mut missing: Vec<&String> = ct.keys().filter(|k| !by_subject.contains_key(k.as_str())).collect();
        missing.sort();
        if let Some(id) = missing.first() {
            return Err(Error::InvalidSubject {
                subject: id.to_string(),
                reason: "no measurements".into(),
            });
        }
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut series = by_subject.remove(id).unwrap_or_default();
        series.sort_by(|a, b| a.time.total_cmp(&b.time));
        if series.windows(2).any(|w| w[0].time == w[1].time) {
            return Err(Error::InvalidSubject {
                subject: id.to_string(),
                reason: "duplicate measurement times".into(),
            });
        }
        let explicit = censor_times.and_then(|c| c.get(id)).copied();
        let censor = explicit.unwrap_or_else(|| series.last().map_or(0.0, |m| m.time));
        let Some(first) = series.first() else {
            return Err(Error::InvalidSubject { subject: id.to_string(), reason: "no measurements".into() });
        };
        let level = first.value + threshold;
        let mut pairs: Vec<(f64, Option<f64>)> = Vec::new();
        let mut open: Option<f64> = None;
        for m in series.iter().skip(1).filter(|m| m.time <= censor) {
            match open {
                None if m.value >= level => open = Some(m.time),
                Some(start) if m.value < level => {
                    pairs.push((start, Some(m.time)));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(start) = open {
            pairs.push((start, None));
        }
        out.push(SubjectHistory::new(id, &pairs, censor));
    }
    Ok(out)
}
