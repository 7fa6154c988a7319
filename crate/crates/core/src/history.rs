//! Dynamic history covariates.
//!
//! At a window start `t` a subject's past is summarised by seven numbers:
//! mean, last and time-since quantities for the at-risk gaps and for the
//! episodes, plus the number of primary events seen. Which past events are
//! visible depends on the [`Regime`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::event_data::{Covariates, SubjectHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Full,
    /// At most four pre-study pairs.
    P1,
    /// At most two pre-study pairs.
    P2,
    /// Full history for flagged subjects, on-study only for the rest.
    P3,
    /// On-study events only.
    P4,
    Reflective,
    None,
}

impl Regime {
    pub const ALL: [Regime; 7] = [
        Regime::Full,
        Regime::P1,
        Regime::P2,
        Regime::P3,
        Regime::P4,
        Regime::Reflective,
        Regime::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::P1 => "p1",
            Regime::P2 => "p2",
            Regime::P3 => "p3",
            Regime::P4 => "p4",
            Regime::Reflective => "reflective",
            Regime::None => "none",
        }
    }

    /// Whether history columns are added to the propensity features.
    pub fn uses_history(self) -> bool {
        self != Regime::None
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown history regime `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryConfig {
    pub regime: Regime,
    /// Calendar time where the look-back starts; must be ≤ 0.
    pub lookback: f64,
}

impl HistoryConfig {
    pub fn new(regime: Regime, lookback: f64) -> crate::Result<Self> {
        if !(lookback <= 0.0) || !lookback.is_finite() {
            return Err(Error::Config(format!("history lookback must be finite and ≤ 0, got {lookback}")));
        }
        Ok(HistoryConfig { regime, lookback })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryVector {
    pub mean_gap: f64,
    pub since_primary: f64,
    pub last_gap: f64,
    pub primary_count: f64,
    pub mean_episode: f64,
    pub since_secondary: f64,
    pub last_episode: f64,
}

impl HistoryVector {
    pub const NAMES: [&'static str; 7] = [
        "h_mean_gap",
        "h_since_primary",
        "h_last_gap",
        "h_primary_count",
        "h_mean_episode",
        "h_since_secondary",
        "h_last_episode",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.mean_gap,
            self.since_primary,
            self.last_gap,
            self.primary_count,
            self.mean_episode,
            self.since_secondary,
            self.last_episode,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, f64)> {
        Self::NAMES.into_iter().zip(self.values())
    }
}

/// The Full-regime formulas applied to a set of `(primary, secondary)` pairs,
/// all with primary before `t`. Secondary times at or after `t` are treated as
/// not yet seen.
fn summarise(pairs: &[(f64, Option<f64>)], t: f64, origin: f64, empty_gap: f64) -> HistoryVector {
    let mut gaps = Vec::with_capacity(pairs.len());
    let mut episodes = Vec::with_capacity(pairs.len());
    let mut prev_secondary: Option<f64> = None;
    let mut last_secondary: Option<f64> = None;
    for &(primary, secondary) in pairs {
        gaps.push(primary - prev_secondary.map_or(origin, |s| s.max(origin)));
        match secondary.filter(|&s| s < t) {
            Some(s) => {
                episodes.push(s - primary.max(origin));
                prev_secondary = Some(s);
                last_secondary = Some(s);
            }
            None => prev_secondary = None,
        }
    }
    let mean = |v: &[f64], fallback: f64| {
        if v.is_empty() {
            fallback
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    HistoryVector {
        mean_gap: mean(&gaps, t - origin),
        since_primary: pairs.last().map_or(t - origin, |p| t - p.0),
        last_gap: gaps.last().copied().unwrap_or(empty_gap),
        primary_count: pairs.len() as f64,
        mean_episode: mean(&episodes, t - origin),
        since_secondary: last_secondary.map_or(t - origin, |s| t - s),
        last_episode: episodes.last().copied().unwrap_or(empty_gap),
    }
}

/// Pairs visible at `t` under a prospective regime.
fn visible_pairs(subject: &SubjectHistory, t: f64, cfg: &HistoryConfig) -> Vec<(f64, Option<f64>)> {
    let budget = match cfg.regime {
        Regime::Full => usize::MAX,
        Regime::P1 => 4,
        Regime::P2 => 2,
        Regime::P3 if subject.full_history => usize::MAX,
        Regime::P3 | Regime::P4 | Regime::Reflective | Regime::None => 0,
    };
    if cfg.regime == Regime::None {
        return Vec::new();
    }
    let pre: Vec<&_> = subject
        .pre_study_pairs()
        .filter(|p| p.primary > cfg.lookback)
        .collect();
    let skip = pre.len().saturating_sub(budget);
    pre.into_iter()
        .skip(skip)
        .chain(subject.on_study_pairs())
        .take_while(|p| p.primary < t)
        .map(|p| (p.primary, p.secondary))
        .collect()
}

/// History covariates at `t` using only events strictly before `t`.
///
/// The `Reflective` regime is treated as on-study only here; see
/// [`reflective_history_at`] for the two-sided version. `None` yields the
/// fallback vector.
pub fn history_at(subject: &SubjectHistory, t: f64, cfg: &HistoryConfig) -> HistoryVector {
    let pairs = visible_pairs(subject, t, cfg);
    summarise(&pairs, t, cfg.lookback, -cfg.lookback)
}

/// Two-sided history for retrospective analyses.
///
/// Counts on-study primary events before and after `t`. When the later side
/// has strictly more, the follow-up after `t` is mirrored about `t` and
/// summarised with the usual formulas; otherwise the on-study past is used.
pub fn reflective_history_at(subject: &SubjectHistory, t: f64, cfg: &HistoryConfig) -> HistoryVector {
    let past = HistoryConfig { regime: Regime::P4, ..*cfg };
    let before = subject.on_study_pairs().filter(|p| p.primary < t).count();
    let after = subject
        .on_study_pairs()
        .filter(|p| p.primary > t && p.primary <= subject.censor_time)
        .count();
    if after <= before {
        return history_at(subject, t, &past);
    }
    let floor = (t + cfg.lookback).max(2.0 * t - subject.censor_time);
    // An episode (a, b) after t becomes the episode (2t - b, 2t - a).
    let mut mirrored: Vec<(f64, Option<f64>)> = subject
        .on_study_pairs()
        .filter(|p| p.primary > t)
        .filter_map(|p| p.secondary.map(|s| (2.0 * t - s, Some(2.0 * t - p.primary))))
        .filter(|&(a, _)| a > floor)
        .collect();
    mirrored.reverse();
    summarise(&mirrored, t, floor, -cfg.lookback)
}

/// Dispatches on the configured regime.
pub fn history_for(subject: &SubjectHistory, t: f64, cfg: &HistoryConfig) -> HistoryVector {
    match cfg.regime {
        Regime::Reflective => reflective_history_at(subject, t, cfg),
        _ => history_at(subject, t, cfg),
    }
}

/// Propensity features at `t`: the subject's covariates, the window start
/// as `t`, and the history columns when the regime uses them.
pub fn propensity_features(subject: &SubjectHistory, t: f64, cfg: &HistoryConfig) -> Covariates {
    let mut out = subject.covariates_at(t);
    out.insert("t".to_string(), t);
    if cfg.regime.uses_history() {
        for (name, v) in history_for(subject, t, cfg).named() {
            out.insert(name.to_string(), v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(regime: Regime) -> HistoryConfig {
        HistoryConfig::new(regime, -12.0).unwrap()
    }

    #[test]
    fn fallback_without_events() {
        let s = SubjectHistory::new("a", &[], 20.0);
        let h = history_at(&s, 3.0, &cfg(Regime::Full));
        assert_eq!(h.since_primary, 15.0);
        assert_eq!(h.last_gap, 12.0);
        assert_eq!(h.primary_count, 0.0);
        assert_eq!(h.mean_gap, 15.0);
        assert_eq!(h.last_episode, 12.0);
    }

    #[test]
    fn full_history_example() {
        let s = SubjectHistory::new("a", &[(-4.0, Some(-3.0)), (5.0, Some(8.0))], 20.0);
        let h = history_at(&s, 6.0, &cfg(Regime::Full));
        assert_eq!(h.primary_count, 2.0);
        assert_eq!(h.since_primary, 1.0);
        assert_eq!(h.mean_gap, 8.0);
        assert_eq!(h.last_gap, 8.0);
        // secondary at 8 is not yet seen at t = 6
        assert_eq!(h.mean_episode, 1.0);
        assert_eq!(h.since_secondary, 9.0);
        assert_eq!(history_at(&s, 6.0, &cfg(Regime::P2)), h);
        assert_eq!(history_at(&s, 6.0, &cfg(Regime::P1)), h);
    }

    #[test]
    fn budgets_keep_most_recent_pre_study_pairs() {
        let pre: Vec<(f64, Option<f64>)> =
            (0..6).map(|k| (-11.0 + 2.0 * k as f64, Some(-10.5 + 2.0 * k as f64))).collect();
        let s = SubjectHistory::new("a", &pre, 20.0);
        assert_eq!(history_at(&s, 1.0, &cfg(Regime::Full)).primary_count, 6.0);
        assert_eq!(history_at(&s, 1.0, &cfg(Regime::P1)).primary_count, 4.0);
        let p2 = history_at(&s, 1.0, &cfg(Regime::P2));
        assert_eq!(p2.primary_count, 2.0);
        // first visible gap is measured from the look-back origin
        assert_eq!(p2.mean_gap, ((-3.0 + 12.0) + 1.5) / 2.0);
        assert_eq!(history_at(&s, 1.0, &cfg(Regime::P4)).primary_count, 0.0);
    }

    #[test]
    fn p3_follows_subject_flag() {
        let mut s = SubjectHistory::new("a", &[(-4.0, Some(-3.0)), (5.0, Some(8.0))], 20.0);
        assert_eq!(history_at(&s, 9.0, &cfg(Regime::P3)), history_at(&s, 9.0, &cfg(Regime::Full)));
        s.full_history = false;
        assert_eq!(history_at(&s, 9.0, &cfg(Regime::P3)), history_at(&s, 9.0, &cfg(Regime::P4)));
    }

    #[test]
    fn reflective_uses_future_when_past_is_empty() {
        let s = SubjectHistory::new("a", &[(2.0, Some(3.0)), (5.0, Some(6.0)), (9.0, Some(11.0))], 12.0);
        let h = reflective_history_at(&s, 1.0, &cfg(Regime::Reflective));
        // mirrored episodes: (-9, -7), (-4, -3), (-1, 0); floor = max(-11, -10)
        assert_eq!(h.primary_count, 3.0);
        assert_eq!(h.since_primary, 2.0);
        assert_eq!(h.last_gap, -1.0 - -3.0);
        assert_eq!(h.mean_gap, ((-9.0 + 10.0) + 3.0 + 2.0) / 3.0);
        assert_eq!(h.last_episode, 1.0);
        assert_eq!(h.mean_episode, (2.0 + 1.0 + 1.0) / 3.0);
        assert_eq!(h.since_secondary, 1.0);
    }

    #[test]
    fn reflective_ties_and_past_majority_use_the_past() {
        let tie = SubjectHistory::new(
            "a",
            &[(1.0, Some(2.0)), (3.0, Some(4.0)), (6.0, Some(7.0)), (8.0, Some(9.0))],
            12.0,
        );
        let c = cfg(Regime::Reflective);
        assert_eq!(reflective_history_at(&tie, 5.0, &c), history_at(&tie, 5.0, &cfg(Regime::P4)));
        let past = SubjectHistory::new(
            "b",
            &[(-3.0, Some(-2.0)), (1.0, Some(2.0)), (3.0, Some(4.0)), (5.0, Some(5.5)), (8.0, Some(9.0))],
            12.0,
        );
        let h = reflective_history_at(&past, 6.0, &c);
        assert_eq!(h, history_at(&past, 6.0, &cfg(Regime::P4)));
        assert_eq!(h.primary_count, 3.0);
    }

    #[test]
    fn propensity_features_layout() {
        let s = SubjectHistory::new("a", &[(2.0, Some(3.0))], 12.0).with_baseline("z", 1.0);
        let f = propensity_features(&s, 4.0, &cfg(Regime::Full));
        assert_eq!(f.len(), 9);
        assert_eq!(f["t"], 4.0);
        assert_eq!(f["h_since_primary"], 2.0);
        let f = propensity_features(&s, 4.0, &cfg(Regime::None));
        assert_eq!(f.keys().collect::<Vec<_>>(), vec!["t", "z"]);
    }

    prop_compose! {
        fn arb_subject()(pre in prop::collection::vec((0.1f64..2.0, 0.1f64..2.0), 0..5),
                         post in prop::collection::vec((0.1f64..3.0, 0.1f64..3.0), 0..8),
                         flag in any::<bool>()) -> SubjectHistory {
            let mut pairs = Vec::new();
            let mut clock = -11.0;
            for (g, d) in pre {
                let (p, s) = (clock + g, clock + g + d);
                if s >= 0.0 { break; }
                pairs.push((p, Some(s)));
                clock = s;
            }
            let mut clock: f64 = 0.0;
            for (g, d) in post {
                let (p, s) = (clock + g, clock + g + d);
                if s > 12.0 { break; }
                pairs.push((p, Some(s)));
                clock = s;
            }
            let mut s = SubjectHistory::new("p", &pairs, 12.0);
            s.full_history = flag;
            s
        }
    }

    proptest! {
        #[test]
        fn never_looks_at_the_future(s in arb_subject(), t in 0.0f64..12.0, shift in 0.01f64..5.0) {
            // drop or move everything at or after t; prospective regimes must not notice
            let mut cut = s.clone();
            cut.pairs.retain(|p| p.primary < t);
            if let Some(last) = cut.pairs.last_mut() {
                if last.secondary.is_some_and(|x| x >= t) {
                    last.secondary = Some(t + shift);
                }
            }
            for r in [Regime::Full, Regime::P1, Regime::P2, Regime::P3, Regime::P4] {
                prop_assert_eq!(history_at(&s, t, &cfg(r)), history_at(&cut, t, &cfg(r)));
            }
        }

        #[test]
        fn entries_are_finite_and_count_is_monotone(s in arb_subject(), t in 0.0f64..11.0, dt in 0.0f64..1.0) {
            for r in Regime::ALL {
                let a = history_for(&s, t, &cfg(r));
                prop_assert!(a.values().iter().all(|v| v.is_finite()));
                prop_assert!(a.values().iter().all(|v| *v >= 0.0));
            }
            let a = history_at(&s, t, &cfg(Regime::Full));
            let b = history_at(&s, t + dt, &cfg(Regime::Full));
            prop_assert!(b.primary_count >= a.primary_count);
        }

        #[test]
        fn p4_matches_full_without_pre_study_pairs(s in arb_subject(), t in 0.0f64..12.0) {
            let stripped = SubjectHistory::new(
                "p",
                &s.on_study_pairs().map(|p| (p.primary, p.secondary)).collect::<Vec<_>>(),
                s.censor_time,
            );
            prop_assert_eq!(history_at(&s, t, &cfg(Regime::P4)), history_at(&stripped, t, &cfg(Regime::Full)));
        }
    }
}
