//! Kaplan–Meier curves, restricted means and jackknife pseudo-observations.

use crate::error::{Error, Result};
use crate::event_data::LongitudinalDataset;
use crate::exec::Execution;

#[derive(Clone, Debug, PartialEq)]
pub struct KmCurve {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Survival just after each event time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    pub fn survival_at(&self, u: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= u);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

fn check_input(times: &[f64], deltas: &[bool]) -> Result<()> {
    if times.len() != deltas.len() {
        return Err(Error::InvalidInput(format!(
            "{} times but {} event indicators",
            times.len(),
            deltas.len()
        )));
    }
    if times.is_empty() {
        return Err(Error::InvalidInput("Kaplan–Meier fit needs at least one observation".into()));
    }
    if let Some(x) = times.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidInput(format!("observation time {x} is not a finite non-negative number")));
    }
    Ok(())
}

fn sorted_order(times: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    order
}

/// Product-limit estimator. Observations censored at an event time stay in
/// that time's risk set.
pub fn km_fit(times: &[f64], deltas: &[bool]) -> Result<KmCurve> {
    check_input(times, deltas)?;
    let order = sorted_order(times);
    let n = times.len();
    let mut curve = KmCurve { times: vec![], survival: vec![], at_risk: vec![], events: vec![] };
    let mut s = 1.0;
    let mut k = 0;
    while k < n {
        let u = times[order[k]];
        let mut end = k;
        let mut d = 0;
        while end < n && times[order[end]] == u {
            d += usize::from(deltas[order[end]]);
            end += 1;
        }
        if d > 0 {
            let at_risk = n - k;
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(u);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
        }
        k = end;
    }
    Ok(curve)
}

/// Area under the curve on `[0, tau]`. The curve stays flat after its last
/// jump.
pub fn rmst(curve: &KmCurve, tau: f64) -> f64 {
    let mut area = 0.0;
    let mut prev = 0.0;
    let mut s = 1.0;
    for (&u, &next) in curve.times.iter().zip(&curve.survival) {
        if u >= tau {
            break;
        }
        area += s * (u - prev);
        prev = u;
        s = next;
    }
    area + s * (tau - prev)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoMethod {
    /// Refit the curve once per left-out observation.
    Naive,
    /// Closed-form leave-one-out update over a single sorted pass.
    #[default]
    Fast,
}

/// Jackknife pseudo-observations of the `tau`-restricted mean,
/// `n·θ̂ − (n−1)·θ̂⁻ⁱ`, in input order.
pub fn pseudo_observations(times: &[f64], deltas: &[bool], tau: f64, method: PoMethod) -> Result<Vec<f64>> {
    check_input(times, deltas)?;
    if times.len() < 2 {
        return Err(Error::TooFewSubjects { needed: 2, have: times.len() });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    match method {
        PoMethod::Naive => Ok(naive(times, deltas, tau)),
        PoMethod::Fast => Ok(fast(times, deltas, tau)),
    }
}

fn naive(times: &[f64], deltas: &[bool], tau: f64) -> Vec<f64> {
    let n = times.len() as f64;
    let full = rmst(&km_fit(times, deltas).expect("checked"), tau);
    let mut t = Vec::with_capacity(times.len() - 1);
    let mut d = Vec::with_capacity(times.len() - 1);
    (0..times.len())
        .map(|i| {
            t.clear();
            d.clear();
            for j in (0..times.len()).filter(|&j| j != i) {
                t.push(times[j]);
                d.push(deltas[j]);
            }
            let loo = rmst(&km_fit(&t, &d).expect("checked"), tau);
            n * full - (n - 1.0) * loo
        })
        .collect()
}

fn fast(times: &[f64], deltas: &[bool], tau: f64) -> Vec<f64> {
    let curve = km_fit(times, deltas).expect("checked");
    let n = times.len();
    // event times inside [0, tau) are the only ones that matter
    let k_max = curve.times.partition_point(|&u| u < tau);
    let u = &curve.times[..k_max];
    let g: Vec<f64> = (0..k_max)
        .map(|k| 1.0 - curve.events[k] as f64 / curve.at_risk[k] as f64)
        .collect();

    // a[k]: product over the first k jumps with one fewer at risk;
    // area[k]: integral of that step function from 0 to u[k].
    let mut a = vec![1.0; k_max + 1];
    let mut area = vec![0.0; k_max + 1];
    for k in 0..k_max {
        let prev_u = if k == 0 { 0.0 } else { u[k - 1] };
        area[k + 1] = area[k] + a[k] * (u[k] - prev_u);
        let r = curve.at_risk[k];
        a[k + 1] = if r > 1 {
            a[k] * (1.0 - curve.events[k] as f64 / (r - 1) as f64)
        } else {
            0.0
        };
    }
    // q[k]: integral from u[k] to tau of the full-sample factors after jump k.
    let mut q = vec![0.0; k_max + 1];
    for k in (0..k_max).rev() {
        let next = if k + 1 < k_max { u[k + 1] } else { tau };
        q[k] = (next - u[k]) + if k + 1 < k_max { g[k + 1] * q[k + 1] } else { 0.0 };
    }

    let full = rmst(&curve, tau);
    let nf = n as f64;
    times
        .iter()
        .zip(deltas)
        .map(|(&x, &delta)| {
            // jumps strictly before x
            let m = u.partition_point(|&v| v < x);
            let prev_u = if m == 0 { 0.0 } else { u[m - 1] };
            let loo = if x >= tau {
                area[m] + a[m] * (tau - prev_u)
            } else {
                let head = area[m] + a[m] * (x - prev_u);
                let tail = if m < k_max && u[m] == x {
                    let r = curve.at_risk[m];
                    let factor = if r > 1 {
                        1.0 - (curve.events[m] - usize::from(delta)) as f64 / (r - 1) as f64
                    } else {
                        1.0
                    };
                    factor * q[m]
                } else if m < k_max {
                    (u[m] - x) + g[m] * q[m]
                } else {
                    tau - x
                };
                head + a[m] * tail
            };
            nf * full - (nf - 1.0) * loo
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoValue {
    /// Index into the dataset rows.
    pub row: usize,
    pub subject_id: String,
    pub window: usize,
    pub t: f64,
    pub po: f64,
    pub n_r: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PseudoPanel {
    pub values: Vec<PseudoValue>,
    /// Window starts skipped because fewer than two subjects were at risk.
    pub excluded_windows: Vec<f64>,
}

/// Pseudo-observations for every at-risk row, computed separately within
/// each window start.
pub fn pseudo_panel(ds: &LongitudinalDataset, method: PoMethod, exec: Execution) -> PseudoPanel {
    let tau = ds.grid.tau();
    let mut by_window: Vec<Vec<usize>> = vec![Vec::new(); ds.grid.len()];
    for (i, r) in ds.rows.iter().enumerate().filter(|(_, r)| r.at_risk) {
        by_window[r.window].push(i);
    }
    let per_window = exec.map(&by_window, |rows| {
        let x: Vec<f64> = rows.iter().map(|&i| ds.rows[i].x).collect();
        let d: Vec<bool> = rows.iter().map(|&i| ds.rows[i].delta).collect();
        pseudo_observations(&x, &d, tau, method).ok()
    });
    let mut panel = PseudoPanel::default();
    for (w, (rows, po)) in by_window.iter().zip(per_window).enumerate() {
        let Some(po) = po else {
            log::warn!(
                "window t={} has {} at-risk subjects; excluded from the fit",
                ds.grid.starts()[w],
                rows.len()
            );
            panel.excluded_windows.push(ds.grid.starts()[w]);
            continue;
        };
        for (&row, po) in rows.iter().zip(po) {
            let r = &ds.rows[row];
            panel.values.push(PseudoValue {
                row,
                subject_id: r.subject_id.clone(),
                window: w,
                t: r.t,
                po,
                n_r: rows.len(),
            });
        }
    }
    panel.values.sort_by_key(|v| v.row);
    panel
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Exp};

    const TOL: f64 = 1e-12;

    #[test]
    fn km_examples() {
        let c = km_fit(&[2.0, 4.0, 6.0], &[true; 3]).unwrap();
        assert_eq!(c.times, vec![2.0, 4.0, 6.0]);
        assert!((c.survival_at(3.0) - 2.0 / 3.0).abs() < TOL);
        assert!((c.survival_at(4.0) - 1.0 / 3.0).abs() < TOL);
        assert_eq!(c.survival_at(6.0), 0.0);
        assert_eq!(c.survival_at(1.9), 1.0);

        let c = km_fit(&[0.5], &[true]).unwrap();
        assert_eq!(c.survival_at(0.5), 0.0);

        let c = km_fit(&[2.0, 4.0, 6.0], &[true, false, true]).unwrap();
        assert!((c.survival_at(5.0) - 2.0 / 3.0).abs() < TOL);
        assert_eq!(c.survival_at(6.0), 0.0);
        assert!(km_fit(&[], &[]).is_err());
    }

    #[test]
    fn events_come_before_censorings_at_ties() {
        let c = km_fit(&[1.0, 1.0, 2.0], &[true, false, true]).unwrap();
        assert_eq!(c.at_risk, vec![3, 1]);
        assert!((c.survival[0] - 2.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn rmst_examples() {
        let c = km_fit(&[2.0, 4.0, 6.0], &[true; 3]).unwrap();
        assert!((rmst(&c, 5.0) - 11.0 / 3.0).abs() < TOL);
        assert_eq!(rmst(&c, 1.5), 1.5);
        // largest observation censored: flat tail
        let c = km_fit(&[1.0, 3.0], &[true, false]).unwrap();
        assert!((rmst(&c, 5.0) - (1.0 + 0.5 * 4.0)).abs() < TOL);
    }

    #[test]
    fn rmst_matches_exponential_closed_form() {
        let mut rng = crate::seed::rng(11);
        let exp = Exp::new(0.5).unwrap();
        let x: Vec<f64> = (0..200_000).map(|_| exp.sample(&mut rng)).collect();
        let c = km_fit(&x, &vec![true; x.len()]).unwrap();
        let truth = (1.0 - (-0.5f64).exp()) / 0.5;
        assert!((rmst(&c, 1.0) - truth).abs() < 0.004);
    }

    #[test]
    fn pseudo_examples() {
        for m in [PoMethod::Naive, PoMethod::Fast] {
            let po = pseudo_observations(&[2.0, 4.0, 6.0], &[true; 3], 5.0, m).unwrap();
            for (a, b) in po.iter().zip([2.0, 4.0, 5.0]) {
                assert!((a - b).abs() < 1e-12, "{m:?}: {po:?}");
            }
            // theta = 1 + 0.5 = 1.5; leave out the event: 2; leave out the
            // censored one: 1. PO = 2*1.5 - 2 = 1 and 2*1.5 - 1 = 2.
            let po = pseudo_observations(&[1.0, 3.0], &[true, false], 2.0, m).unwrap();
            assert!((po[0] - 1.0).abs() < TOL && (po[1] - 2.0).abs() < TOL, "{po:?}");
            let po = pseudo_observations(&[0.7; 5], &[true; 5], 1.0, m).unwrap();
            assert!(po.iter().all(|p| (p - 0.7).abs() < 1e-12));
        }
        assert!(matches!(
            pseudo_observations(&[1.0], &[true], 1.0, PoMethod::Fast),
            Err(Error::TooFewSubjects { .. })
        ));
    }

    #[test]
    fn mean_pseudo_value_is_unbiased_for_exponential_rmst() {
        let truth = (1.0 - (-0.5f64).exp()) / 0.5;
        let exp = Exp::new(0.5).unwrap();
        let cens = Exp::new(0.3).unwrap();
        for (n, reps, tol) in [(100, 400, 0.012), (1000, 100, 0.006)] {
            let mut rng = crate::seed::rng(n as u64);
            let mut total = 0.0;
            for _ in 0..reps {
                let mut x = Vec::with_capacity(n);
                let mut d = Vec::with_capacity(n);
                for _ in 0..n {
                    let (t, c): (f64, f64) = (exp.sample(&mut rng), cens.sample(&mut rng));
                    x.push(t.min(c));
                    d.push(t < c);
                }
                let po = pseudo_observations(&x, &d, 1.0, PoMethod::Fast).unwrap();
                total += po.iter().sum::<f64>() / n as f64;
            }
            let bias = total / reps as f64 - truth;
            assert!(bias.abs() < tol, "n={n}: bias {bias}");
        }
    }

    /// The one configuration where the jackknife mean differs from the
    /// estimate: a single largest observation that is an event, censorings at
    /// the next distinct time, and `tau` past the largest observation.
    fn lone_top_event_over_censoring(x: &[f64], d: &[bool], tau: f64) -> bool {
        let top = x.iter().copied().fold(f64::MIN, f64::max);
        let at_top: Vec<usize> = (0..x.len()).filter(|&i| x[i] == top).collect();
        let next = x.iter().copied().filter(|&v| v < top).fold(f64::MIN, f64::max);
        at_top.len() == 1
            && d[at_top[0]]
            && tau > top
            && (0..x.len()).any(|i| x[i] == next && !d[i])
    }

    #[test]
    fn jackknife_mean_differs_only_in_the_tail_case() {
        let x = [1.0, 2.0, 3.0];
        let d = [true, false, true];
        assert!(lone_top_event_over_censoring(&x, &d, 3.5));
        let theta = rmst(&km_fit(&x, &d).unwrap(), 3.5);
        let po = pseudo_observations(&x, &d, 3.5, PoMethod::Fast).unwrap();
        let mean = po.iter().sum::<f64>() / 3.0;
        assert!((mean - theta).abs() > 0.1);
        let po = pseudo_observations(&x, &d, 2.5, PoMethod::Fast).unwrap();
        let theta = rmst(&km_fit(&x, &d).unwrap(), 2.5);
        assert!((po.iter().sum::<f64>() / 3.0 - theta).abs() < 1e-12);
    }

    fn sample(rng: &mut impl Rng, n: usize, grid: bool) -> (Vec<f64>, Vec<bool>) {
        let x = (0..n)
            .map(|_| {
                let v: f64 = rng.random::<f64>() * 3.0;
                if grid {
                    (v * 4.0).floor() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let d = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
        (x, d)
    }

    proptest! {
        #[test]
        fn fast_path_matches_naive(seed in any::<u64>(), n in 2usize..40, grid in any::<bool>(), tau in 0.1f64..4.0) {
            let mut rng = crate::seed::rng(seed);
            let (x, d) = sample(&mut rng, n, grid);
            let a = pseudo_observations(&x, &d, tau, PoMethod::Naive).unwrap();
            let b = pseudo_observations(&x, &d, tau, PoMethod::Fast).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-10, "{:?} vs {:?}", a, b);
            }
        }

        #[test]
        fn jackknife_identity_holds(seed in any::<u64>(), n in 2usize..60, grid in any::<bool>(), tau in 0.1f64..4.0) {
            let mut rng = crate::seed::rng(seed);
            let (x, d) = sample(&mut rng, n, grid);
            prop_assume!(!lone_top_event_over_censoring(&x, &d, tau));
            let theta = rmst(&km_fit(&x, &d).unwrap(), tau);
            let po = pseudo_observations(&x, &d, tau, PoMethod::Fast).unwrap();
            let mean = po.iter().sum::<f64>() / n as f64;
            prop_assert!((mean - theta).abs() <= 1e-12 * theta.abs().max(1.0) * n as f64);
        }

        #[test]
        fn uncensored_pseudo_values_are_truncated_times(seed in any::<u64>(), n in 2usize..40, tau in 0.1f64..4.0) {
            let mut rng = crate::seed::rng(seed);
            let (x, _) = sample(&mut rng, n, false);
            let po = pseudo_observations(&x, &vec![true; n], tau, PoMethod::Fast).unwrap();
            for (p, x) in po.iter().zip(&x) {
                prop_assert!((p - x.min(tau)).abs() < 1e-10);
            }
        }

        #[test]
        fn rmst_is_monotone_and_bounded(seed in any::<u64>(), n in 1usize..30, tau in 0.1f64..4.0, dt in 0.0f64..1.0) {
            let mut rng = crate::seed::rng(seed);
            let (x, d) = sample(&mut rng, n, true);
            let c = km_fit(&x, &d).unwrap();
            let a = rmst(&c, tau);
            prop_assert!(a <= tau + 1e-12);
            prop_assert!(rmst(&c, tau + dt) >= a - 1e-12);
            prop_assert!(c.survival.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
