//! Regenerates the frozen constants of the correlated scenario.
//!
//! 1. Latent copula correlation: grid search for a realized correlation of
//!    0.80 between consecutive unit-hazard gap times.
//! 2. Episode-rate multiplier: unweighted complete-case bias of the second
//!    coefficient for a few values of `κ` (target band −0.055 to −0.03).
//! 3. Large-sample coefficient targets with and without censoring.
//!
//! Run with `cargo run --release --example calibrate_correlated`.

use pairgee::exec::Execution;
use pairgee::seed;
use pairgee::simulate::correlated::{CorrelatedScenario, SECONDARY_KAPPA};
use pairgee::simulate::{run_replicates, Method, PiecewiseHazard, SimConfig};

fn gap_correlation(r: f64, pairs: usize) -> f64 {
    let sc = CorrelatedScenario { latent_correlation: r, ..Default::default() };
    let h = PiecewiseHazard::constant(1.0);
    let mut rng = seed::rng(42);
    let (mut a, mut b) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
    for _ in 0..pairs {
        let (ev, _) = sc.draw_stream(&h, 0.0, 30.0, &mut rng);
        a.push(ev[0]);
        b.push(ev[1] - ev[0]);
    }
    let n = pairs as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn main() {
    println!("latent r -> realized gap correlation");
    for r in [0.80, 0.81, 0.82, 0.826, 0.83, 0.84] {
        println!("  {r:.3}  {:.4}", gap_correlation(r, 200_000));
    }

    println!("kappa -> bias/coverage/mean se (20 replicates, n = 750)");
    for kappa in [3.0, 3.5, SECONDARY_KAPPA, 4.5, 5.0] {
        let sc = CorrelatedScenario { secondary_kappa: kappa, ..Default::default() };
        let cfg = SimConfig::new(750, 20, 7, vec![Method::Unweighted, Method::Oracle]);
        let run = run_replicates(&sc, &cfg).expect("simulation");
        let line: Vec<String> = run
            .metrics
            .rows
            .iter()
            .map(|r| format!("{}:{:+.4}/{:.2}/{:.4}", r.method, r.bias, r.coverage, r.mean_se))
            .collect();
        println!("  {kappa:.2}  {}", line.join(" "));
    }

    let sc = CorrelatedScenario::default();
    for censored in [true, false] {
        let mc = sc.monte_carlo_truth(1_000_000, 20_240_601, censored, Execution::default());
        let means: Vec<String> = mc.iter().map(|m| format!("{:.4}", m.mean)).collect();
        let ses: Vec<String> = mc.iter().map(|m| format!("{:.5}", m.se)).collect();
        println!("truth censored={censored}: [{}]  se [{}]", means.join(", "), ses.join(", "));
    }
}
