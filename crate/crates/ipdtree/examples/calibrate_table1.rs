//! Provenance for the `table1` scenario's baseline-score scale constants.
//!
//! The target marginals give per-trial medians (8, 13, 14, 5) with IQRs
//! (5,12), (10,17), (9,16), (4,8). A normal matching an IQR has
//! sd = IQR / 1.349, i.e. (5.19, 5.19, 5.19, 2.97) — but the generated score
//! is clamped to [0, 24] and rounded, which biases medians near the
//! instrument floor upward and inflates the clamp rate. This search scans
//! scale candidates per trial and reports, over 200 seeds each:
//!   * the fraction of seeds whose realized median lands within +-1.5 of the
//!     target (the calibration window the test suite enforces), and
//!   * the fraction of latent draws hitting the clamp.
//! The committed constants (4.25, 5.19, 4.60, 2.66) were picked from this
//! output as the largest scales keeping every trial's window rate >= 0.95
//! and the pooled clamp rate under 5%.
//!
//! Run with: `cargo run --release -p ipdtree --example calibrate_table1`

use ipdtree::synthgen::{generate, scenario};

const TARGETS: [f64; 4] = [8.0, 13.0, 14.0, 5.0];

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn main() {
    let base = scenario("table1").expect("library scenario");

    println!("per-trial scale search (200 seeds each, window = target +- 1.5)");
    for trial in 0..4 {
        println!("trial {} (target median {}):", trial + 1, TARGETS[trial]);
        for scale in [
            2.0, 2.33, 2.66, 3.0, 3.5, 4.0, 4.25, 4.6, 5.19, 5.5, 6.0,
        ] {
            let mut s = base.clone();
            s.baseline_dist[trial].1 = scale;
            let mut window_hits = 0usize;
            let mut clamped = 0usize;
            let mut draws = 0usize;
            for seed in 1..=200u64 {
                let (ds, truth) = generate(&s.clone().with_seed(seed)).expect("generate");
                let values: Vec<f64> = (0..ds.n_rows())
                    .filter(|&r| ds.trial_code[r] as usize == trial)
                    .map(|r| match &ds.splitter("rmdq0").unwrap().column {
                        ipdtree::dataset::SplitterColumn::Numeric(v) => v[r],
                        _ => unreachable!(),
                    })
                    .collect();
                if (median(values) - TARGETS[trial]).abs() <= 1.5 {
                    window_hits += 1;
                }
                clamped += truth.clamped_baseline_draws;
                draws += truth.n_rows;
            }
            println!(
                "  sd {scale:>5.2}: median-window rate {:.3}, pooled clamp rate {:.4}",
                window_hits as f64 / 200.0,
                clamped as f64 / draws as f64,
            );
        }
    }

    println!("\ncommitted constants across 200 seeds:");
    let mut all_hits = 0usize;
    let mut clamped = 0usize;
    let mut draws = 0usize;
    let mut follow_up = vec![Vec::new(); 4];
    for seed in 1..=200u64 {
        let (ds, truth) = generate(&base.clone().with_seed(seed)).expect("generate");
        let ok = (0..4).all(|trial| {
            let values: Vec<f64> = (0..ds.n_rows())
                .filter(|&r| ds.trial_code[r] as usize == trial)
                .map(|r| match &ds.splitter("rmdq0").unwrap().column {
                    ipdtree::dataset::SplitterColumn::Numeric(v) => v[r],
                    _ => unreachable!(),
                })
                .collect();
            (median(values) - TARGETS[trial]).abs() <= 1.5
        });
        if ok {
            all_hits += 1;
        }
        clamped += truth.clamped_baseline_draws;
        draws += truth.n_rows;
        for trial in 0..4 {
            let y: Vec<f64> = (0..ds.n_rows())
                .filter(|&r| ds.trial_code[r] as usize == trial)
                .map(|r| ds.outcome[r])
                .collect();
            follow_up[trial].push(median(y));
        }
    }
    println!(
        "  all four medians in window: {}/200; pooled clamp rate {:.4}",
        all_hits,
        clamped as f64 / draws as f64
    );
    let fu: Vec<f64> = follow_up.into_iter().map(median).collect();
    println!(
        "  outcome medians per trial (targets 4, 1, 5, 2): \
         {:.2}, {:.2}, {:.2}, {:.2}",
        fu[0], fu[1], fu[2], fu[3]
    );
}
