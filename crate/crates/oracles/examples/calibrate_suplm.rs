//! Regenerates the gamma tail-approximation table for the ordered-score
//! supremum statistic's large-sample null distribution.
//!
//! For each (dimension p, trim) pair the null distribution is sampled by
//! Monte-Carlo simulation of the trimmed Brownian-bridge supremum, then a
//! gamma (shape, rate) pair is fit to the sample's upper tail. The printed
//! constant block is pasted into the main library.
//!
//! Usage: cargo run --release -p oracles --example calibrate_suplm
//!        [replicates] [grid] [seed]

use oracles::{bridge_suplm_samples, empirical_upper_quantile, fit_gamma_tail};
use rayon::prelude::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let replicates: usize = args.get(1).map_or(100_000, |s| s.parse().unwrap());
    let n_grid: usize = args.get(2).map_or(1000, |s| s.parse().unwrap());
    let seed: u64 = args.get(3).map_or(20_250_819, |s| s.parse().unwrap());

    let trims = [0.05, 0.10, 0.15, 0.20, 0.25];
    let p_max = 12;
    let chunks = 20;
    let per_chunk = replicates / chunks;

    // Deterministic parallel sampling: each chunk owns a fixed derived seed,
    // results are concatenated in chunk order.
    let chunk_samples: Vec<_> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            bridge_suplm_samples(p_max, &trims, n_grid, per_chunk, seed.wrapping_add(c as u64))
        })
        .collect();

    let mut merged = vec![vec![Vec::with_capacity(replicates); p_max]; trims.len()];
    for chunk in chunk_samples {
        for (t, by_p) in chunk.into_iter().enumerate() {
            for (d, sample) in by_p.into_iter().enumerate() {
                merged[t][d].extend(sample);
            }
        }
    }

    println!(
        "// Gamma tail approximations to the null distribution of the trimmed"
    );
    println!(
        "// ordered-score supremum statistic, fitted to {replicates} Monte-Carlo"
    );
    println!(
        "// samples of the p-dimensional Brownian-bridge supremum on a {n_grid}-point"
    );
    println!("// grid (seed {seed}). Regenerate with:");
    println!("//   cargo run --release -p oracles --example calibrate_suplm");
    println!("// Entries: (dimension p, trim, gamma shape, gamma rate).");
    println!("pub(crate) const SUPLM_GAMMA_TAIL: &[(usize, f64, f64, f64)] = &[");
    for (t, &trim) in trims.iter().enumerate() {
        for d in 0..p_max {
            let sample = &mut merged[t][d];
            let (shape, rate) = fit_gamma_tail(sample);
            let q95 = empirical_upper_quantile(sample, 0.05);
            println!(
                "    ({}, {:.2}, {:.6}, {:.6}), // mc 95% quantile {:.3}",
                d + 1,
                trim,
                shape,
                rate,
                q95
            );
        }
    }
    println!("];");
}
