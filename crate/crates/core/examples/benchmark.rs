//! Runs the ablation ladder on the synthetic benchmark and prints each
//! seed's per-epoch target accuracy.
//!
//! `cargo run --release -p pcs-core --example benchmark -- [seeds]`

use pcs_core::{ablation_run, generate_synthetic_fuda, Components, SynthConfig, TrainConfig};

fn main() -> pcs_core::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let variants = [
        ("SO", Components::NONE),
        ("+in", Components { in_self: true, ..Components::NONE }),
        ("+cross", Components { in_self: true, cross_self: true, ..Components::NONE }),
        ("+mim", Components { apcu: false, ..Components::ALL }),
        ("PCS", Components::ALL),
    ];
    for (name, enabled) in variants {
        let start = std::time::Instant::now();
        let mut total = 0.0;
        for seed in 0..seeds {
            let data = generate_synthetic_fuda(&SynthConfig { seed, ..SynthConfig::default() })?;
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let (_, metrics) = ablation_run(&data, &cfg, enabled)?;
            let curve: Vec<String> = metrics
                .iter()
                .map(|m| format!("{:.0}", 100.0 * m.target_acc.unwrap_or(0.0)))
                .collect();
            println!("{name:>7} seed {seed}: {}", curve.join(" "));
            total += metrics.last().and_then(|m| m.target_acc).unwrap_or(0.0);
        }
        println!("{name:>7} mean {:.2}%  ({:.1}s)", 100.0 * total / seeds as f64, start.elapsed().as_secs_f64());
    }
    Ok(())
}
