//! Runs the six-row comparison on the synthetic benchmark population.
//!
//! `cargo run --release -p ppmvt-core --example benchmark [--uncorrected] [seed ...]`

use std::time::Instant;

use ppmvt::pipeline::{compare_methods, standard_configs, AnalysisOptions, BASELINE_LABEL};
use ppmvt::synth::{benchmark_spec, generate, BENCHMARK_SEEDS};
use ppmvt::Calibration;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let uncorrected = std::env::args().any(|a| a == "--uncorrected");
    let seeds: Vec<u64> = match std::env::args()
        .skip(1)
        .filter(|a| a != "--uncorrected")
        .map(|a| a.parse())
        .collect::<Result<Vec<_>, _>>()?
    {
        s if s.is_empty() => BENCHMARK_SEEDS.to_vec(),
        s => s,
    };
    for seed in seeds {
        let t0 = Instant::now();
        let pop = generate(&benchmark_spec(seed))?;
        let options = AnalysisOptions::default();
        let configs = standard_configs(&pop.pulses, &options.sampler)?;
        let spec = benchmark_spec(seed);
        let calibration = match spec.sipm_curve() {
            Some(c) if !uncorrected => Calibration::with_curve(c),
            _ => Calibration::uncorrected(),
        };
        let cmp = compare_methods(
            &pop.pulses,
            &configs,
            &calibration,
            &options,
            Some(BASELINE_LABEL),
        )?;
        println!("seed {seed} ({:.1} s)", t0.elapsed().as_secs_f64());
        for r in &cmp.rows {
            match &r.report {
                Some(rep) => println!(
                    "  {:8} res {:6.2}%  mu {:7.2}  window {:6}  change {:+6.2}%  accepted {:6}  {:?}",
                    r.label,
                    rep.resolution_pct,
                    rep.mu,
                    r.count_in_window,
                    r.count_change_pct.unwrap_or(f64::NAN),
                    r.accepted,
                    r.rejections
                ),
                None => println!("  {:8} error {:?}", r.label, r.error),
            }
        }
    }
    Ok(())
}
