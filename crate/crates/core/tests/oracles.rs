use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ppmvt::models::reconstruct;
use ppmvt::pipeline::{analyze, compare_methods, AnalysisOptions};
use ppmvt::sampler::{digitize, Sampler};
use ppmvt::selection::{
    default_plan, derive_plan, deviation_analysis, optimize_thresholds, DeviationBins, GridCell,
};
use ppmvt::spectrum::{gaussian_fit, histogram};
use ppmvt::synth::{generate, Component, GeneratorSpec};
use ppmvt::waveform::{integrate, load_bundle, save_bundle, synth_biexp, PulseParams};
use ppmvt::{Calibration, MethodConfig, ModelKind, ModelSpec, ThresholdSet, Waveform};

fn normal_draws(n: usize, mu: f64, sd: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(mu, sd).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

fn small_population(count: usize, seed: u64) -> Vec<Waveform> {
    let spec = GeneratorSpec {
        count,
        seed,
        ..GeneratorSpec::default()
    };
    generate(&spec).unwrap().pulses
}

#[test]
fn histogram_matches_naive_binning() {
    let values = normal_draws(100_000, 600.0, 300.0, 3);
    let spec = histogram(&values, 0.0, 1200.0, 200).unwrap();
    let mut naive = vec![0u64; 200];
    let (mut under, mut over) = (0u64, 0u64);
    for &v in &values {
        if v < 0.0 {
            under += 1;
        } else if v >= 1200.0 {
            over += 1;
        } else {
            naive[((v / 6.0).floor() as usize).min(199)] += 1;
        }
    }
    assert_eq!(spec.counts, naive);
    assert_eq!((spec.underflow, spec.overflow), (under, over));
}

#[test]
fn gaussian_fit_agrees_with_sample_moments() {
    let values = normal_draws(50_000, 520.0, 20.0, 5);
    let fit = gaussian_fit(
        &histogram(&values, 0.0, 1200.0, 600).unwrap(),
        (440.0, 600.0),
    )
    .unwrap();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((fit.mu - mean).abs() < 0.5, "{} vs {mean}", fit.mu);
    assert!((fit.sigma - sd).abs() < 0.5, "{} vs {sd}", fit.sigma);
}

#[test]
fn biexp_candidate_tracks_biexp_pulses() {
    let pulses: Vec<Waveform> = (0..200)
        .map(|i| {
            let p = PulseParams {
                amplitude_scale: 80.0 + 2.0 * i as f64,
                onset: 20.0 + 0.5 * (i % 10) as f64,
                tau_rise: 5.0,
                tau_decay: 40.0,
                noise_sigma: 0.0,
                seed: i,
            };
            synth_biexp(&p, 0.5, 900).unwrap().with_id(i)
        })
        .collect();
    let th = ThresholdSet::four_level_default();
    let cand = [ModelSpec::new(ModelKind::BiExp, true)];
    let table = deviation_analysis(
        &pulses,
        &th,
        &cand,
        &DeviationBins::default(),
        &Sampler::default(),
    )
    .unwrap();
    for bin in 0..table.n_bins() {
        if let Some(m) = table.cells[bin][0].mean_abs {
            assert!(m < 1.0, "bin {bin}: {m}%");
        }
    }
}

#[test]
fn single_pulse_deviation_is_exact() {
    let p = PulseParams {
        amplitude_scale: 200.0,
        onset: 30.0,
        tau_rise: 4.0,
        tau_decay: 35.0,
        noise_sigma: 0.0,
        seed: 0,
    };
    let w = synth_biexp(&p, 0.5, 900).unwrap();
    let th = ThresholdSet::four_level_default();
    let spec = ModelSpec::new(ModelKind::LineExp, true);
    let table = deviation_analysis(
        std::slice::from_ref(&w),
        &th,
        &[spec],
        &DeviationBins::Edges(vec![40.0, 1000.0]),
        &Sampler::default(),
    )
    .unwrap();
    let d = digitize(&w, &th, true).unwrap();
    let e = reconstruct(&d, spec).unwrap().energy;
    let r = integrate(&w);
    let want = (e - r) / r * 100.0;
    let cell = table.cells[0][0];
    assert_eq!(cell.n, 1);
    assert!((cell.mean_signed.unwrap() - want).abs() < 1e-12);
    assert!((cell.mean_abs.unwrap() - want.abs()).abs() < 1e-12);
}

#[test]
fn derived_plan_switches_between_shapes() {
    // bi-exponential below 100 mV, line-exponential above
    let spec = GeneratorSpec {
        count: 600,
        seed: 4,
        tau_rise_jitter: 0.0,
        tau_decay_jitter: 0.0,
        onset_jitter: 0.0,
        noise_sigma: 0.0,
        continuum_lo_kev: 130.0,
        photopeak_fraction: 0.3,
        line_exp_above_mv: Some(100.0),
        ..GeneratorSpec::default()
    };
    let pop = generate(&spec).unwrap();
    let cands = [
        ModelSpec::new(ModelKind::BiExp, false),
        ModelSpec::new(ModelKind::LineExp, false),
    ];
    let bins: Vec<f64> = (0..=8).map(|i| 50.0 + 20.0 * i as f64).collect();
    let table = deviation_analysis(
        &pop.pulses,
        &ThresholdSet::four_level_default(),
        &cands,
        &DeviationBins::Edges(bins),
        &Sampler::default(),
    )
    .unwrap();
    let plan = derive_plan(&table).unwrap();
    assert_eq!(plan.select(70.0).unwrap(), cands[0]);
    assert_eq!(plan.select(150.0).unwrap(), cands[1]);
    assert_eq!(plan.select(5000.0).unwrap(), cands[1]);
}

#[test]
fn threshold_grid_cells_match_direct_analysis() {
    let pulses = small_population(1500, 8);
    let template = MethodConfig::ppmvt("pp", ThresholdSet::four_level_default(), default_plan());
    let cal = Calibration::uncorrected();
    let opts = AnalysisOptions::default();
    let v2 = [8.0, 12.0, 20.0];
    let v3 = [20.0, 26.0];
    let grid = optimize_thresholds(&pulses, 2.0, 40.0, &v2, &v3, &template, &cal, &opts).unwrap();
    assert_eq!(grid.cells[2][0], GridCell::Skipped);

    let mut best: Option<((usize, usize), f64)> = None;
    for (i, &a) in v2.iter().enumerate() {
        for (j, &b) in v3.iter().enumerate() {
            if a >= b {
                continue;
            }
            let th = ThresholdSet::new(vec![2.0, a, b, 40.0]).unwrap();
            let direct = analyze(&pulses, &template.with_thresholds(th), &cal, &opts).unwrap();
            let res = direct.report.unwrap().resolution_pct;
            assert_eq!(grid.cells[i][j].resolution(), Some(res));
            if best.is_none_or(|(_, r)| res < r) {
                best = Some(((i, j), res));
            }
        }
    }
    assert_eq!(grid.best, best.map(|b| b.0));
}

#[test]
fn single_cell_grid_and_duplicate_candidates() {
    let pulses = small_population(800, 12);
    let template = MethodConfig::mvt("mvt", ThresholdSet::four_level_default());
    let cal = Calibration::uncorrected();
    let opts = AnalysisOptions::default();
    let one =
        optimize_thresholds(&pulses, 2.0, 40.0, &[12.0], &[26.0], &template, &cal, &opts).unwrap();
    assert_eq!(one.best, Some((0, 0)));
    assert_eq!(one.best_thresholds(), Some([2.0, 12.0, 26.0, 40.0]));

    let dup = optimize_thresholds(
        &pulses,
        2.0,
        40.0,
        &[12.0, 12.0],
        &[26.0, 26.0],
        &template,
        &cal,
        &opts,
    )
    .unwrap();
    let r = one.cells[0][0].resolution().unwrap();
    for row in &dup.cells {
        for c in row {
            assert_eq!(c.resolution(), Some(r));
        }
    }
    assert_eq!(dup.best, Some((0, 0)));
}

#[test]
fn relabelling_does_not_change_results() {
    let pulses = small_population(1000, 21);
    let th = ThresholdSet::four_level_default();
    let a = MethodConfig::ppmvt("first", th.clone(), default_plan());
    let b = a.with_label("second");
    let cmp = compare_methods(
        &pulses,
        &[a, b],
        &Calibration::uncorrected(),
        &AnalysisOptions::default(),
        Some("first"),
    )
    .unwrap();
    let (x, y) = (&cmp.rows[0], &cmp.rows[1]);
    assert_eq!(
        x.report.as_ref().map(|r| r.resolution_pct),
        y.report.as_ref().map(|r| r.resolution_pct)
    );
    assert_eq!(
        (x.accepted, x.count_in_window),
        (y.accepted, y.count_in_window)
    );
    assert_eq!(y.count_change_pct, Some(0.0));
}

#[test]
fn spectrum_holds_every_accepted_pulse() {
    let pulses = small_population(1000, 31);
    let cfg = MethodConfig::mvt("mvt", ThresholdSet::four_level_default());
    let a = analyze(
        &pulses,
        &cfg,
        &Calibration::uncorrected(),
        &AnalysisOptions::default(),
    )
    .unwrap();
    let s = &a.spectrum;
    assert_eq!(s.entries() + s.underflow + s.overflow, a.accepted() as u64);
    assert_eq!(a.accepted() + a.rejections.len(), pulses.len());
}

#[test]
fn photopeak_share_is_binomial() {
    let spec = GeneratorSpec {
        count: 30_000,
        seed: 17,
        n_samples: 16,
        ..GeneratorSpec::default()
    };
    let pop = generate(&spec).unwrap();
    let n = pop
        .truth
        .iter()
        .filter(|t| t.component == Component::Photopeak)
        .count() as f64;
    let (mean, sd) = (15_000.0, (30_000.0f64 * 0.25).sqrt());
    assert!((n - mean).abs() < 3.0 * sd, "{n}");
}

#[test]
fn bundle_round_trip_keeps_pulses() {
    let pulses = small_population(20, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pulses.csv");
    save_bundle(&path, &pulses).unwrap();
    let back = load_bundle(&path).unwrap();
    assert_eq!(back.len(), pulses.len());
    for (a, b) in pulses.iter().zip(&back) {
        assert_eq!(a.id(), b.id());
        assert_eq!(a.dt(), b.dt());
        assert_eq!(a.samples(), b.samples());
    }
}
