//! `ppmvt`: simulate pulses, analyze them with MVT or PP-MVT, and compare methods.

mod config;
mod output;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use ppmvt::pipeline::{
    analyze, assemble_comparison, standard_configs, Analysis, AnalysisOptions, BASELINE_LABEL,
};
use ppmvt::selection::{
    all_candidates, default_plan, derive_plan, deviation_analysis, optimize_thresholds,
    DeviationBins,
};
use ppmvt::spectrum::render_svg;
use ppmvt::synth::{generate, GeneratorSpec};
use ppmvt::waveform::write_bundle_with_dt;
use ppmvt::{Calibration, MethodConfig, ModelSpec, SelectionPlan, ThresholdSet, Waveform};

use config::{CommonArgs, Extra, Input, Method, PlanSource, RunConfig};
use output::{grid_svg, slug, OutDir};

#[derive(Debug)]
pub enum Failure {
    Io(String),
    Usage(String),
    Fit(String),
    Empty(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Fit(_) => 3,
            Failure::Empty(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Io(_) => "io",
            Failure::Usage(_) => "usage",
            Failure::Fit(_) => "fit_failure",
            Failure::Empty(_) => "empty_result",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Usage(m) | Failure::Fit(m) | Failure::Empty(m) => m,
        }
    }
}

impl From<ppmvt::Error> for Failure {
    fn from(e: ppmvt::Error) -> Self {
        use ppmvt::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidParameter(_) | E::Parse { .. } | E::Json(_) => Failure::Usage(msg),
            E::Io(_) => Failure::Io(msg),
            E::Empty(_) => Failure::Empty(msg),
            _ => Failure::Fit(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ppmvt",
    version,
    about = "Multi-voltage-threshold digitizer simulation and energy analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic pulse bundle with its ground truth.
    Simulate(CommonArgs),
    /// Run one method end to end: energy spectrum, photopeak fit, resolution.
    Analyze(CommonArgs),
    /// Six-row comparison: OSC, MVT4 and PP-MVT with four to one thresholds.
    Compare(CommonArgs),
    /// Per-bin energy deviation of every candidate model, and the plan it implies.
    Deviation {
        #[command(flatten)]
        common: CommonArgs,
        /// Peak-voltage bin width, mV.
        #[arg(long)]
        bin_width: Option<f64>,
        /// Candidate models, e.g. `bi_exp,line_exp+peak`; all eight by default.
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<String>>,
    },
    /// Energy resolution over a V2 x V3 grid with V1 and V4 fixed.
    Optimize {
        #[command(flatten)]
        common: CommonArgs,
        /// V2 candidates, mV.
        #[arg(long, value_delimiter = ',')]
        v2: Option<Vec<f64>>,
        /// V3 candidates, mV.
        #[arg(long, value_delimiter = ',')]
        v3: Option<Vec<f64>>,
    },
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    outputs: Vec<String>,
    #[serde(flatten)]
    details: BTreeMap<&'a str, serde_json::Value>,
}

fn print_summary(command: &str, out: &OutDir, details: BTreeMap<&str, serde_json::Value>) {
    let summary = Summary {
        command,
        outputs: out
            .written()
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        details,
    };
    println!("{}", serde_json::to_string(&summary).unwrap_or_default());
}

fn method_label(method: Method, th: &ThresholdSet) -> String {
    match method {
        Method::Mvt => format!("MVT{}", th.len()),
        Method::Ppmvt => format!("PP-MVT{}", th.len()),
    }
}

fn resolve_plan(
    cfg: &RunConfig,
    pulses: &[Waveform],
    options: &AnalysisOptions,
) -> Result<SelectionPlan, Failure> {
    match &cfg.plan {
        PlanSource::Default => Ok(default_plan()),
        PlanSource::Derived => {
            let table = deviation_analysis(
                pulses,
                &cfg.thresholds,
                &all_candidates(),
                &DeviationBins::default(),
                &options.sampler,
            )?;
            Ok(derive_plan(&table)?)
        }
        PlanSource::File(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            SelectionPlan::from_json(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
        }
    }
}

/// The method to run; the plan is only looked at for ppmvt.
fn method_config(
    cfg: &RunConfig,
    pulses: &[Waveform],
    options: &AnalysisOptions,
) -> Result<MethodConfig, Failure> {
    let label = method_label(cfg.method, &cfg.thresholds);
    Ok(match cfg.method {
        Method::Mvt => MethodConfig::mvt(label, cfg.thresholds.clone()),
        Method::Ppmvt => MethodConfig::ppmvt(
            label,
            cfg.thresholds.clone(),
            resolve_plan(cfg, pulses, options)?,
        ),
    })
}

fn calibration(cfg: &RunConfig, generator: Option<&GeneratorSpec>) -> Result<Calibration, Failure> {
    Ok(match cfg.sipm_curve(generator)? {
        Some(curve) => Calibration::with_curve(curve),
        None => Calibration::uncorrected(),
    })
}

fn simulate(cfg: RunConfig) -> Result<(), Failure> {
    let spec = match cfg.input {
        Some(Input::Synthetic(spec)) => spec,
        None => GeneratorSpec::default(),
        Some(Input::Bundle(_)) => {
            return Err(Failure::Usage(
                "simulate takes --synthetic, not --input".into(),
            ))
        }
    };
    let pop = generate(&spec)?;
    let mut bundle = Vec::new();
    write_bundle_with_dt(&mut bundle, spec.dt, &pop.pulses)?;

    let mut truth = String::from("id,component,shape,energy_kev,peak_mv,area\n");
    for t in &pop.truth {
        let component = serde_json::to_value(t.component).unwrap_or_default();
        let shape = serde_json::to_value(t.shape).unwrap_or_default();
        let _ = writeln!(
            truth,
            "{},{},{},{},{},{}",
            t.id,
            component.as_str().unwrap_or_default(),
            shape.as_str().unwrap_or_default(),
            t.energy_kev,
            t.peak_mv,
            t.area
        );
    }

    let mut out = OutDir::create(&cfg.out_dir)?;
    out.write("pulses.csv", &bundle)?;
    out.write("truth.csv", truth.as_bytes())?;
    out.write_json("generator.json", &spec)?;
    if let Some(curve) = spec.sipm_curve() {
        out.write_json("sipm_curve.json", &curve)?;
    }
    print_summary(
        "simulate",
        &out,
        BTreeMap::from([("pulses", spec.count.into())]),
    );
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    label: &'a str,
    method: &'a str,
    thresholds: &'a [f64],
    plan: Option<&'a SelectionPlan>,
    calibration: &'a Calibration,
    scale: f64,
    window: (f64, f64),
    pulses: usize,
    accepted: usize,
    rejected: usize,
    rejections: BTreeMap<String, usize>,
    count_in_window: u64,
    report: Option<&'a ppmvt::ResolutionReport>,
    error: Option<&'a str>,
}

fn write_spectrum(
    out: &mut OutDir,
    stem: &str,
    a: &Analysis,
    window: (f64, f64),
) -> Result<(), Failure> {
    let fit = a.report.as_ref().map(|r| r.gaussian());
    out.write(
        &format!("{stem}.csv"),
        a.spectrum.to_csv(fit.as_ref()).as_bytes(),
    )?;
    let svg = render_svg(&a.spectrum, fit.as_ref(), window, &a.label);
    out.write(&format!("{stem}.svg"), svg.as_bytes())
}

fn analyze_cmd(cfg: RunConfig) -> Result<(), Failure> {
    let (pulses, generator) = cfg.load_pulses()?;
    let options = cfg.options();
    let method = method_config(&cfg, &pulses, &options)?;
    let cal = calibration(&cfg, generator.as_ref())?;
    let a = analyze(&pulses, &method, &cal, &options)?;

    let plan = match &method.reconstruction {
        ppmvt::Reconstruction::Adaptive { plan } => Some(plan),
        _ => None,
    };
    let report = AnalyzeReport {
        label: &a.label,
        method: match cfg.method {
            Method::Mvt => "mvt",
            Method::Ppmvt => "ppmvt",
        },
        thresholds: a.thresholds.levels(),
        plan,
        calibration: &cal,
        scale: a.scale,
        window: options.window,
        pulses: pulses.len(),
        accepted: a.accepted(),
        rejected: a.rejections.len(),
        rejections: a.rejection_summary(),
        count_in_window: a.count_in_window,
        report: a.report.as_ref(),
        error: a.error.as_deref(),
    };

    let mut out = OutDir::create(&cfg.out_dir)?;
    out.write_json("report.json", &report)?;
    write_spectrum(&mut out, "spectrum", &a, options.window)?;
    out.write_jsonl("energies.jsonl", &a.energies)?;
    out.write_jsonl("rejections.jsonl", &a.rejections)?;
    if let Some(plan) = plan {
        out.write_json("plan.json", plan)?;
    }
    print_summary(
        "analyze",
        &out,
        BTreeMap::from([
            ("accepted", a.accepted().into()),
            ("count_in_window", a.count_in_window.into()),
            (
                "resolution_pct",
                serde_json::json!(a.report.as_ref().map(|r| r.resolution_pct)),
            ),
        ]),
    );

    if a.accepted() == 0 {
        return Err(Failure::Empty(format!(
            "no pulse out of {} was accepted",
            pulses.len()
        )));
    }
    match &a.error {
        Some(e) => Err(Failure::Fit(e.clone())),
        None => Ok(()),
    }
}

fn compare_cmd(cfg: RunConfig) -> Result<(), Failure> {
    let (pulses, generator) = cfg.load_pulses()?;
    if pulses.is_empty() {
        return Err(Failure::Empty("no pulses to compare".into()));
    }
    let options = cfg.options();
    let cal = calibration(&cfg, generator.as_ref())?;
    let configs = standard_configs(&pulses, &options.sampler)?;
    let results: Vec<_> = configs
        .iter()
        .map(|c| analyze(&pulses, c, &cal, &options))
        .collect();
    let cmp = assemble_comparison(&configs, &results, options.window, Some(BASELINE_LABEL));

    let mut out = OutDir::create(&cfg.out_dir)?;
    out.write_json("comparison.json", &cmp)?;
    out.write("comparison.csv", cmp.to_csv().as_bytes())?;
    for (c, res) in configs.iter().zip(&results) {
        if let Ok(a) = res {
            write_spectrum(
                &mut out,
                &format!("spectra/{}", slug(&c.label)),
                a,
                options.window,
            )?;
        }
        if let ppmvt::Reconstruction::Adaptive { plan } = &c.reconstruction {
            out.write_json(&format!("plans/{}.json", slug(&c.label)), plan)?;
        }
    }
    let table: BTreeMap<String, Option<f64>> = cmp
        .rows
        .iter()
        .map(|r| (r.label.clone(), r.resolution_pct()))
        .collect();
    print_summary(
        "compare",
        &out,
        BTreeMap::from([("resolution_pct", serde_json::json!(table))]),
    );

    if cmp.rows.iter().all(|r| r.report.is_none()) {
        if cmp.rows.iter().all(|r| r.accepted == 0) {
            return Err(Failure::Empty("no method accepted any pulse".into()));
        }
        return Err(Failure::Fit("no method produced a photopeak fit".into()));
    }
    Ok(())
}

fn deviation_cmd(cfg: RunConfig) -> Result<(), Failure> {
    let (pulses, _) = cfg.load_pulses()?;
    let options = cfg.options();
    let bins = match cfg.extra.bin_width {
        Some(w) if w > 0.0 && w.is_finite() => DeviationBins::Auto { width: w },
        Some(w) => {
            return Err(Failure::Usage(format!(
                "--bin-width must be positive, got {w}"
            )))
        }
        None => DeviationBins::default(),
    };
    let candidates = match &cfg.extra.candidates {
        Some(names) => names
            .iter()
            .map(|n| n.trim().parse::<ModelSpec>())
            .collect::<Result<Vec<_>, _>>()?,
        None => all_candidates(),
    };
    let table = deviation_analysis(
        &pulses,
        &cfg.thresholds,
        &candidates,
        &bins,
        &options.sampler,
    )?;
    let mut out = OutDir::create(&cfg.out_dir)?;
    out.write("deviation.csv", table.to_csv().as_bytes())?;
    out.write_json("deviation.json", &table)?;
    if table.populations.iter().all(|&n| n == 0) {
        print_summary("deviation", &out, BTreeMap::new());
        return Err(Failure::Empty(
            "no pulse fell inside the deviation bins".into(),
        ));
    }
    let plan = derive_plan(&table);
    if let Ok(plan) = &plan {
        out.write_json("plan.json", plan)?;
    }
    let winners: Vec<serde_json::Value> = (0..table.n_bins())
        .map(|b| serde_json::json!(table.winner(b).map(|i| table.candidates[i].label())))
        .collect();
    print_summary(
        "deviation",
        &out,
        BTreeMap::from([("winners", winners.into())]),
    );
    plan.map(|_| ()).map_err(Failure::from)
}

const DEFAULT_V2: [f64; 5] = [4.0, 8.0, 12.0, 16.0, 20.0];
const DEFAULT_V3: [f64; 5] = [16.0, 20.0, 26.0, 30.0, 34.0];

fn optimize_cmd(cfg: RunConfig) -> Result<(), Failure> {
    let levels = cfg.thresholds.levels();
    if levels.len() < 2 {
        return Err(Failure::Usage(
            "optimize needs V1 and V4 in --thresholds".into(),
        ));
    }
    let (v1, v4) = (levels[0], levels[levels.len() - 1]);
    let between =
        |v: &[f64]| -> Vec<f64> { v.iter().copied().filter(|&x| x > v1 && x < v4).collect() };
    let v2 = cfg.extra.v2.clone().unwrap_or_else(|| between(&DEFAULT_V2));
    let v3 = cfg.extra.v3.clone().unwrap_or_else(|| between(&DEFAULT_V3));
    if v2.is_empty() || v3.is_empty() {
        return Err(Failure::Usage("empty V2 or V3 candidate list".into()));
    }

    let (pulses, generator) = cfg.load_pulses()?;
    let options = cfg.options();
    let template = method_config(&cfg, &pulses, &options)?;
    let cal = calibration(&cfg, generator.as_ref())?;
    let grid = optimize_thresholds(&pulses, v1, v4, &v2, &v3, &template, &cal, &options)?;

    let mut out = OutDir::create(&cfg.out_dir)?;
    out.write("grid.csv", grid.to_csv().as_bytes())?;
    out.write_json("grid.json", &grid)?;
    out.write("grid.svg", grid_svg(&grid).as_bytes())?;
    print_summary(
        "optimize",
        &out,
        BTreeMap::from([("best_thresholds", serde_json::json!(grid.best_thresholds()))]),
    );

    if grid.best.is_none() {
        let evaluated = grid
            .cells
            .iter()
            .flatten()
            .any(|c| !matches!(c, ppmvt::selection::GridCell::Skipped));
        return Err(if evaluated {
            Failure::Fit("no grid cell produced a photopeak fit".into())
        } else {
            Failure::Usage("no grid cell has V2 < V3".into())
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(c) => simulate(RunConfig::resolve(&c, Extra::default())?),
        Command::Analyze(c) => analyze_cmd(RunConfig::resolve(&c, Extra::default())?),
        Command::Compare(c) => compare_cmd(RunConfig::resolve(&c, Extra::default())?),
        Command::Deviation {
            common,
            bin_width,
            candidates,
        } => deviation_cmd(RunConfig::resolve(
            &common,
            Extra {
                bin_width,
                candidates,
                ..Extra::default()
            },
        )?),
        Command::Optimize { common, v2, v3 } => optimize_cmd(RunConfig::resolve(
            &common,
            Extra {
                v2,
                v3,
                ..Extra::default()
            },
        )?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.render().to_string();
            return report(Failure::Usage(msg.trim().to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let doc = serde_json::json!({ "error": f.kind(), "code": f.code(), "message": f.message() });
    eprintln!("{doc}");
    ExitCode::from(f.code())
}
