//! `hidtreat` command-line tool.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hidtreat::data::{load_csv, read_csv};
use hidtreat::efficiency::{efficient_update, EfficiencyReport};
use hidtreat::em::{deviation_flags, run_em, EmInit, FoldAssignment};
use hidtreat::estimators::{estimate_ate, estimate_levels, median_aggregate, z_quantile, LEVEL};
use hidtreat::functionals::{estimate_ett, estimate_msm, estimate_qte, estimate_semilinear, Link};
use hidtreat::ident::{identify_sample, relevance_check};
use hidtreat::rng::stream_rng;
use hidtreat::sim::{run_monte_carlo, EstimatorKind, Scenario, SimOutcome};
use hidtreat::{EstimatorConfig, LabelCondition, ObservedDataset, OutcomeKind};
use log::{info, warn};

use report::{EmSummary, EstimateLine, EstimationReport, IdentificationReport, SimulationReport};

const EXIT_PARTIAL: u8 = 2;
const EXIT_IDENT: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "hidtreat", version, about = "Causal effects of a hidden binary treatment")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo study on the built-in simulation design.
    Simulate(SimulateArgs),
    /// Estimate an effect from a CSV file with header y,a,z,x1,...,xd.
    Estimate(EstimateArgs),
    /// Identify the latent law of a discrete sample from its cell frequencies.
    Identify(IdentifyArgs),
    /// Print a JSON report written by another subcommand as text.
    Report(ReportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScenarioArg {
    Binary,
    Continuous,
}

#[derive(clap::Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "binary")]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// EM stopping threshold.
    #[arg(long, default_value_t = 0.001)]
    delta: f64,
    /// Both outcomes at n = 1000 and 2000 with 200 runs each; overrides --scenario, --n and --runs.
    #[arg(long)]
    full_table1: bool,
    /// Comma-separated subset of proposed, infeasible, naive, moment_plugin.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// JSON report; the text table goes next to it with extension .txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum FunctionalArg {
    Ate,
    Ett,
    Qte,
    Semilinear,
    Msm,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum LinkArg {
    Identity,
    Logit,
}

#[derive(clap::Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    /// binary, categorical (levels inferred), categorical:K or continuous.
    #[arg(long)]
    outcome: String,
    #[arg(long, value_enum, default_value = "ate")]
    functional: FunctionalArg,
    /// Quantile level in (0, 1); required for qte.
    #[arg(long)]
    gamma: Option<f64>,
    /// Treatment arm of the quantile.
    #[arg(long, default_value_t = 1)]
    arm: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Cross-fitting repeats, aggregated by the median.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// One-step efficient update (ate only).
    #[arg(long)]
    efficient: bool,
    /// Bins used to discretise a continuous outcome for --efficient.
    #[arg(long, default_value_t = 8)]
    bins: usize,
    #[arg(long, default_value = "C1")]
    condition: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.001)]
    delta: f64,
    /// MSM link (default logit for a binary outcome, identity otherwise).
    #[arg(long, value_enum)]
    link: Option<LinkArg>,
    /// Covariate columns (1-based) entering the MSM.
    #[arg(long, value_delimiter = ',')]
    msm_v: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct IdentifyArgs {
    #[arg(long)]
    input: PathBuf,
    /// binary, categorical (levels inferred) or categorical:K.
    #[arg(long, default_value = "binary")]
    outcome: String,
    #[arg(long, default_value = "C1")]
    condition: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
}

/// Error that maps straight to an exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<hidtreat::Error>() {
            return match e {
                hidtreat::Error::Identification(_)
                | hidtreat::Error::Solve(_)
                | hidtreat::Error::Quantile(_)
                | hidtreat::Error::Bandwidth(_) => EXIT_IDENT,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("building the thread pool")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Identify(a) => identify(a),
        Command::Report(a) => print_report(a),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<u8> {
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    if a.n < 2 * a.folds.max(1) {
        return Err(usage("--n is too small for the number of folds"));
    }
    let estimators = match &a.estimators {
        None => vec![
            EstimatorKind::Proposed,
            EstimatorKind::Infeasible,
            EstimatorKind::Naive,
            EstimatorKind::MomentPlugin,
        ],
        Some(list) => list.iter().map(|s| EstimatorKind::parse(s)).collect::<hidtreat::Result<_>>()?,
    };
    let config = EstimatorConfig {
        folds: a.folds,
        em_threshold: a.delta,
        seed: a.seed,
        ..Default::default()
    };
    config.validate()?;
    let outcome = match a.scenario {
        ScenarioArg::Binary => SimOutcome::Binary,
        ScenarioArg::Continuous => SimOutcome::Continuous,
    };
    let plan: Vec<(SimOutcome, usize, usize)> = if a.full_table1 {
        [SimOutcome::Binary, SimOutcome::Continuous]
            .into_iter()
            .flat_map(|o| [1000, 2000].map(|n| (o, n, 200)))
            .collect()
    } else {
        vec![(outcome, a.n, a.runs)]
    };
    let mut reports = Vec::new();
    for (outcome, n, runs) in plan {
        let scenario = Scenario {
            outcome,
            n,
            runs,
            seed: a.seed,
            estimators: estimators.clone(),
        };
        let rep = run_monte_carlo(&scenario, &config)?;
        for f in &rep.failures {
            warn!("{f}");
        }
        reports.push(rep);
    }
    let doc = SimulationReport {
        report: "simulation".into(),
        reports,
    };
    write_json(&a.out, &doc)?;
    let text = doc.text();
    let txt = a.out.with_extension("txt");
    std::fs::write(&txt, &text).with_context(|| format!("writing {}", txt.display()))?;
    print!("{text}");
    Ok(if doc.reports.iter().any(|r| r.failed()) { EXIT_PARTIAL } else { 0 })
}

/// Parses the outcome flag; plain `categorical` takes its level count from the data.
fn load_input(path: &Path, outcome: &str) -> Result<(ObservedDataset, String)> {
    if outcome.trim().eq_ignore_ascii_case("categorical") {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let raw = read_csv(file, OutcomeKind::Continuous)?;
        let max = raw.y().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max.fract() != 0.0 || max < 2.0 {
            return Err(usage("a categorical outcome takes values 1, ..., K with K >= 2"));
        }
        let k = max as usize;
        let data = raw.with_outcome(OutcomeKind::Categorical(k), raw.y().to_vec())?;
        return Ok((data, format!("categorical:{k}")));
    }
    let kind = OutcomeKind::parse(outcome)?;
    let data = load_csv(path, kind).with_context(|| format!("reading {}", path.display()))?;
    Ok((data, outcome.trim().to_ascii_lowercase()))
}

/// Per-repeat estimates keyed by estimand, in a fixed order.
#[derive(Default)]
struct Collected {
    names: Vec<String>,
    runs: Vec<Vec<(f64, f64)>>,
}

impl Collected {
    fn push(&mut self, name: &str, estimate: f64, se: f64) {
        match self.names.iter().position(|n| n == name) {
            Some(j) => self.runs[j].push((estimate, se)),
            None => {
                self.names.push(name.into());
                self.runs.push(vec![(estimate, se)]);
            }
        }
    }

    fn lines(&self, with_ci: bool) -> Vec<EstimateLine> {
        let z = z_quantile(LEVEL);
        self.names
            .iter()
            .zip(&self.runs)
            .map(|(name, runs)| {
                let (psi, se) = median_aggregate(runs);
                let ci = with_ci.then_some([psi - z * se, psi + z * se]);
                EstimateLine::new(name, psi, se, ci)
            })
            .collect()
    }
}

fn estimate(a: EstimateArgs) -> Result<u8> {
    if a.functional == FunctionalArg::Qte && a.gamma.is_none() {
        return Err(usage("--functional qte needs --gamma"));
    }
    if let Some(g) = a.gamma {
        if !(g > 0.0 && g < 1.0) {
            return Err(usage("--gamma must lie in (0, 1)"));
        }
    }
    if a.arm > 1 {
        return Err(usage("--arm must be 0 or 1"));
    }
    if a.efficient && a.functional != FunctionalArg::Ate {
        return Err(usage("--efficient applies to --functional ate only"));
    }
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    if a.msm_v.iter().any(|&c| c == 0) {
        return Err(usage("--msm-v columns are numbered from 1"));
    }
    let condition = LabelCondition::parse(&a.condition)?;
    let config = EstimatorConfig {
        folds: a.folds,
        em_threshold: a.delta,
        seed: a.seed,
        label_condition: condition,
        ..Default::default()
    };
    config.validate()?;
    let (data, outcome) = load_input(&a.input, &a.outcome)?;
    if a.folds > data.n() {
        return Err(usage("more folds than units"));
    }
    let det = relevance_check(&data)?;
    let link = match a.link {
        Some(LinkArg::Identity) => Link::Identity,
        Some(LinkArg::Logit) => Link::Logit,
        None if data.kind() == OutcomeKind::Binary => Link::Logit,
        None => Link::Identity,
    };
    let v_cols: Vec<usize> = a.msm_v.iter().map(|c| c - 1).collect();

    let mut collected = Collected::default();
    let mut em = EmSummary::default();
    let mut warnings = Vec::new();
    let mut boundary = false;
    let mut efficiency: Vec<Vec<EfficiencyReport>> = Vec::new();
    let mut trims = 0;
    for r in 0..a.repeats {
        let mut rng = stream_rng(a.seed, r as u64);
        let folds = FoldAssignment::random(data.n(), a.folds, &mut rng)?;
        let (nuis, diag) = run_em(&data, &config, &folds, &EmInit::Default, &mut rng)?;
        em.add(&diag);
        warnings.extend(diag.warnings.iter().cloned());
        match a.functional {
            FunctionalArg::Ate => {
                let est = estimate_ate(&data, &nuis, &config)?;
                trims += est.trims;
                for s in [&est.psi1, &est.psi0, &est.ate] {
                    collected.push(&s.estimand, s.estimate, s.se);
                }
                if data.kind().levels().is_some_and(|k| k > 2) {
                    for (v, e) in estimate_levels(&data, &nuis, &config)? {
                        collected.push(&format!("psi1[y={v}]"), e.psi1.estimate, e.psi1.se);
                        collected.push(&format!("psi0[y={v}]"), e.psi0.estimate, e.psi0.se);
                    }
                }
                if a.efficient {
                    efficiency.push(efficient_update(&data, &nuis, &config, a.bins)?);
                }
            }
            FunctionalArg::Ett => {
                let s = estimate_ett(&data, &nuis, &config)?;
                collected.push(&s.estimand, s.estimate, s.se);
            }
            FunctionalArg::Qte => {
                let gamma = a.gamma.unwrap_or(0.5);
                let q = estimate_qte(&data, &nuis, gamma, a.arm, &config)?;
                boundary |= q.boundary;
                collected.push(&format!("qte{}({gamma})", q.arm), q.theta, q.se_plugin);
            }
            FunctionalArg::Semilinear => {
                let s = estimate_semilinear(&data, &nuis, None, &config)?;
                collected.push(&s.estimand, s.estimate, s.se);
            }
            FunctionalArg::Msm => {
                let m = estimate_msm(&data, &nuis, &v_cols, link, &config)?;
                let mut names = vec!["beta_0".to_string(), "beta_a".to_string()];
                names.extend(a.msm_v.iter().map(|c| format!("beta_x{c}")));
                for ((name, b), se) in names.iter().zip(&m.beta).zip(&m.se) {
                    collected.push(name, *b, *se);
                }
            }
        }
    }
    if trims > 0 {
        warnings.push(format!("{trims} unit evaluations hit the trimming floor"));
    }
    if em.clamped > 0 {
        warnings.push(format!("{} probabilities clamped during EM", em.clamped));
    }
    if em.kernel_fallbacks > 0 {
        warnings.push(format!("{} kernel fits fell back to the nearest neighbour", em.kernel_fallbacks));
    }
    if !em.all_converged {
        warnings.push(format!("EM reached the iteration cap in some fold (max {} iterations)", em.max_iterations));
    }
    if let Some(dropped) = efficiency.first().map(|e| e[0].dropped_basis_entries).filter(|&d| d > 0) {
        warnings.push(format!("{dropped} efficiency basis entries zeroed near a degenerate outcome level"));
    }
    if boundary {
        warnings.push("quantile search stopped at the smallest observed outcome".into());
    }
    warnings.sort();
    warnings.dedup();
    for w in &warnings {
        info!("{w}");
    }
    let efficiency = (!efficiency.is_empty()).then(|| aggregate_efficiency(&efficiency));
    let report = EstimationReport {
        report: "estimation".into(),
        input: a.input.display().to_string(),
        n: data.n(),
        d: data.d(),
        outcome,
        functional: format!("{:?}", a.functional).to_ascii_lowercase(),
        condition: format!("{condition:?}"),
        folds: a.folds,
        repeats: a.repeats,
        seed: a.seed,
        em_threshold: a.delta,
        trim_epsilon: config.trim_epsilon,
        gamma: a.gamma.filter(|_| a.functional == FunctionalArg::Qte),
        arm: (a.functional == FunctionalArg::Qte).then_some(a.arm),
        link: (a.functional == FunctionalArg::Msm).then(|| format!("{link:?}").to_ascii_lowercase()),
        msm_v: a.msm_v.clone(),
        boundary: (a.functional == FunctionalArg::Qte).then_some(boundary),
        relevance_determinant: det,
        estimates: collected.lines(a.functional != FunctionalArg::Qte),
        efficiency,
        em,
        deviations: deviation_flags(data.kind()),
        warnings,
    };
    write_json(&a.out, &report)?;
    print!("{}", report.text());
    Ok(0)
}

/// Median over repeats of the one-step estimate and its standard error; the other
/// fields come from the first repeat.
fn aggregate_efficiency(reps: &[Vec<EfficiencyReport>]) -> Vec<EfficiencyReport> {
    let mut out = reps[0].clone();
    for (j, r) in out.iter_mut().enumerate() {
        let runs: Vec<(f64, f64)> = reps.iter().map(|x| (x[j].psi_onestep, x[j].se_onestep)).collect();
        let (psi, se) = median_aggregate(&runs);
        r.psi = median_aggregate(&reps.iter().map(|x| (x[j].psi, 0.0)).collect::<Vec<_>>()).0;
        r.psi_onestep = psi;
        r.se_onestep = se;
    }
    out
}

fn identify(a: IdentifyArgs) -> Result<u8> {
    let condition = LabelCondition::parse(&a.condition)?;
    let (data, outcome) = load_input(&a.input, &a.outcome)?;
    let Some(k) = data.kind().levels() else {
        return Err(usage("identify needs a discrete outcome"));
    };
    let strata = identify_sample(&data, condition)?;
    let mut warnings: Vec<String> = strata
        .iter()
        .flat_map(|s| s.law.warnings.iter().map(move |w| format!("stratum x = {:?}: {w}", s.x)))
        .collect();
    if data.d() > 0 && strata.len() * 10 > data.n() {
        warnings.push(format!("{} strata for {} units; covariates look continuous", strata.len(), data.n()));
    }
    for w in &warnings {
        info!("{w}");
    }
    let report = IdentificationReport {
        report: "identification".into(),
        input: a.input.display().to_string(),
        n: data.n(),
        outcome,
        levels: (0..k).map(|r| data.kind().level_value(r)).collect(),
        condition: format!("{condition:?}"),
        strata,
        warnings,
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print!("{}", report.text());
    Ok(0)
}

fn print_report(a: ReportArgs) -> Result<u8> {
    let s = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let v: serde_json::Value = serde_json::from_str(&s)?;
    let text = match v.get("report").and_then(|r| r.as_str()) {
        Some("simulation") => serde_json::from_value::<SimulationReport>(v)?.text(),
        Some("estimation") => serde_json::from_value::<EstimationReport>(v)?.text(),
        Some("identification") => serde_json::from_value::<IdentificationReport>(v)?.text(),
        Some(other) => bail!(usage(format!("unknown report type '{other}'"))),
        None => bail!(usage("not a hidtreat report (no \"report\" field)")),
    };
    print!("{text}");
    Ok(0)
}
