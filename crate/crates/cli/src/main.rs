use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use epinet::chain;
use epinet::graph::{self, Graph, GraphKind};
use epinet::meanfield::{self, Classification, FixedPointOptions, MeanFieldPoint};
use epinet::montecarlo::{self, InitialCondition};
use epinet::spectral;
use epinet::verify::{self, Suite, SuiteConfig};
use epinet::{EpiError, ModelSpec, Rates, Variant};

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_VERIFICATION: u8 = 4;

/// Discrete-time epidemic models on networks: simulation, mean-field
/// analysis, exact chains and property checks.
#[derive(Parser, Debug)]
#[command(name = "epinet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a graph and write it as an edge list.
    Gen(GenArgs),
    /// Monte Carlo ensemble; writes the mean trajectory CSV.
    Simulate(SimulateArgs),
    /// Fixed point, classification and Jacobian spectrum of the mean-field map.
    Meanfield(MeanfieldArgs),
    /// Exact transition matrix: mixing time, analytic bound, stationarity.
    Exact(ExactArgs),
    /// Run property suites; exit 4 if any fails.
    Verify(VerifyArgs),
    /// Simulation outcome and fixed point across a grid of β values.
    Sweep(SweepArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Er,
    Geometric,
    Complete,
    Star,
    Path,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    n: usize,
    /// Edge probability (er).
    #[arg(long)]
    p: Option<f64>,
    /// Connection radius (geometric).
    #[arg(long)]
    r: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resample ER graphs until connected.
    #[arg(long)]
    connected: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct GraphSource {
    /// Edge-list file.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Generator spec such as `er:n=2000,p=0.0082,seed=7` or `star:n=3`.
    #[arg(long = "gen")]
    generate: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_parser = parse_variant)]
    model: Variant,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// Contact matrix file for sis-general: one row per line, comma or
    /// whitespace separated.
    #[arg(long)]
    contact: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    source: GraphSource,
    #[command(flatten)]
    model: ModelArgs,
    /// Steps to simulate.
    #[arg(long)]
    t: usize,
    #[arg(long, default_value_t = 25)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `all`, `fraction:F`, or `nodes:0,4,7`.
    #[arg(long, default_value = "all", value_parser = parse_init)]
    init: InitialCondition,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also write the summary as JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MeanfieldArgs {
    #[command(flatten)]
    source: GraphSource,
    #[command(flatten)]
    model: ModelArgs,
    /// Undamped iteration (damping 1).
    #[arg(long, conflicts_with = "damping")]
    raw_iteration: bool,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iter: usize,
    /// Iterate on p_I with p_R pinned to the fixed-point relation.
    #[arg(long)]
    reduce: bool,
    /// Steps of the map trajectory written with --trajectory-out.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long)]
    trajectory_out: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExactArgs {
    #[command(flatten)]
    source: GraphSource,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.25)]
    epsilon: f64,
    /// State-space cap; defaults to 2^13 (two-state) or 3^8 (three-state).
    #[arg(long)]
    cap: Option<usize>,
    /// Write the transition matrix as CSV.
    #[arg(long)]
    matrix_out: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Suite name or `all`.
    #[arg(long, value_parser = parse_suite)]
    suite: SuiteChoice,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    source: GraphSource,
    #[command(flatten)]
    model: ModelArgs,
    /// `start:stop:step` or a comma-separated list; overrides --beta.
    #[arg(long)]
    beta_grid: String,
    #[arg(long)]
    t: usize,
    #[arg(long, default_value_t = 25)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug)]
enum SuiteChoice {
    One(Suite),
    All,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: EpiError| e.to_string())
}

fn parse_suite(s: &str) -> Result<SuiteChoice, String> {
    if s == "all" {
        return Ok(SuiteChoice::All);
    }
    let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
    s.parse()
        .map(SuiteChoice::One)
        .map_err(|_| format!("unknown suite `{s}`; expected `all` or one of {}", names.join(", ")))
}

fn parse_init(s: &str) -> Result<InitialCondition, String> {
    if s == "all" {
        return Ok(InitialCondition::AllInfected);
    }
    if let Some(f) = s.strip_prefix("fraction:") {
        let f: f64 = f.parse().map_err(|_| format!("bad fraction `{f}`"))?;
        if !(0.0..=1.0).contains(&f) {
            return Err(format!("fraction {f} outside [0, 1]"));
        }
        return Ok(InitialCondition::Fraction(f));
    }
    if let Some(list) = s.strip_prefix("nodes:") {
        let nodes = list
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad node index `{t}`")))
            .collect::<Result<_, _>>()?;
        return Ok(InitialCondition::Explicit(nodes));
    }
    Err(format!("unknown initial condition `{s}`; expected all, fraction:F or nodes:i,j,..."))
}

/// Error carrying the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_IO, message: format!("{}: {err}", path.display()) }
    }
}

impl From<EpiError> for Failure {
    fn from(e: EpiError) -> Self {
        let code = match e {
            EpiError::NotConverged { .. } => EXIT_NOT_CONVERGED,
            EpiError::Verification(_) => EXIT_VERIFICATION,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

/// Writes via a sibling temporary file and a rename, so readers never see
/// a partial file.
fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Failure::io(path, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| Failure::io(path, e))?;
    tmp.persist(path).map_err(|e| Failure::io(path, e.error))?;
    Ok(())
}

/// Data goes to the file when one is given, otherwise to stdout. Returns
/// whether stdout is free for the human summary.
fn emit(output: Option<&Path>, contents: &str) -> CliResult<bool> {
    match output {
        Some(p) => {
            write_atomic(p, contents)?;
            Ok(true)
        }
        None => {
            print!("{contents}");
            Ok(false)
        }
    }
}

fn say(stdout_free: bool, line: &str) {
    if stdout_free {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn parse_gen_spec(spec: &str) -> CliResult<(GraphKind, u64)> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut n = None;
    let mut p = None;
    let mut r = None;
    let mut seed = 0;
    for part in rest.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("generator field `{part}` is not key=value")))?;
        let bad = || Failure::usage(format!("bad value `{v}` for `{k}`"));
        match k {
            "n" => n = Some(v.parse().map_err(|_| bad())?),
            "p" => p = Some(v.parse().map_err(|_| bad())?),
            "r" => r = Some(v.parse().map_err(|_| bad())?),
            "seed" => seed = v.parse().map_err(|_| bad())?,
            _ => return Err(Failure::usage(format!("unknown generator field `{k}`"))),
        }
    }
    let n = n.ok_or_else(|| Failure::usage("generator spec needs n=..."))?;
    let kind = match kind {
        "er" => GraphKind::Er { n, p: p.ok_or_else(|| Failure::usage("er needs p=..."))? },
        "geometric" => GraphKind::Geometric { n, r: r.ok_or_else(|| Failure::usage("geometric needs r=..."))? },
        "complete" => GraphKind::Complete { n },
        "star" => GraphKind::Star { n },
        "path" => GraphKind::Path { n },
        _ => return Err(Failure::usage(format!("unknown graph kind `{kind}`"))),
    };
    Ok((kind, seed))
}

fn load_graph(source: &GraphSource) -> CliResult<Graph> {
    let g = match (&source.graph, &source.generate) {
        (Some(path), _) => graph::parse_edge_list(&read_text(path)?)?,
        (None, Some(spec)) => {
            let (kind, seed) = parse_gen_spec(spec)?;
            graph::generate(kind, seed)?
        }
        (None, None) => return Err(Failure::usage("one of --graph or --gen is required")),
    };
    if !g.is_connected() {
        log::warn!("graph is disconnected ({} components)", g.components().len());
    }
    Ok(g)
}

fn parse_matrix(text: &str) -> CliResult<Vec<Vec<f64>>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(k, line)| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| Failure::usage(format!("contact row {}: bad number `{t}`", k + 1))))
                .collect()
        })
        .collect()
}

fn build_model(args: &ModelArgs, graph: &Graph) -> CliResult<ModelSpec> {
    let contact = match &args.contact {
        Some(path) => Some(parse_matrix(&read_text(path)?)?),
        None => None,
    };
    let rates = Rates { beta: args.beta, delta: args.delta, gamma: args.gamma, theta: args.theta, contact };
    let model = ModelSpec::new(args.model, rates)?;
    model.check_graph(graph)?;
    Ok(model)
}

fn regime(ratio: f64) -> &'static str {
    if ratio < 1.0 {
        "below the mean-field threshold"
    } else if ratio > 1.0 {
        "above the mean-field threshold"
    } else {
        "at the mean-field threshold"
    }
}

fn cmd_gen(args: &GenArgs) -> CliResult<()> {
    let kind = match args.kind {
        Kind::Er => GraphKind::Er { n: args.n, p: args.p.ok_or_else(|| Failure::usage("--kind er needs --p"))? },
        Kind::Geometric => {
            GraphKind::Geometric { n: args.n, r: args.r.ok_or_else(|| Failure::usage("--kind geometric needs --r"))? }
        }
        Kind::Complete => GraphKind::Complete { n: args.n },
        Kind::Star => GraphKind::Star { n: args.n },
        Kind::Path => GraphKind::Path { n: args.n },
    };
    let g = match (args.connected, kind) {
        (true, GraphKind::Er { n, p }) => graph::connected_er(n, p, args.seed)?,
        _ => graph::generate(kind, args.seed)?,
    };
    let free = emit(args.output.as_deref(), &g.to_edge_list())?;
    let spec = spectral::spectral_radius(&g, 1e-10)?;
    say(
        free,
        &format!(
            "n={} edges={} lambda_max={:.6} connected={}",
            g.n(),
            g.edge_count(),
            spec.lambda_max,
            spec.connected
        ),
    );
    Ok(())
}

#[derive(Serialize)]
struct SimulationSummary {
    variant: Variant,
    n: usize,
    lambda_max: f64,
    threshold_ratio: f64,
    regime: &'static str,
    reps: usize,
    t: usize,
    seed: u64,
    extinct_fraction: f64,
    persistent_fraction: f64,
    median_extinction_step: Option<f64>,
    final_mean_infected: f64,
}

fn median(mut v: Vec<usize>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { 0.5 * (v[m - 1] + v[m]) as f64 } else { v[m] as f64 })
}

fn simulate_summary(
    model: &ModelSpec,
    g: &Graph,
    init: &InitialCondition,
    t: usize,
    reps: usize,
    seed: u64,
) -> CliResult<(SimulationSummary, montecarlo::EnsembleReport)> {
    let lambda_max = spectral::spectral_radius(g, 1e-10)?.lambda_max;
    let ratio = spectral::threshold_ratio(model, g)?;
    let report = montecarlo::mc_ensemble(model, g, init, t, reps, seed, &[])?;
    let steps: Vec<usize> = report.extinction_steps.iter().flatten().copied().collect();
    let summary = SimulationSummary {
        variant: model.variant(),
        n: g.n(),
        lambda_max,
        threshold_ratio: ratio,
        regime: regime(ratio),
        reps,
        t,
        seed,
        extinct_fraction: report.extinct_fraction(),
        persistent_fraction: report.persistent_fraction(),
        median_extinction_step: median(steps),
        final_mean_infected: *report.mean_i.last().expect("t ≥ 1"),
    };
    Ok((summary, report))
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    if args.t == 0 {
        return Err(Failure::usage("--t must be at least 1"));
    }
    let g = load_graph(&args.source)?;
    let model = build_model(&args.model, &g)?;
    let (summary, report) = simulate_summary(&model, &g, &args.init, args.t, args.reps, args.seed)?;
    let free = emit(args.output.as_deref(), &report.to_csv())?;
    if let Some(path) = &args.summary {
        write_atomic(path, &to_json(&summary))?;
    }
    say(
        free,
        &format!(
            "{} n={} lambda_max={:.4} ratio={:.4} ({}) extinct={:.2} persistent={:.2} median_extinction={} over {} reps, {} steps",
            summary.variant,
            summary.n,
            summary.lambda_max,
            summary.threshold_ratio,
            summary.regime,
            summary.extinct_fraction,
            summary.persistent_fraction,
            summary.median_extinction_step.map_or("none".into(), |m| m.to_string()),
            summary.reps,
            summary.t
        ),
    );
    Ok(())
}

fn trajectory_csv(model: &ModelSpec, g: &Graph, start: &MeanFieldPoint, steps: usize) -> CliResult<String> {
    let traj = meanfield::mf_iterate(model, g, start, steps)?;
    let n = g.n();
    let mut out = String::from("t,mean_i,mean_r");
    for i in 0..n {
        out.push_str(&format!(",i{i}"));
    }
    out.push('\n');
    for (t, x) in traj.iter().enumerate() {
        let mean_i = x.p_i.iter().sum::<f64>() / n as f64;
        let mean_r = x.p_r.as_ref().map_or(0.0, |r| r.iter().sum::<f64>() / n as f64);
        out.push_str(&format!("{t},{mean_i},{mean_r}"));
        for v in &x.p_i {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

fn cmd_meanfield(args: &MeanfieldArgs) -> CliResult<()> {
    let g = load_graph(&args.source)?;
    let model = build_model(&args.model, &g)?;
    let opts = FixedPointOptions {
        tol: args.tol,
        cap: args.max_iter,
        damping: if args.raw_iteration { Some(1.0) } else { args.damping },
        reduce_with_relation: args.reduce,
        ..FixedPointOptions::default()
    };
    let report = meanfield::find_fixed_point(&model, &g, &opts)?;
    let ratio = spectral::threshold_ratio(&model, &g)?;
    let stability = if report.jacobian_spectrum.is_empty() {
        None
    } else {
        Some(meanfield::stability_from_spectrum(&report.jacobian_spectrum)?)
    };
    let out = json!({
        "variant": model.variant(),
        "n": g.n(),
        "threshold_ratio": ratio,
        "regime": regime(ratio),
        "classification": report.classification,
        "residual": report.residual,
        "iterations": report.iterations,
        "point": report.point,
        "jacobian_spectrum": report.jacobian_spectrum,
        "stability": stability,
        "relation_defect": report.relation_defect,
    });
    let free = emit(args.output.as_deref(), &to_json(&out))?;
    if let Some(path) = &args.trajectory_out {
        let start = MeanFieldPoint::upper_corner(&model, g.n());
        write_atomic(path, &trajectory_csv(&model, &g, &start, args.steps)?)?;
    }
    let class = match report.classification {
        Classification::DiseaseFree => "disease-free".to_string(),
        Classification::Endemic => "endemic".to_string(),
        Classification::Cycle { period } => format!("cycle({period})"),
        Classification::NonConverged => "non-converged".to_string(),
    };
    say(free, &format!("{} ratio={ratio:.4} classification={class} residual={:.3e}", model.variant(), report.residual));
    match report.classification {
        Classification::DiseaseFree | Classification::Endemic => Ok(()),
        _ => Err(Failure { code: EXIT_NOT_CONVERGED, message: format!("iteration did not settle on a fixed point: {class}") }),
    }
}

fn cmd_exact(args: &ExactArgs) -> CliResult<()> {
    let g = load_graph(&args.source)?;
    let model = build_model(&args.model, &g)?;
    let cap = args.cap.unwrap_or_else(|| chain::default_cap(model.states_per_node()));
    let s = chain::build_transition_matrix_capped(&model, &g, cap)?;
    let (pi, defect) = chain::stationary_with(&model, &s)?;
    let mixing = chain::mixing_time_exact(&s, &pi, args.epsilon)?;
    let bound = chain::mixing_time_bound(&model, &g, args.epsilon)?;
    let ratio = spectral::threshold_ratio(&model, &g)?;
    let within = (mixing.t_mix as f64) <= bound.ceil();
    let out = json!({
        "variant": model.variant(),
        "n": g.n(),
        "states": s.size(),
        "threshold_ratio": ratio,
        "epsilon": args.epsilon,
        "t_mix": mixing.t_mix,
        "reached": mixing.reached,
        "distance": mixing.distance,
        "bound": bound,
        "bound_ceil": bound.ceil(),
        "within_bound": within,
        "worst_initial": {
            "code": mixing.worst_initial.0,
            "digits": s.space().decode(mixing.worst_initial),
        },
        "stationary_defect": defect,
    });
    let free = emit(args.output.as_deref(), &to_json(&out))?;
    if let Some(path) = &args.matrix_out {
        write_atomic(path, &s.to_csv())?;
    }
    say(
        free,
        &format!(
            "{} n={} states={} t_mix={} bound={bound:.3} within_bound={within} stationary_defect={defect:.2e}",
            model.variant(),
            g.n(),
            s.size(),
            mixing.t_mix
        ),
    );
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    let cfg = SuiteConfig { trials: args.trials, n_max: args.n_max, seed: args.seed };
    let verdicts = match args.suite {
        SuiteChoice::One(s) => vec![verify::run_suite(s, &cfg)?],
        SuiteChoice::All => verify::run_all(&cfg)?,
    };
    let free = emit(args.output.as_deref(), &to_json(&verdicts))?;
    for v in &verdicts {
        say(
            free,
            &format!(
                "{:<10} {} checks={} failed={}",
                v.suite.name(),
                if v.passed { "PASS" } else { "FAIL" },
                v.checks,
                v.failed_checks
            ),
        );
    }
    if verdicts.iter().all(|v| v.passed) {
        Ok(())
    } else {
        let failed: Vec<&str> = verdicts.iter().filter(|v| !v.passed).map(|v| v.suite.name()).collect();
        Err(Failure { code: EXIT_VERIFICATION, message: format!("failed suites: {}", failed.join(", ")) })
    }
}

fn parse_grid(spec: &str) -> CliResult<Vec<f64>> {
    let bad = |t: &str| Failure::usage(format!("bad grid value `{t}`"));
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [a, b, step] = parts[..] else {
            return Err(Failure::usage("grid range must be start:stop:step"));
        };
        let (a, b, step): (f64, f64, f64) =
            (a.parse().map_err(|_| bad(a))?, b.parse().map_err(|_| bad(b))?, step.parse().map_err(|_| bad(step))?);
        if !(step > 0.0) {
            return Err(Failure::usage("grid step must be positive"));
        }
        let count = ((b - a) / step + 1e-9).floor();
        if count < 0.0 {
            Vec::new()
        } else {
            (0..=count as usize).map(|k| a + k as f64 * step).collect()
        }
    } else {
        spec.split(',').map(str::trim).filter(|t| !t.is_empty()).map(|t| t.parse().map_err(|_| bad(t))).collect::<CliResult<_>>()?
    };
    if values.is_empty() {
        return Err(Failure::usage("the β grid is empty"));
    }
    Ok(values)
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let grid = parse_grid(&args.beta_grid)?;
    if args.t == 0 {
        return Err(Failure::usage("--t must be at least 1"));
    }
    if args.model.model == Variant::SisGeneral {
        return Err(Failure::usage("sis-general has no scalar β to sweep"));
    }
    let g = load_graph(&args.source)?;
    let mut out = String::from(
        "beta,ratio,extinct_fraction,persistent_fraction,median_extinction_step,final_mean_infected,fixed_point_classification,fixed_point_norm\n",
    );
    for &beta in &grid {
        let mut margs = args.model.clone();
        margs.beta = Some(beta);
        let model = build_model(&margs, &g)?;
        let (summary, _) = simulate_summary(&model, &g, &InitialCondition::AllInfected, args.t, args.reps, args.seed)?;
        let fp = meanfield::find_fixed_point(&model, &g, &FixedPointOptions { spectrum_cap: 0, ..FixedPointOptions::default() })?;
        let class = match fp.classification {
            Classification::DiseaseFree => "disease-free".to_string(),
            Classification::Endemic => "endemic".to_string(),
            Classification::Cycle { period } => format!("cycle({period})"),
            Classification::NonConverged => "non-converged".to_string(),
        };
        let norm = fp.point.p_i.iter().fold(0.0_f64, |m, v| m.max(*v));
        out.push_str(&format!(
            "{beta},{},{},{},{},{},{class},{norm}\n",
            summary.threshold_ratio,
            summary.extinct_fraction,
            summary.persistent_fraction,
            summary.median_extinction_step.map_or(String::new(), |m| m.to_string()),
            summary.final_mean_infected,
        ));
    }
    let free = emit(args.output.as_deref(), &out)?;
    say(free, &format!("{} grid points, {} reps each, {} steps", grid.len(), args.reps, args.t));
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("EPINET_THREADS") {
        let n: usize = v.parse().map_err(|_| Failure::usage(format!("EPINET_THREADS=`{v}` is not a count")))?;
        if n == 0 {
            return Err(Failure::usage("EPINET_THREADS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Meanfield(a) => cmd_meanfield(a),
        Command::Exact(a) => cmd_exact(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
