//! Acceptance criteria. Runs every criterion, prints one PASS/FAIL line
//! each, and exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use epinet::chain::{self, DistVector};
use epinet::graph::{self, GraphKind};
use epinet::meanfield::{self, Classification, FixedPointOptions};
use epinet::montecarlo::{self, InitialCondition};
use epinet::spectral;
use epinet::verify::{self, Suite, SuiteConfig, Verdict};
use epinet::{Graph, ModelSpec, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome { passed, detail: detail.into() }
    }
}

type Criterion = fn() -> epinet::Result<Outcome>;

fn within_budget(elapsed: Duration, budget: Duration) -> (bool, String) {
    (elapsed <= budget, format!("{:.1}s of {}s", elapsed.as_secs_f64(), budget.as_secs()))
}

fn suite(s: Suite, trials: Option<usize>, n_max: Option<usize>) -> epinet::Result<Verdict> {
    verify::run_suite(s, &SuiteConfig { trials, n_max, seed: 1 })
}

fn describe(v: &Verdict) -> String {
    let mut out = format!("{} {}/{} checks", v.suite, v.checks - v.failed_checks, v.checks);
    if let Some(f) = v.failures.first() {
        out.push_str(&format!(" (first failure {}: {:.3e} vs limit {:.3e})", f.check, f.value, f.limit));
    }
    out
}

fn metric(v: &Verdict, key: &str) -> f64 {
    v.metrics.get(key).copied().unwrap_or(f64::NAN)
}

fn star_fixed_point() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let g = graph::generate(GraphKind::Star { n: 3 }, 0)?;
    let m = ModelSpec::sis_ia(0.9, 0.9)?;
    let report = meanfield::find_fixed_point(&m, &g, &FixedPointOptions::default())?;
    let point_err = report
        .point
        .p_i
        .iter()
        .zip([0.286, 0.222, 0.222])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let reference = [[-0.260, 0.514, 0.514], [0.700, -0.157, 0.0], [0.700, 0.0, -0.157]];
    let jac = meanfield::mf_jacobian(&m, &g, &report.point)?;
    let mut jac_err: f64 = 0.0;
    for (i, row) in reference.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            jac_err = jac_err.max((jac[(i, j)] - v).abs());
        }
    }
    let stab = meanfield::classify_stability(&m, &g, &report.point)?;
    let dominant = stab.dominant;
    let raw = meanfield::find_fixed_point(&m, &g, &FixedPointOptions { damping: Some(1.0), ..Default::default() })?;
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(1));
    let passed = report.classification == Classification::Endemic
        && point_err <= 1e-3
        && jac_err <= 1e-3
        && (dominant.re - -1.059).abs() <= 0.01
        && dominant.im.abs() <= 0.01
        && !stab.stable
        && raw.classification == Classification::Cycle { period: 2 }
        && fast;
    Ok(Outcome::new(
        passed,
        format!(
            "x* error {point_err:.1e}, Jacobian error {jac_err:.1e}, dominant eigenvalue {:.4}, raw iteration {:?}, {time}",
            dominant.re, raw.classification
        ),
    ))
}

fn threshold_dichotomy() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let v = suite(Suite::Dichotomy, Some(20), Some(12))?;
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(30));
    Ok(Outcome::new(v.passed && fast, format!("{}, {time}", describe(&v))))
}

/// β = 0 decouples infection, so the state moves only through the S/R
/// chain, whose relaxation rate `|1 − γ − θ|` the bound does not see.
fn siv_counterexamples() -> epinet::Result<Vec<(Variant, usize, f64)>> {
    let g = graph::generate(GraphKind::Path { n: 1 }, 0)?;
    let mut out = Vec::new();
    for variant in [Variant::SivId, Variant::SivVd] {
        let m = ModelSpec::siv(variant, 0.0, 0.9, 0.05, 0.05)?;
        let s = chain::build_transition_matrix(&m, &g)?;
        let (pi, _) = chain::stationary_with(&m, &s)?;
        let exact = chain::mixing_time_exact(&s, &pi, 0.25)?;
        let bound = chain::mixing_time_bound(&m, &g, 0.25)?;
        out.push((variant, exact.t_mix, bound));
    }
    Ok(out)
}

fn mixing_bound() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let v = suite(Suite::Mixing, Some(12), Some(12))?;
    let counter = siv_counterexamples()?;
    let counter_ok = counter.iter().all(|(_, t, b)| (*t as f64) <= b.ceil());
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(300));
    let excess: Vec<String> = Variant::ALL
        .iter()
        .map(|variant| format!("{variant} {:+}", metric(&v, &format!("max_{variant}_excess"))))
        .collect();
    let counter_text: Vec<String> =
        counter.iter().map(|(variant, t, b)| format!("{variant} n=1 β=0 γ=θ=0.05: t_mix {t} vs bound {b:.3}")).collect();
    Ok(Outcome::new(
        v.passed && counter_ok && fast,
        format!(
            "{}; worst t_mix − ⌈bound⌉ per variant [{}]; extinction slope {:.3} per log n, median growth {:.2}; {}; {time}",
            describe(&v),
            excess.join(", "),
            metric(&v, "scaling_slope"),
            metric(&v, "scaling_median_growth"),
            counter_text.join("; ")
        ),
    ))
}

fn ordering() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let order = suite(Suite::Ordering, Some(50), Some(6))?;
    let ubound = suite(Suite::Ubound, Some(100), Some(6))?;
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(120));
    Ok(Outcome::new(
        order.passed && ubound.passed && fast,
        format!(
            "{}, min conjugate entry {:.2e}; {}, min slack {:.2e}; {time}",
            describe(&order),
            metric(&order, "min_conjugate_entry"),
            describe(&ubound),
            metric(&ubound, "min_u_slack")
        ),
    ))
}

fn lp_bound() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let v = suite(Suite::Lp, None, Some(4))?;
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(120));
    Ok(Outcome::new(
        v.passed && fast,
        format!(
            "{}, max attainment gap {:.1e}, strict gaps {}; {time}",
            describe(&v),
            metric(&v, "max_attainment_gap"),
            metric(&v, "strict_gaps")
        ),
    ))
}

fn non_absorption() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let v = suite(Suite::Nonabsorb, Some(100), Some(6))?;
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(120));
    Ok(Outcome::new(v.passed && fast, format!("{}, min slack {:.2e}; {time}", describe(&v), metric(&v, "min_slack"))))
}

struct FlipRun {
    label: &'static str,
    variant: Variant,
    nominal_beta: f64,
    nominal_lambda: f64,
    above: bool,
}

const FLIP_RUNS: [FlipRun; 8] = [
    FlipRun { label: "SIS", variant: Variant::SisNia, nominal_beta: 0.055, nominal_lambda: 16.159, above: false },
    FlipRun { label: "SIS", variant: Variant::SisNia, nominal_beta: 0.056, nominal_lambda: 16.159, above: true },
    FlipRun { label: "SIRS", variant: Variant::Sirs, nominal_beta: 0.055, nominal_lambda: 16.159, above: false },
    FlipRun { label: "SIRS", variant: Variant::Sirs, nominal_beta: 0.07, nominal_lambda: 16.159, above: true },
    FlipRun { label: "SIV-id", variant: Variant::SivId, nominal_beta: 0.11, nominal_lambda: 16.232, above: false },
    FlipRun { label: "SIV-id", variant: Variant::SivId, nominal_beta: 0.13, nominal_lambda: 16.232, above: true },
    FlipRun { label: "SIV-vd", variant: Variant::SivVd, nominal_beta: 0.22, nominal_lambda: 16.232, above: false },
    FlipRun { label: "SIV-vd", variant: Variant::SivVd, nominal_beta: 0.29, nominal_lambda: 16.232, above: true },
];

const FLIP_REPS: usize = 25;
const FLIP_STEPS: usize = 10_000;
const FLIP_MAJORITY: f64 = 0.8;

fn flip_model(run: &FlipRun, lambda: f64) -> epinet::Result<ModelSpec> {
    let beta = run.nominal_beta * run.nominal_lambda / lambda;
    match run.variant {
        Variant::SisNia => ModelSpec::sis_nia(beta, 0.9),
        Variant::Sirs => ModelSpec::sirs(beta, 0.9, 0.5),
        v => ModelSpec::siv(v, beta, 0.9, 0.5, 0.5),
    }
}

fn threshold_flips() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let g = graph::connected_er(2000, 0.0082, 7)?;
    let lambda = spectral::spectral_radius(&g, 1e-10)?.lambda_max;
    let mut passed = true;
    let mut parts = vec![format!("λ_max {lambda:.4}")];
    for run in &FLIP_RUNS {
        let m = flip_model(run, lambda)?;
        let ratio = spectral::threshold_ratio(&m, &g)?;
        let report = montecarlo::mc_ensemble(&m, &g, &InitialCondition::AllInfected, FLIP_STEPS, FLIP_REPS, 7, &[])?;
        let share = if run.above { report.persistent_fraction() } else { report.extinct_fraction() };
        let ok = share >= FLIP_MAJORITY && (ratio > 1.0) == run.above;
        passed &= ok;
        parts.push(format!(
            "{} ratio {ratio:.4} {} {:.0}%{}",
            run.label,
            if run.above { "persistent" } else { "extinct" },
            100.0 * share,
            if ok { "" } else { " ✗" }
        ));
    }
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(600));
    Ok(Outcome::new(passed && fast, format!("{}; {time}", parts.join(", "))))
}

fn random_connected(rng: &mut ChaCha8Rng, n: usize) -> epinet::Result<Graph> {
    verify::random_connected_graph(rng, n)
}

fn siv_stationarity() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_defect: f64 = 0.0;
    for n in 1..=4 {
        for variant in [Variant::SivId, Variant::SivVd] {
            for _ in 0..5 {
                let g = random_connected(&mut rng, n)?;
                let (beta, delta) = (rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99));
                let (gamma, theta) = (rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99));
                let m = ModelSpec::siv(variant, beta, delta, gamma, theta)?;
                let s = chain::build_transition_matrix(&m, &g)?;
                let pi = chain::stationary_candidate(&m, n)?.into_inner();
                let image = s.left_mul(&pi);
                let defect = image.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst_defect = worst_defect.max(defect);
            }
        }
    }
    // long-run S share of a below-threshold SIV chain
    let g = graph::generate(GraphKind::Path { n: 4 }, 0)?;
    let (gamma, theta) = (0.3, 0.2);
    let share = gamma / (gamma + theta);
    let mut z_scores = Vec::new();
    for variant in [Variant::SivId, Variant::SivVd] {
        let m = ModelSpec::siv(variant, 0.1, 0.8, gamma, theta)?;
        let (reps, steps) = (2000, 400);
        let report = montecarlo::mc_ensemble(&m, &g, &InitialCondition::AllInfected, steps, reps, 11, &[])?;
        let cells = (reps * g.n()) as f64;
        let observed = report.mean_s[steps] / g.n() as f64;
        let sigma = (share * (1.0 - share) / cells).sqrt();
        z_scores.push((variant, (observed - share) / sigma, report.mean_i[steps]));
    }
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(60));
    let z_ok = z_scores.iter().all(|(_, z, i)| z.abs() <= 3.0 && *i == 0.0);
    let z_text: Vec<String> = z_scores.iter().map(|(v, z, _)| format!("{v} z={z:+.2}")).collect();
    Ok(Outcome::new(
        worst_defect <= 1e-10 && z_ok && fast,
        format!("max ‖πS − π‖∞ {worst_defect:.1e}; long-run S share {}; {time}", z_text.join(", ")),
    ))
}

fn oracle_equivalence() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reps = 100_000;
    let mut worst_z: f64 = 0.0;
    let mut comparisons = 0;
    for (k, &variant) in Variant::ALL.iter().enumerate() {
        let n = 2 + k % 5;
        let g = random_connected(&mut rng, n)?;
        let m = verify::random_model(&mut rng, variant, &g)?;
        let s = chain::build_transition_matrix(&m, &g)?;
        let half: Vec<usize> = (0..n).step_by(2).collect();
        for init in [InitialCondition::AllInfected, InitialCondition::Explicit(half)] {
            let space = s.space();
            let mut digits = vec![0u8; n];
            let infected = match &init {
                InitialCondition::Explicit(nodes) => nodes.clone(),
                _ => (0..n).collect(),
            };
            for &i in &infected {
                digits[i] = 1;
            }
            let x0 = space.encode(&digits)?;
            let mu = chain::propagate(&DistVector::point_mass(s.size(), x0), &s, 1)?.into_inner();
            let exact = chain::marginals(&mu, &m)?;
            let report = montecarlo::mc_ensemble(&m, &g, &init, 1, reps, 13 + k as u64, &[1])?;
            let sampled = &report.marginals[0];
            let mut compare = |p: f64, q: f64| {
                let sigma = (p * (1.0 - p) / reps as f64).sqrt();
                let z = if sigma > 0.0 { (q - p).abs() / sigma } else if p == q { 0.0 } else { f64::INFINITY };
                worst_z = worst_z.max(z);
                comparisons += 1;
            };
            for i in 0..n {
                compare(exact.p_i[i], sampled.p_i[i]);
                if m.states_per_node() == 3 {
                    compare(exact.p_r_or_zero(i), sampled.p_r[i]);
                }
            }
        }
    }
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(300));
    Ok(Outcome::new(
        worst_z <= 4.0 && fast,
        format!("{comparisons} marginals, worst |z| {worst_z:.2} over {reps} replicates; {time}"),
    ))
}

fn jacobian_integrity() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let v = suite(Suite::Jacobian, Some(100), None)?;
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(60));
    let errors: Vec<String> =
        Variant::ALL.iter().map(|variant| format!("{variant} {:.1e}", metric(&v, &format!("max_{variant}_error")))).collect();
    Ok(Outcome::new(v.passed && fast, format!("{}, max error [{}]; {time}", describe(&v), errors.join(", "))))
}

fn fixed_point_relations() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let v = suite(Suite::Relations, None, None)?;
    let (fast, time) = within_budget(start.elapsed(), Duration::from_secs(60));
    Ok(Outcome::new(
        v.passed && fast,
        format!(
            "{}, max defect sirs {:.1e} siv-id {:.1e}; {time}",
            describe(&v),
            metric(&v, "max_sirs_relation_defect"),
            metric(&v, "max_siv-id_relation_defect")
        ),
    ))
}

fn random_graph_stability() -> epinet::Result<Outcome> {
    let start = Instant::now();
    let v = suite(Suite::Stability, None, None)?;
    let rates: Vec<String> = verify::STABILITY_SIZES
        .iter()
        .map(|n| format!("n={n} {:.3}", metric(&v, &format!("stable_rate_n{n}"))))
        .collect();
    Ok(Outcome::new(
        v.passed,
        format!("{}, stable rate [{}]; {:.1}s", describe(&v), rates.join(", "), start.elapsed().as_secs_f64()),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 12] = [
        ("criterion 1 (star fixed point, Jacobian, cycle)", star_fixed_point),
        ("criterion 2 (threshold dichotomy)", threshold_dichotomy),
        ("criterion 3 (mixing-time bound, extinction scaling)", mixing_bound),
        ("criterion 4 (ordering machinery)", ordering),
        ("criterion 5 (marginal LP bound)", lp_bound),
        ("criterion 6 (non-absorption bound)", non_absorption),
        ("criterion 7 (n = 2000 threshold flips)", threshold_flips),
        ("criterion 8 (SIV stationarity)", siv_stationarity),
        ("criterion 9 (exact vs Monte Carlo marginals)", oracle_equivalence),
        ("criterion 10 (Jacobian integrity)", jacobian_integrity),
        ("criterion 11 (fixed-point relations)", fixed_point_relations),
        ("random-graph stability of the sis-ia endemic point", random_graph_stability),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = run().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        if !outcome.passed {
            failed += 1;
        }
        println!("{} {name}: {}", if outcome.passed { "PASS" } else { "FAIL" }, outcome.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
