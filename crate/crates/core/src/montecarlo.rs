//! Synchronous agent-based simulation of the exact chains.
//!
//! Randomness is addressed rather than sequential: replicate `r` owns
//! ChaCha stream `r` under a key derived from the master seed, and node `i`
//! at step `t` consumes 64-bit word `t·n + i` of that stream. A replicate's
//! trajectory therefore depends only on `(inputs, master seed, r)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EpiError, Result};
use crate::graph::Graph;
use crate::model::{ModelSpec, Variant, INFECTED, RECOVERED, SUSCEPTIBLE};

const INIT_KEY: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum InitialCondition {
    AllInfected,
    /// Each node independently infected with this probability.
    Fraction(f64),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimState {
    pub states: Vec<u8>,
    pub t: usize,
    pub seed: u64,
    pub replicate: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub t: usize,
    pub s: usize,
    pub i: usize,
    pub r: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub rows: Vec<CountRow>,
    /// First step with no infected node.
    pub extinction_step: Option<usize>,
    /// Step at which the run stopped in an absorbing state.
    pub absorbed_at: Option<usize>,
    /// Node states at the requested snapshot times.
    pub snapshots: Vec<(usize, Vec<u8>)>,
}

impl TrajectoryRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,s,i,r\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", row.t, row.s, row.i, row.r));
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<CountRow>> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "t,s,i,r" => {}
            _ => return Err(EpiError::Parse { line: 1, msg: "expected header `t,s,i,r`".into() }),
        }
        lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(ln, l)| {
                let f: Vec<usize> = l
                    .split(',')
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| EpiError::Parse { line: ln + 1, msg: e.to_string() })?;
                match f[..] {
                    [t, s, i, r] => Ok(CountRow { t, s, i, r }),
                    _ => Err(EpiError::Parse { line: ln + 1, msg: "expected four fields".into() }),
                }
            })
            .collect()
    }
}

fn replicate_stream(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// The uniform drawn by `node` at step `t` (the transition into `t + 1`).
pub fn node_uniform(seed: u64, replicate: u64, t: usize, node: usize, n: usize) -> f64 {
    let mut rng = replicate_stream(seed, replicate);
    rng.set_word_pos(2 * (t as u128 * n as u128 + node as u128));
    rng.gen::<f64>()
}

pub fn initial_state(graph: &Graph, init: &InitialCondition, seed: u64, replicate: u64) -> Result<SimState> {
    let n = graph.n();
    let mut states = vec![SUSCEPTIBLE; n];
    match init {
        InitialCondition::AllInfected => states.iter_mut().for_each(|s| *s = INFECTED),
        InitialCondition::Fraction(f) => {
            if !(0.0..=1.0).contains(f) {
                return Err(EpiError::InvalidParam(format!("initial fraction {f} outside [0, 1]")));
            }
            let mut rng = replicate_stream(seed ^ INIT_KEY, replicate);
            for s in states.iter_mut() {
                if rng.gen::<f64>() < *f {
                    *s = INFECTED;
                }
            }
        }
        InitialCondition::Explicit(nodes) => {
            for &i in nodes {
                if i >= n {
                    return Err(EpiError::InvalidParam(format!("initial node {i} out of range")));
                }
                states[i] = INFECTED;
            }
        }
    }
    Ok(SimState { states, t: 0, seed, replicate })
}

/// Per-run simulator state: the stream, neighbor infection counts and the
/// `(1−β)^m` table for unweighted graphs.
struct Stepper<'a> {
    model: &'a ModelSpec,
    graph: &'a Graph,
    rng: ChaCha8Rng,
    infected_neighbors: Vec<u32>,
    escape_table: Option<Vec<f64>>,
    two_state: bool,
    next: Vec<u8>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a ModelSpec, graph: &'a Graph, state: &SimState) -> Self {
        let n = graph.n();
        let mut infected_neighbors = vec![0u32; n];
        for (i, &s) in state.states.iter().enumerate() {
            if s == INFECTED {
                for &(j, _) in graph.neighbors(i) {
                    infected_neighbors[j] += 1;
                }
            }
        }
        let escape_table = (model.contact().is_none() && !graph.is_weighted()).then(|| {
            let max_deg = (0..n).map(|i| graph.degree(i)).max().unwrap_or(0);
            (0..=max_deg).map(|m| (1.0 - model.beta()).powi(m as i32)).collect()
        });
        Stepper {
            model,
            graph,
            rng: replicate_stream(state.seed, state.replicate),
            infected_neighbors,
            escape_table,
            two_state: model.variant().is_sis(),
            next: vec![0; n],
        }
    }

    fn escape(&self, states: &[u8], i: usize) -> f64 {
        if let Some(m) = self.model.contact() {
            return (0..states.len()).filter(|&j| states[j] == INFECTED).map(|j| 1.0 - m[(i, j)]).product();
        }
        let m = self.infected_neighbors[i] as usize;
        if m == 0 {
            return 1.0;
        }
        match &self.escape_table {
            Some(table) => table[m],
            None => self
                .graph
                .neighbors(i)
                .iter()
                .filter(|&&(j, _)| states[j] == INFECTED)
                .map(|&(_, w)| 1.0 - self.model.beta() * w)
                .product(),
        }
    }

    fn step(&mut self, state: &mut SimState) {
        let n = state.states.len();
        self.rng.set_word_pos(2 * (state.t as u128 * n as u128));
        for i in 0..n {
            let u: f64 = self.rng.gen();
            let cur = state.states[i];
            let table = self.model.local_transition(cur, self.escape(&state.states, i));
            self.next[i] = if u < table[0] {
                SUSCEPTIBLE
            } else if self.two_state || u < table[0] + table[1] {
                INFECTED
            } else {
                RECOVERED
            };
        }
        for i in 0..n {
            let (old, new) = (state.states[i], self.next[i]);
            if (old == INFECTED) != (new == INFECTED) {
                for &(j, _) in self.graph.neighbors(i) {
                    if new == INFECTED {
                        self.infected_neighbors[j] += 1;
                    } else {
                        self.infected_neighbors[j] -= 1;
                    }
                }
            }
        }
        std::mem::swap(&mut state.states, &mut self.next);
        state.t += 1;
    }
}

/// One synchronous step; every node is conditioned on the pre-step state.
pub fn mc_step(model: &ModelSpec, graph: &Graph, state: &SimState) -> SimState {
    let mut next = state.clone();
    Stepper::new(model, graph, state).step(&mut next);
    next
}

fn counts(states: &[u8], t: usize) -> CountRow {
    let mut c = [0usize; 3];
    for &s in states {
        c[s as usize] += 1;
    }
    CountRow { t, s: c[0], i: c[1], r: c[2] }
}

/// SIS and SIRS cannot leave the all-susceptible state; SIV keeps moving
/// between S and R, so it never stops early.
fn is_absorbed(variant: Variant, row: &CountRow) -> bool {
    row.i == 0 && (variant.is_sis() || (variant == Variant::Sirs && row.r == 0))
}

pub fn mc_run(
    model: &ModelSpec,
    graph: &Graph,
    init: &InitialCondition,
    t_max: usize,
    seed: u64,
    replicate: u64,
) -> Result<TrajectoryRecord> {
    mc_run_with_snapshots(model, graph, init, t_max, seed, replicate, &[])
}

pub fn mc_run_with_snapshots(
    model: &ModelSpec,
    graph: &Graph,
    init: &InitialCondition,
    t_max: usize,
    seed: u64,
    replicate: u64,
    snapshot_times: &[usize],
) -> Result<TrajectoryRecord> {
    if t_max < 1 {
        return Err(EpiError::InvalidParam("t_max must be at least 1".into()));
    }
    model.check_graph(graph)?;
    let mut state = initial_state(graph, init, seed, replicate)?;
    let mut stepper = Stepper::new(model, graph, &state);
    let mut rows = vec![counts(&state.states, 0)];
    let mut snapshots = Vec::new();
    let mut extinction_step = (rows[0].i == 0).then_some(0);
    let mut absorbed_at = is_absorbed(model.variant(), &rows[0]).then_some(0);
    let take_snapshot = |state: &SimState, snapshots: &mut Vec<(usize, Vec<u8>)>| {
        if snapshot_times.contains(&state.t) {
            snapshots.push((state.t, state.states.clone()));
        }
    };
    take_snapshot(&state, &mut snapshots);
    while state.t < t_max && absorbed_at.is_none() {
        stepper.step(&mut state);
        let row = counts(&state.states, state.t);
        if row.i == 0 && extinction_step.is_none() {
            extinction_step = Some(state.t);
        }
        if is_absorbed(model.variant(), &row) {
            absorbed_at = Some(state.t);
        }
        rows.push(row);
        take_snapshot(&state, &mut snapshots);
    }
    // an absorbed state is frozen, so later snapshots equal the last one
    for &t in snapshot_times {
        if t > state.t && t <= t_max {
            snapshots.push((t, state.states.clone()));
        }
    }
    Ok(TrajectoryRecord { rows, extinction_step, absorbed_at, snapshots })
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeMarginals {
    pub t: usize,
    pub p_i: Vec<f64>,
    pub p_r: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleReport {
    pub n_reps: usize,
    pub t: Vec<usize>,
    pub mean_s: Vec<f64>,
    pub mean_i: Vec<f64>,
    pub mean_r: Vec<f64>,
    pub i_q05: Vec<f64>,
    pub i_q50: Vec<f64>,
    pub i_q95: Vec<f64>,
    pub marginals: Vec<NodeMarginals>,
    pub extinction_steps: Vec<Option<usize>>,
}

impl EnsembleReport {
    pub fn extinct_fraction(&self) -> f64 {
        self.extinction_steps.iter().filter(|e| e.is_some()).count() as f64 / self.n_reps as f64
    }

    /// Replicates still infected at the final step.
    pub fn persistent_fraction(&self) -> f64 {
        1.0 - self.extinct_fraction()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ENSEMBLE_HEADER}\n");
        for k in 0..self.t.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.t[k], self.mean_s[k], self.mean_i[k], self.mean_r[k], self.i_q05[k], self.i_q50[k], self.i_q95[k]
            ));
        }
        out
    }
}

/// One row of the ensemble CSV: mean counts and infected-count quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub t: usize,
    pub s: f64,
    pub i: f64,
    pub r: f64,
    pub i_q05: f64,
    pub i_q50: f64,
    pub i_q95: f64,
}

const ENSEMBLE_HEADER: &str = "t,s,i,r,i_q05,i_q50,i_q95";

pub fn ensemble_rows_from_csv(text: &str) -> Result<Vec<EnsembleRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ENSEMBLE_HEADER => {}
        _ => return Err(EpiError::Parse { line: 1, msg: format!("expected header `{ENSEMBLE_HEADER}`") }),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(ln, l)| {
            let bad = |msg: String| EpiError::Parse { line: ln + 1, msg };
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            let [t, rest @ ..] = &fields[..] else { unreachable!("split yields at least one field") };
            let t = t.parse::<usize>().map_err(|e| bad(e.to_string()))?;
            let v: Vec<f64> = rest.iter().map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(e.to_string()))?;
            match v[..] {
                [s, i, r, i_q05, i_q50, i_q95] => Ok(EnsembleRow { t, s, i, r, i_q05, i_q50, i_q95 }),
                _ => Err(bad("expected seven fields".into())),
            }
        })
        .collect()
}

fn quantile(sorted: &[usize], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// Runs replicates `0..n_reps` in parallel. Finished runs are padded with
/// their absorbing row, and every statistic is a function of the
/// replicate-indexed results only.
pub fn mc_ensemble(
    model: &ModelSpec,
    graph: &Graph,
    init: &InitialCondition,
    t_max: usize,
    n_reps: usize,
    master_seed: u64,
    marginal_times: &[usize],
) -> Result<EnsembleReport> {
    if n_reps < 1 {
        return Err(EpiError::InvalidParam("at least one replicate is required".into()));
    }
    let runs: Vec<TrajectoryRecord> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| mc_run_with_snapshots(model, graph, init, t_max, master_seed, r, marginal_times))
        .collect::<Result<_>>()?;
    let len = t_max + 1;
    let n = graph.n();
    let mut mean = [vec![0.0; len], vec![0.0; len], vec![0.0; len]];
    let (mut q05, mut q50, mut q95) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut column = vec![0usize; n_reps];
    for t in 0..len {
        for (r, run) in runs.iter().enumerate() {
            let row = run.rows.get(t).unwrap_or_else(|| run.rows.last().expect("nonempty"));
            mean[0][t] += row.s as f64;
            mean[1][t] += row.i as f64;
            mean[2][t] += row.r as f64;
            column[r] = row.i;
        }
        column.sort_unstable();
        q05[t] = quantile(&column, 0.05);
        q50[t] = quantile(&column, 0.5);
        q95[t] = quantile(&column, 0.95);
    }
    for m in mean.iter_mut() {
        m.iter_mut().for_each(|v| *v /= n_reps as f64);
    }
    let mut marginals = Vec::new();
    for &t in marginal_times {
        if t > t_max {
            continue;
        }
        let mut p_i = vec![0.0; n];
        let mut p_r = vec![0.0; n];
        for run in &runs {
            let (_, states) = run.snapshots.iter().find(|(st, _)| *st == t).expect("snapshot recorded");
            for (k, &s) in states.iter().enumerate() {
                match s {
                    INFECTED => p_i[k] += 1.0,
                    RECOVERED => p_r[k] += 1.0,
                    _ => {}
                }
            }
        }
        p_i.iter_mut().chain(p_r.iter_mut()).for_each(|v| *v /= n_reps as f64);
        marginals.push(NodeMarginals { t, p_i, p_r });
    }
    let [mean_s, mean_i, mean_r] = mean;
    Ok(EnsembleReport {
        n_reps,
        t: (0..len).collect(),
        mean_s,
        mean_i,
        mean_r,
        i_q05: q05,
        i_q50: q50,
        i_q95: q95,
        marginals,
        extinction_steps: runs.iter().map(|r| r.extinction_step).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "step")]
pub enum Extinction {
    Step(usize),
    Censored(usize),
}

pub fn extinction_time(
    model: &ModelSpec,
    graph: &Graph,
    init: &InitialCondition,
    seed: u64,
    replicate: u64,
    cap: usize,
) -> Result<Extinction> {
    model.check_graph(graph)?;
    let mut state = initial_state(graph, init, seed, replicate)?;
    if state.states.iter().all(|&s| s != INFECTED) {
        return Ok(Extinction::Step(0));
    }
    let mut stepper = Stepper::new(model, graph, &state);
    while state.t < cap {
        stepper.step(&mut state);
        if state.states.iter().all(|&s| s != INFECTED) {
            return Ok(Extinction::Step(state.t));
        }
    }
    Ok(Extinction::Censored(cap))
}
