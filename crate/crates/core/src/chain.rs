//! Exact network Markov chain over all `k^n` joint states.
//!
//! Joint states are integers whose base-`k` digit `i` is the state of node
//! `i` (0 = S, 1 = I, 2 = R). Transition matrices are dense and row-major;
//! the state-space caps keep them within a few hundred megabytes.

use std::ops::Deref;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EpiError, Result};
use crate::graph::Graph;
use crate::meanfield::{self, MeanFieldPoint};
use crate::model::{ModelSpec, Variant, INFECTED, RECOVERED};

/// 2^13 states: a 512 MiB dense matrix.
pub const DEFAULT_CAP_TWO_STATE: usize = 1 << 13;
/// 3^8 states: a 328 MiB dense matrix.
pub const DEFAULT_CAP_THREE_STATE: usize = 6561;
pub const DEFAULT_MIXING_CAP: usize = 10_000;
/// Mixing against a non-degenerate stationary law propagates every row.
pub const FULL_ROW_MIXING_CAP: usize = 729;
pub const ORDER_CAP_NODES: usize = 12;
pub const LP_CAP_TWO_STATE: usize = 4;
pub const LP_CAP_THREE_STATE: usize = 3;

const NEG_CLAMP: f64 = 1e-15;
const SUM_TOL: f64 = 1e-12;
const DRIFT_TOL: f64 = 1e-10;
const STATIONARY_TOL: f64 = 1e-10;

pub fn default_cap(k: usize) -> usize {
    if k == 2 {
        DEFAULT_CAP_TWO_STATE
    } else {
        DEFAULT_CAP_THREE_STATE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChainState(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    n: usize,
    k: usize,
    pow: Vec<usize>,
}

impl StateSpace {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k != 2 && k != 3 {
            return Err(EpiError::InvalidParam(format!("{k} states per node")));
        }
        let mut pow = Vec::with_capacity(n + 1);
        pow.push(1usize);
        for _ in 0..n {
            let next = pow.last().unwrap().checked_mul(k).ok_or(EpiError::StateSpaceCap {
                states: usize::MAX,
                cap: usize::MAX,
            })?;
            pow.push(next);
        }
        Ok(StateSpace { n, k, pow })
    }

    pub fn for_model(model: &ModelSpec, n: usize) -> Result<Self> {
        Self::new(n, model.states_per_node())
    }

    /// Infers `n` from a vector length.
    pub fn from_len(len: usize, k: usize) -> Result<Self> {
        let mut n = 0;
        let mut size = 1usize;
        while size < len {
            size = size.saturating_mul(k);
            n += 1;
        }
        if size != len {
            return Err(EpiError::InvalidParam(format!("length {len} is not a power of {k}")));
        }
        Self::new(n, k)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn size(&self) -> usize {
        self.pow[self.n]
    }

    pub fn digit(&self, x: ChainState, i: usize) -> u8 {
        ((x.0 / self.pow[i]) % self.k) as u8
    }

    pub fn decode(&self, x: ChainState) -> Vec<u8> {
        (0..self.n).map(|i| self.digit(x, i)).collect()
    }

    pub fn encode(&self, digits: &[u8]) -> Result<ChainState> {
        if digits.len() != self.n {
            return Err(EpiError::Dimension { expected: self.n, got: digits.len() });
        }
        let mut code = 0;
        for (i, &d) in digits.iter().enumerate() {
            if d as usize >= self.k {
                return Err(EpiError::InvalidParam(format!("digit {d} at node {i} for k = {}", self.k)));
            }
            code += d as usize * self.pow[i];
        }
        Ok(ChainState(code))
    }

    pub fn all_healthy(&self) -> ChainState {
        ChainState(0)
    }

    pub fn all_infected(&self) -> ChainState {
        ChainState((self.size() - 1) / (self.k - 1))
    }

    /// Infected nodes `S(X)`.
    pub fn support(&self, x: ChainState) -> Vec<usize> {
        (0..self.n).filter(|&i| self.digit(x, i) == INFECTED).collect()
    }

    /// Digit flip; two-state spaces only.
    pub fn complement(&self, x: ChainState) -> ChainState {
        debug_assert_eq!(self.k, 2);
        ChainState(x.0 ^ (self.size() - 1))
    }

    pub fn states(&self) -> impl Iterator<Item = ChainState> {
        (0..self.size()).map(ChainState)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistVector(Vec<f64>);

impl DistVector {
    /// Clamps entries in `[-1e-15, 0)` to zero; anything more negative, or a
    /// total off by more than `1e-12`, is rejected.
    pub fn new(mut entries: Vec<f64>) -> Result<Self> {
        for (x, v) in entries.iter_mut().enumerate() {
            if !(*v >= -NEG_CLAMP) {
                return Err(EpiError::InvalidParam(format!("entry {x} = {v} is negative")));
            }
            *v = v.max(0.0);
        }
        let total: f64 = entries.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(EpiError::InvalidParam(format!("entries sum to {total}")));
        }
        Ok(DistVector(entries))
    }

    pub fn point_mass(size: usize, x: ChainState) -> Self {
        let mut v = vec![0.0; size];
        v[x.0] = 1.0;
        DistVector(v)
    }

    pub fn uniform(size: usize) -> Self {
        DistVector(vec![1.0 / size as f64; size])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Clamps and rescales, returning the pre-normalization drift.
    fn renormalized(mut v: Vec<f64>) -> (Self, f64) {
        v.iter_mut().for_each(|x| *x = x.max(0.0));
        let total: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= total);
        (DistVector(v), (total - 1.0).abs())
    }
}

impl Deref for DistVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub type MarginalVector = MeanFieldPoint;

#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    space: StateSpace,
    variant: Option<Variant>,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(space: StateSpace, data: Vec<f64>) -> Result<Self> {
        let size = space.size();
        if data.len() != size * size {
            return Err(EpiError::Dimension { expected: size * size, got: data.len() });
        }
        let s = TransitionMatrix { space, variant: None, data };
        s.check_stochastic()?;
        Ok(s)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn variant(&self) -> Option<Variant> {
        self.variant
    }

    pub fn size(&self) -> usize {
        self.space.size()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.size() + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let n = self.size();
        &self.data[x * n..(x + 1) * n]
    }

    /// `μ S`.
    pub fn left_mul(&self, mu: &[f64]) -> Vec<f64> {
        let n = self.size();
        let mut out = vec![0.0; n];
        for (x, &m) in mu.iter().enumerate() {
            if m != 0.0 {
                for (o, s) in out.iter_mut().zip(self.row(x)) {
                    *o += m * s;
                }
            }
        }
        out
    }

    /// `S v`.
    pub fn right_mul(&self, v: &[f64]) -> Vec<f64> {
        (0..self.size())
            .into_par_iter()
            .map(|x| self.row(x).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.size(), self.size(), &self.data)
    }

    pub fn check_stochastic(&self) -> Result<()> {
        for x in 0..self.size() {
            let row = self.row(x);
            if let Some(y) = row.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(EpiError::Verification(format!("S[{x}][{y}] = {} is not a probability", row[y])));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > SUM_TOL {
                return Err(EpiError::Verification(format!("row {x} sums to {total}")));
            }
        }
        Ok(())
    }

    /// Row-major CSV: a `k,n` header with its values, then one matrix row
    /// per line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("k,n\n{},{}\n", self.space.k, self.space.n);
        for x in 0..self.size() {
            out.push_str(&self.row(x).iter().map(|v| format!("{v:e}")).join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: &str| EpiError::Parse { line: line + 1, msg: msg.into() };
        match lines.next() {
            Some((_, "k,n")) => {}
            _ => return Err(bad(0, "expected header `k,n`")),
        }
        let (ln, dims) = lines.next().ok_or_else(|| bad(1, "missing dimensions"))?;
        let (k, n) = dims
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect_tuple()
            .and_then(|(a, b)| Some((a.ok()?, b.ok()?)))
            .ok_or_else(|| bad(ln, "dimensions must be `k,n`"))?;
        let space = StateSpace::new(n, k)?;
        let mut data = Vec::with_capacity(space.size() * space.size());
        for (ln, line) in lines {
            for tok in line.split(',') {
                data.push(tok.trim().parse::<f64>().map_err(|e| bad(ln, &e.to_string()))?);
            }
        }
        Self::from_rows(space, data)
    }
}

pub fn node_transition_prob(model: &ModelSpec, graph: &Graph, x: ChainState, i: usize, y: u8) -> Result<f64> {
    let space = StateSpace::for_model(model, graph.n())?;
    if i >= graph.n() {
        return Err(EpiError::InvalidParam(format!("node {i} out of range")));
    }
    if y as usize >= space.k() {
        return Err(EpiError::InvalidParam(format!("state {y} does not exist for {}", model.variant())));
    }
    if x.0 >= space.size() {
        return Err(EpiError::InvalidParam(format!("state code {} out of range", x.0)));
    }
    let q = model.escape_probability(graph, i, |j| space.digit(x, j) == INFECTED);
    Ok(model.local_transition(space.digit(x, i), q)[y as usize])
}

pub fn build_transition_matrix(model: &ModelSpec, graph: &Graph) -> Result<TransitionMatrix> {
    build_transition_matrix_capped(model, graph, default_cap(model.states_per_node()))
}

/// `S_{X,Y} = Π_i P(Y_i | X)`, each row assembled as a Kronecker product of
/// the per-node tables.
pub fn build_transition_matrix_capped(model: &ModelSpec, graph: &Graph, cap: usize) -> Result<TransitionMatrix> {
    model.check_graph(graph)?;
    let space = StateSpace::for_model(model, graph.n())?;
    let size = space.size();
    if size > cap {
        return Err(EpiError::StateSpaceCap { states: size, cap });
    }
    let k = space.k();
    let mut data = vec![0.0; size * size];
    data.par_chunks_mut(size).enumerate().for_each(|(x, row)| {
        let x = ChainState(x);
        let digits = space.decode(x);
        let tables: Vec<[f64; 3]> = (0..space.n())
            .map(|i| {
                let q = model.escape_probability(graph, i, |j| digits[j] == INFECTED);
                model.local_transition(digits[i], q)
            })
            .collect();
        // most significant node first so that node 0 ends up as the last factor
        row[0] = 1.0;
        let mut len = 1;
        for table in tables.iter().rev() {
            for a in (0..len).rev() {
                let base = row[a];
                for (b, t) in table[..k].iter().enumerate() {
                    row[a * k + b] = base * t;
                }
            }
            len *= k;
        }
    });
    let s = TransitionMatrix { space, variant: Some(model.variant()), data };
    s.check_stochastic()?;
    Ok(s)
}

/// `μ S^t`, renormalized each step; drift beyond `1e-10` is logged.
pub fn propagate(mu: &DistVector, s: &TransitionMatrix, t: usize) -> Result<DistVector> {
    if mu.len() != s.size() {
        return Err(EpiError::Dimension { expected: s.size(), got: mu.len() });
    }
    let mut cur = mu.clone();
    for step in 0..t {
        let (next, drift) = DistVector::renormalized(s.left_mul(&cur));
        if drift > DRIFT_TOL {
            log::warn!("propagation step {step}: probability mass drifted by {drift:e}");
        }
        cur = next;
    }
    Ok(cur)
}

pub fn marginals(mu: &[f64], model: &ModelSpec) -> Result<MarginalVector> {
    let space = StateSpace::from_len(mu.len(), model.states_per_node())?;
    let n = space.n();
    let mut p_i = vec![0.0; n];
    let mut p_r = vec![0.0; n];
    for (x, &m) in mu.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for i in 0..n {
            match space.digit(ChainState(x), i) {
                INFECTED => p_i[i] += m,
                RECOVERED => p_r[i] += m,
                _ => {}
            }
        }
    }
    Ok(MeanFieldPoint::new(p_i, (space.k() == 3).then_some(p_r)))
}

/// Closed-form stationary law: the all-healthy point mass, or the SIV
/// product form over the decoupled S/R chain.
pub fn stationary_candidate(model: &ModelSpec, n: usize) -> Result<DistVector> {
    let space = StateSpace::for_model(model, n)?;
    if !model.variant().is_siv() {
        return Ok(DistVector::point_mass(space.size(), space.all_healthy()));
    }
    let ps = model.siv_susceptible_share();
    let per_digit = [ps, 0.0, 1.0 - ps];
    let v = space
        .states()
        .map(|x| (0..n).map(|i| per_digit[space.digit(x, i) as usize]).product())
        .collect();
    Ok(DistVector(v))
}

/// Stationary law together with `‖πS − π‖∞`; fails if that exceeds `1e-10`.
pub fn stationary_with(model: &ModelSpec, s: &TransitionMatrix) -> Result<(DistVector, f64)> {
    let pi = stationary_candidate(model, s.space().n())?;
    let image = s.left_mul(&pi);
    let defect = image.iter().zip(pi.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if defect > STATIONARY_TOL {
        return Err(EpiError::Verification(format!("πS differs from π by {defect:e}")));
    }
    Ok((pi, defect))
}

pub fn stationary(model: &ModelSpec, graph: &Graph) -> Result<DistVector> {
    let s = build_transition_matrix(model, graph)?;
    Ok(stationary_with(model, &s)?.0)
}

pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Serialize)]
pub struct MixingReport {
    pub t_mix: usize,
    /// False when the step cap was hit first; `t_mix` is then the cap.
    pub reached: bool,
    pub epsilon: f64,
    /// Worst-case distance at `t_mix`.
    pub distance: f64,
    pub bound: Option<f64>,
    pub worst_initial: ChainState,
}

pub fn mixing_time_exact(s: &TransitionMatrix, pi: &DistVector, epsilon: f64) -> Result<MixingReport> {
    mixing_time_exact_capped(s, pi, epsilon, DEFAULT_MIXING_CAP)
}

/// Smallest `t` with `max_X ‖e_X S^t − π‖_TV ≤ ε`. Point masses suffice
/// because `μ ↦ ‖μS^t − π‖_TV` is convex and the simplex is their hull.
pub fn mixing_time_exact_capped(
    s: &TransitionMatrix,
    pi: &DistVector,
    epsilon: f64,
    t_cap: usize,
) -> Result<MixingReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(EpiError::InvalidParam(format!("epsilon {epsilon} outside (0, 1)")));
    }
    let size = s.size();
    if pi.len() != size {
        return Err(EpiError::Dimension { expected: size, got: pi.len() });
    }
    let space = s.space();
    let top = space.all_infected();
    let order_preserving = matches!(s.variant(), Some(Variant::SisNia | Variant::SisGeneral));
    // ties go to the all-infected state so the order check is exact
    let pick_worst = |dist: &[f64]| -> (ChainState, f64) {
        let max = dist.iter().copied().fold(0.0, f64::max);
        if dist[top.0] >= max - 1e-12 {
            (top, max)
        } else {
            let x = dist.iter().position(|&d| d == max).unwrap_or(0);
            (ChainState(x), max)
        }
    };
    let check_order = |t: usize, worst: ChainState| -> Result<()> {
        if order_preserving && worst != top {
            return Err(EpiError::Verification(format!(
                "worst initial state at t = {t} is {} rather than all-infected",
                worst.0
            )));
        }
        Ok(())
    };
    let absorbing = pi.iter().position(|&p| p == 1.0);
    if let Some(z) = absorbing {
        // column z of S^t gives every distance: ‖e_X S^t − e_z‖ = 1 − (S^t)_{X,z}
        let mut col = vec![0.0; size];
        col[z] = 1.0;
        for t in 0..=t_cap {
            let dist: Vec<f64> = col.iter().map(|v: &f64| (1.0 - v).max(0.0)).collect();
            let (worst, d) = pick_worst(&dist);
            check_order(t, worst)?;
            if d <= epsilon || t == t_cap {
                return Ok(MixingReport { t_mix: t, reached: d <= epsilon, epsilon, distance: d, bound: None, worst_initial: worst });
            }
            col = s.right_mul(&col);
        }
        unreachable!()
    }
    if size > FULL_ROW_MIXING_CAP {
        return Err(EpiError::StateSpaceCap { states: size, cap: FULL_ROW_MIXING_CAP });
    }
    let sm = s.to_dmatrix();
    let mut power = DMatrix::<f64>::identity(size, size);
    for t in 0..=t_cap {
        let dist: Vec<f64> = (0..size)
            .map(|x| {
                let row: Vec<f64> = power.row(x).iter().copied().collect();
                tv_distance(&row, pi)
            })
            .collect();
        let (worst, d) = pick_worst(&dist);
        if d <= epsilon || t == t_cap {
            return Ok(MixingReport { t_mix: t, reached: d <= epsilon, epsilon, distance: d, bound: None, worst_initial: worst });
        }
        power = &power * &sm;
    }
    unreachable!()
}

/// Contraction norm behind the analytic mixing bound.
pub fn mixing_norm(model: &ModelSpec, graph: &Graph) -> Result<f64> {
    let m = if model.variant() == Variant::Sirs {
        meanfield::mf_linear_model(model, graph)?.matrix
    } else {
        meanfield::infection_bound_matrix(model, graph)?
    };
    meanfield::spectral_norm(&m)
}

/// `log(c·n/ε) / (−log ‖M‖)`, with `c = 2` for SIRS (whose bound runs over
/// both the recovered and infected coordinates) and `c = 1` otherwise.
/// `+∞` when the norm is at least 1.
pub fn mixing_time_bound(model: &ModelSpec, graph: &Graph, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(EpiError::InvalidParam(format!("epsilon {epsilon} outside (0, 1)")));
    }
    let norm = mixing_norm(model, graph)?;
    Ok(bound_from_norm(model, graph.n(), epsilon, norm))
}

pub fn bound_from_norm(model: &ModelSpec, n: usize, epsilon: f64, norm: f64) -> f64 {
    if norm >= 1.0 {
        return f64::INFINITY;
    }
    let coords = if model.variant() == Variant::Sirs { 2 * n } else { n };
    (coords as f64 / epsilon).ln() / -norm.ln()
}

/// Exact mixing time with the analytic bound filled in.
pub fn mixing_analysis(model: &ModelSpec, graph: &Graph, epsilon: f64) -> Result<MixingReport> {
    let s = build_transition_matrix(model, graph)?;
    let (pi, _) = stationary_with(model, &s)?;
    let mut report = mixing_time_exact(&s, &pi, epsilon)?;
    report.bound = Some(mixing_time_bound(model, graph, epsilon)?);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    pub size: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    pub fn get(&self, x: usize, y: usize) -> i64 {
        self.data[x * self.size + y]
    }

    pub fn mul(&self, other: &IntMatrix) -> IntMatrix {
        let n = self.size;
        let mut data = vec![0; n * n];
        for x in 0..n {
            for z in 0..n {
                let a = self.get(x, z);
                if a != 0 {
                    for y in 0..n {
                        data[x * n + y] += a * other.get(z, y);
                    }
                }
            }
        }
        IntMatrix { size: n, data }
    }

    pub fn is_identity(&self) -> bool {
        (0..self.size).all(|x| (0..self.size).all(|y| self.get(x, y) == i64::from(x == y)))
    }
}

/// `R_{X,Y} = 1` iff `X ⪯ Y`, and its inverse
/// `R⁻¹_{X,Y} = (−1)^{|S(Y) \ S(X)|}` on `X ⪯ Y`.
pub fn build_r_pair(n: usize) -> Result<(IntMatrix, IntMatrix)> {
    if n > ORDER_CAP_NODES {
        return Err(EpiError::StateSpaceCap { states: 1 << n.min(62), cap: 1 << ORDER_CAP_NODES });
    }
    let size = 1usize << n;
    let mut r = vec![0; size * size];
    let mut rinv = vec![0; size * size];
    for x in 0..size {
        for y in 0..size {
            if x & y == x {
                r[x * size + y] = 1;
                rinv[x * size + y] = if (y & !x).count_ones() % 2 == 0 { 1 } else { -1 };
            }
        }
    }
    Ok((IntMatrix { size, data: r }, IntMatrix { size, data: rinv }))
}

/// `v ↦ vR`: `(vR)_Y = Σ_{X ⪯ Y} v_X`.
pub fn apply_r(v: &mut [f64]) {
    let size = v.len();
    let mut bit = 1;
    while bit < size {
        for y in 0..size {
            if y & bit != 0 {
                v[y] += v[y ^ bit];
            }
        }
        bit <<= 1;
    }
}

/// `w ↦ R⁻¹w`: `(R⁻¹w)_X = Σ_{Y ⪰ X} (−1)^{|Y−X|} w_Y`.
fn apply_r_inverse_left(w: &mut [f64]) {
    let size = w.len();
    let mut bit = 1;
    while bit < size {
        for x in 0..size {
            if x & bit == 0 {
                w[x] -= w[x | bit];
            }
        }
        bit <<= 1;
    }
}

/// Dense `R⁻¹ S R`, computed with subset-sum transforms.
pub fn conjugate_by_r(s: &TransitionMatrix) -> DMatrix<f64> {
    let size = s.size();
    let mut t = DMatrix::zeros(size, size);
    for x in 0..size {
        let mut row = s.row(x).to_vec();
        apply_r(&mut row);
        for (z, v) in row.into_iter().enumerate() {
            t[(x, z)] = v;
        }
    }
    for z in 0..size {
        let mut col: Vec<f64> = t.column(z).iter().copied().collect();
        apply_r_inverse_left(&mut col);
        t.column_mut(z).copy_from_slice(&col);
    }
    t
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderReport {
    pub min_entry: f64,
    pub argmin: (usize, usize),
    /// `max |(R⁻¹SR)_{X,Z} − S*_{¬Z,¬X}|` where `S*` is the chain of the
    /// transposed contact matrix; absent for variants without that dual.
    pub identity_defect: Option<f64>,
    /// Minimum over sampled ordered pairs, coordinates and steps of
    /// `((μ − μ′) S^t R)_Y`.
    pub pair_min_slack: f64,
    pub pairs: usize,
}

fn dual_model(model: &ModelSpec, graph: &Graph) -> Result<Option<ModelSpec>> {
    match model.variant() {
        Variant::SisNia => {
            let m = ModelSpec::contact_from_graph(graph, model.beta(), model.delta())?;
            Ok(Some(ModelSpec::general(m)?))
        }
        Variant::SisGeneral => Ok(Some(ModelSpec::general(model.contact().expect("validated").transpose())?)),
        _ => Ok(None),
    }
}

/// Random `μ` and a `μ′` obtained by repeatedly moving mass from a state
/// `X` to some `Y ⪰ X`, so `μ ⪯_st μ′` by construction.
pub fn sample_ordered_pair<R: Rng>(size: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut mu: Vec<f64> = (0..size).map(|_| if rng.gen_bool(0.5) { rng.gen::<f64>() } else { 0.0 }).collect();
    if mu.iter().all(|&v| v == 0.0) {
        mu[rng.gen_range(0..size)] = 1.0;
    }
    let total: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|v| *v /= total);
    let mut nu = mu.clone();
    for _ in 0..rng.gen_range(1..=4) {
        let candidates: Vec<usize> = (0..size).filter(|&x| nu[x] > 0.0).collect();
        let x = candidates[rng.gen_range(0..candidates.len())];
        let y = x | (rng.gen_range(0..size));
        let amount = nu[x] * rng.gen::<f64>();
        nu[x] -= amount;
        nu[y] += amount;
    }
    (mu, nu)
}

/// `min_{t ≤ t_max, Y} ((μ − μ′) S^t R)_Y`.
pub fn order_slack(s: &TransitionMatrix, mu: &[f64], nu: &[f64], t_max: usize) -> f64 {
    let mut a = mu.to_vec();
    let mut b = nu.to_vec();
    let mut worst = f64::INFINITY;
    for t in 0..=t_max {
        let mut diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        apply_r(&mut diff);
        worst = diff.iter().copied().fold(worst, f64::min);
        if t < t_max {
            a = s.left_mul(&a);
            b = s.left_mul(&b);
        }
    }
    worst
}

pub fn check_order_preservation<R: Rng>(
    model: &ModelSpec,
    graph: &Graph,
    s: &TransitionMatrix,
    pairs: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<OrderReport> {
    if s.space().k() != 2 {
        return Err(EpiError::Unsupported {
            variant: model.variant().name(),
            reason: "stochastic order is defined on two-state chains".into(),
        });
    }
    let n = s.space().n();
    if n > ORDER_CAP_NODES {
        return Err(EpiError::StateSpaceCap { states: s.size(), cap: 1 << ORDER_CAP_NODES });
    }
    let t = conjugate_by_r(s);
    let (argmin, min_entry) = t
        .iter()
        .enumerate()
        .map(|(idx, &v)| ((idx % s.size(), idx / s.size()), v))
        .fold(((0, 0), f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
    let identity_defect = match dual_model(model, graph)? {
        Some(dual) => {
            let sd = build_transition_matrix(&dual, graph)?;
            let space = s.space();
            let mut defect: f64 = 0.0;
            for x in space.states() {
                for z in space.states() {
                    let lhs = t[(x.0, z.0)];
                    let rhs = sd.get(space.complement(z).0, space.complement(x).0);
                    defect = defect.max((lhs - rhs).abs());
                }
            }
            Some(defect)
        }
        None => None,
    };
    let mut pair_min_slack = f64::INFINITY;
    for _ in 0..pairs {
        let (mu, nu) = sample_ordered_pair(s.size(), rng);
        pair_min_slack = pair_min_slack.min(order_slack(s, &mu, &nu, t_max));
    }
    Ok(OrderReport { min_entry, argmin, identity_defect, pair_min_slack, pairs })
}

/// `u(r)_X = Π_{i ∈ S(X)} (1 − r_i)`.
pub fn u_vector(r: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = r.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(EpiError::InvalidParam(format!("r[{i}] = {} outside [0, 1]", r[i])));
    }
    let size = 1usize << r.len();
    let mut u = vec![1.0; size];
    for x in 1..size {
        let low = x.trailing_zeros() as usize;
        u[x] = u[x & (x - 1)] * (1.0 - r[low]);
    }
    Ok(u)
}

fn require_sis_map(model: &ModelSpec) -> Result<()> {
    match model.variant() {
        Variant::SisNia | Variant::SisGeneral => Ok(()),
        v => Err(EpiError::Unsupported {
            variant: v.name(),
            reason: "the bound couples the chain to the order-preserving SIS map".into(),
        }),
    }
}

/// Model whose map couples to absorption probabilities of `model`'s chain.
/// A contact matrix enters transposed: `(S u(r))_X` factors over the nodes
/// `j ∈ S(X)` through `Π_i (1 − m_ij r_i)`, the column of `M` that `j`
/// infects along. Symmetric models are their own dual.
pub fn absorption_dual(model: &ModelSpec) -> Result<ModelSpec> {
    require_sis_map(model)?;
    match model.contact() {
        Some(m) => ModelSpec::general(m.transpose()),
        None => Ok(model.clone()),
    }
}

/// `min_X [(S u(r))_X − u(Φ*(r))_X]` with `Φ*` the map of [`absorption_dual`].
pub fn check_u_bound(s: &TransitionMatrix, model: &ModelSpec, graph: &Graph, r: &[f64]) -> Result<f64> {
    let dual = absorption_dual(model)?;
    let lhs = s.right_mul(&u_vector(r)?);
    let phi = meanfield::mf_step(&dual, graph, &MeanFieldPoint::new(r.to_vec(), None))?;
    let rhs = u_vector(&phi.p_i.iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>())?;
    Ok(lhs.iter().zip(&rhs).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Serialize)]
pub struct LpReport {
    pub optimum: f64,
    pub closed_form: f64,
    /// An optimal distribution.
    pub argmax: Vec<f64>,
    pub vertices: usize,
}

/// The closed-form next-step infection bound for node `i`.
pub fn lp_closed_form(model: &ModelSpec, graph: &Graph, i: usize, p: &MarginalVector) -> f64 {
    match model.contact() {
        Some(m) => (0..graph.n()).map(|j| m[(i, j)] * p.p_i[j]).sum(),
        None => {
            let beta = if model.variant() == Variant::SivVd {
                (1.0 - model.theta()) * model.beta()
            } else {
                model.beta()
            };
            (1.0 - model.delta()) * p.p_i[i]
                + graph.neighbors(i).iter().map(|&(j, w)| beta * w * p.p_i[j]).sum::<f64>()
        }
    }
}

/// Maximum of `P(ξ_i(t+1) = I)` over all joint laws with marginals `p`, by
/// enumerating basic feasible solutions of `{μ ⪰ 0, μB = p}`. `Infeasible`
/// if no law has these marginals.
pub fn lp_marginal_max(model: &ModelSpec, graph: &Graph, i: usize, p: &MarginalVector) -> Result<LpReport> {
    model.check_graph(graph)?;
    let n = graph.n();
    // joint feasibility (p_i + p_r ≤ 1) is left to the enumeration itself
    let three_state = model.states_per_node() == 3;
    let coords: Vec<f64> = match (&p.p_r, three_state) {
        (Some(r), true) if r.len() == n && p.p_i.len() == n => p.p_i.iter().chain(r).copied().collect(),
        (None, false) if p.p_i.len() == n => p.p_i.clone(),
        _ => return Err(EpiError::Dimension { expected: n, got: p.p_i.len() }),
    };
    if let Some(v) = coords.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(EpiError::InvalidParam(format!("marginal {v} outside [0, 1]")));
    }
    let space = StateSpace::for_model(model, n)?;
    let cap = if space.k() == 2 { LP_CAP_TWO_STATE } else { LP_CAP_THREE_STATE };
    if n > cap {
        return Err(EpiError::StateSpaceCap { states: space.size(), cap: space.k().pow(cap as u32) });
    }
    if i >= n {
        return Err(EpiError::InvalidParam(format!("node {i} out of range")));
    }
    let size = space.size();
    let three = space.k() == 3;
    let rows = 1 + n * (space.k() - 1);
    let column = |x: usize| -> Vec<f64> {
        let mut c = Vec::with_capacity(rows);
        c.push(1.0);
        for j in 0..n {
            c.push(f64::from(space.digit(ChainState(x), j) == INFECTED));
        }
        if three {
            for j in 0..n {
                c.push(f64::from(space.digit(ChainState(x), j) == RECOVERED));
            }
        }
        c
    };
    let columns: Vec<Vec<f64>> = (0..size).map(column).collect();
    let mut rhs = vec![1.0];
    rhs.extend(&p.p_i);
    if three {
        rhs.extend(p.p_r.as_ref().expect("validated"));
    }
    let rhs = DVector::from_vec(rhs);
    let objective: Vec<f64> = (0..size)
        .map(|x| node_transition_prob(model, graph, ChainState(x), i, INFECTED))
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut vertices = 0;
    for basis in (0..size).combinations(rows) {
        let b = DMatrix::from_fn(rows, rows, |r, c| columns[basis[c]][r]);
        // 0/1 matrices are singular exactly when the determinant vanishes,
        // and otherwise have |det| ≥ 1
        let lu = b.lu();
        if lu.determinant().abs() < 0.5 {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        if sol.iter().any(|&v| v < -1e-12) {
            continue;
        }
        vertices += 1;
        let value: f64 = basis.iter().zip(sol.iter()).map(|(&x, &w)| objective[x] * w.max(0.0)).sum();
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            let mut mu = vec![0.0; size];
            for (&x, &w) in basis.iter().zip(sol.iter()) {
                mu[x] = w.max(0.0);
            }
            best = Some((value, mu));
        }
    }
    let (optimum, argmax) = best.ok_or(EpiError::Infeasible)?;
    Ok(LpReport { optimum, closed_form: lp_closed_form(model, graph, i, p), argmax, vertices })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NonAbsorption {
    pub exact: f64,
    pub bound: f64,
    pub slack: f64,
}

/// Exact `P(ξ(t) ≠ 0̄ | ξ(0) = X0)` against `1 − Π_{i∈S(X0)} (1 − Φ*^t_i(1_n))`
/// with `Φ*` the map of [`absorption_dual`].
pub fn non_absorption_check(model: &ModelSpec, graph: &Graph, x0: ChainState, t: usize) -> Result<NonAbsorption> {
    require_sis_map(model)?;
    let s = build_transition_matrix(model, graph)?;
    non_absorption_with(model, graph, &s, x0, t)
}

pub fn non_absorption_with(
    model: &ModelSpec,
    graph: &Graph,
    s: &TransitionMatrix,
    x0: ChainState,
    t: usize,
) -> Result<NonAbsorption> {
    require_sis_map(model)?;
    let space = s.space();
    if x0.0 >= space.size() {
        return Err(EpiError::InvalidParam(format!("state code {} out of range", x0.0)));
    }
    let mu = propagate(&DistVector::point_mass(space.size(), x0), s, t)?;
    let exact = 1.0 - mu[space.all_healthy().0];
    let dual = absorption_dual(model)?;
    let traj = meanfield::mf_iterate(&dual, graph, &MeanFieldPoint::upper_corner(&dual, graph.n()), t)?;
    let phi = &traj.last().expect("nonempty").p_i;
    let bound = 1.0 - space.support(x0).iter().map(|&i| 1.0 - phi[i]).product::<f64>();
    Ok(NonAbsorption { exact, bound, slack: bound - exact })
}

/// Minimum slack of the one-step linear domination of exact marginals:
/// infection coordinates against [`meanfield::infection_bound_matrix`],
/// plus the recovered coordinates of SIRS against `(1−γ)p_R + δp_I`.
pub fn linear_domination_slack(model: &ModelSpec, graph: &Graph, s: &TransitionMatrix, mu: &[f64]) -> Result<f64> {
    let now = marginals(mu, model)?;
    let next = marginals(&s.left_mul(mu), model)?;
    let b = meanfield::infection_bound_matrix(model, graph)?;
    let lin = &b * DVector::from_column_slice(&now.p_i);
    let mut slack = (0..graph.n()).map(|i| lin[i] - next.p_i[i]).fold(f64::INFINITY, f64::min);
    if model.variant() == Variant::Sirs {
        let (pr, nr) = (now.p_r.as_ref().expect("k=3"), next.p_r.as_ref().expect("k=3"));
        for i in 0..graph.n() {
            let bound = (1.0 - model.gamma()) * pr[i] + model.delta() * now.p_i[i];
            slack = slack.min(bound - nr[i]);
        }
    }
    Ok(slack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate, GraphKind};

    #[test]
    fn encode_decode_round_trip() {
        for k in [2, 3] {
            let space = StateSpace::new(4, k).unwrap();
            for x in space.states() {
                assert_eq!(space.encode(&space.decode(x)).unwrap(), x);
            }
        }
        let s3 = StateSpace::new(3, 3).unwrap();
        assert_eq!(s3.decode(s3.all_infected()), vec![1, 1, 1]);
    }

    #[test]
    fn node_probabilities() {
        let g = generate(GraphKind::Star { n: 3 }, 0).unwrap();
        let space = StateSpace::new(3, 2).unwrap();
        let x = space.encode(&[0, 1, 1]).unwrap();
        let m = ModelSpec::sis_nia(0.5, 0.5).unwrap();
        assert!((node_transition_prob(&m, &g, x, 0, 0).unwrap() - 0.25).abs() < 1e-15);
        let x = space.encode(&[1, 0, 0]).unwrap();
        assert!((node_transition_prob(&m, &g, x, 0, 0).unwrap() - 0.5).abs() < 1e-15);
        let ia = ModelSpec::sis_ia(0.5, 0.7).unwrap();
        let x = space.encode(&[1, 1, 1]).unwrap();
        assert!((node_transition_prob(&ia, &g, x, 0, 0).unwrap() - 0.7).abs() < 1e-15);
        assert!(node_transition_prob(&m, &g, x, 0, 2).is_err());

        let space3 = StateSpace::new(3, 3).unwrap();
        let sirs = ModelSpec::sirs(0.5, 0.5, 0.3).unwrap();
        let x = space3.encode(&[0, 1, 0]).unwrap();
        assert_eq!(node_transition_prob(&sirs, &g, x, 0, 2).unwrap(), 0.0);
        let siv = ModelSpec::siv(Variant::SivId, 0.5, 0.5, 0.3, 0.4).unwrap();
        assert!((node_transition_prob(&siv, &g, x, 0, 2).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_node_path_matrix_entry() {
        let g = generate(GraphKind::Path { n: 2 }, 0).unwrap();
        let m = ModelSpec::sis_nia(0.5, 0.5).unwrap();
        let s = build_transition_matrix(&m, &g).unwrap();
        assert!((s.get(3, 0) - 0.0625).abs() < 1e-15);
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_node_matrix() {
        let g = Graph::from_edges(1, []).unwrap();
        let s = build_transition_matrix(&ModelSpec::sis_nia(0.3, 0.2).unwrap(), &g).unwrap();
        assert_eq!(s.to_dmatrix(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.2, 0.8]));
        let mu = propagate(&DistVector::point_mass(2, ChainState(1)), &s, 1).unwrap();
        assert!((mu[0] - 0.2).abs() < 1e-15 && (mu[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cap_is_enforced() {
        let g = generate(GraphKind::Path { n: 14 }, 0).unwrap();
        let err = build_transition_matrix(&ModelSpec::sis_nia(0.1, 0.5).unwrap(), &g);
        assert!(matches!(err, Err(EpiError::StateSpaceCap { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let g = generate(GraphKind::Path { n: 2 }, 0).unwrap();
        let s = build_transition_matrix(&ModelSpec::sirs(0.3, 0.4, 0.2).unwrap(), &g).unwrap();
        let back = TransitionMatrix::from_csv(&s.to_csv()).unwrap();
        assert_eq!(back.data, s.data);
    }

    #[test]
    fn marginal_sums() {
        let m = ModelSpec::sis_nia(0.1, 0.1).unwrap();
        let p = marginals(&DistVector::uniform(4), &m).unwrap();
        assert_eq!(p.p_i, vec![0.5, 0.5]);
        let sirs = ModelSpec::sirs(0.1, 0.1, 0.1).unwrap();
        let p = marginals(&DistVector::point_mass(9, ChainState(0)), &sirs).unwrap();
        assert_eq!(p.p_r, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn siv_product_form() {
        let g = Graph::from_edges(1, []).unwrap();
        let m = ModelSpec::siv(Variant::SivId, 0.3, 0.4, 0.5, 0.5).unwrap();
        assert_eq!(&*stationary(&m, &g).unwrap(), &[0.5, 0.0, 0.5]);
        let g = generate(GraphKind::Path { n: 2 }, 0).unwrap();
        let m = ModelSpec::siv(Variant::SivVd, 0.3, 0.4, 0.3, 0.6).unwrap();
        assert!((stationary(&m, &g).unwrap()[0] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[1.0, 0.0]), 0.5);
    }

    #[test]
    fn instant_absorption_mixes_in_one_step() {
        let g = Graph::from_edges(1, []).unwrap();
        let m = ModelSpec::sis_nia(0.5, 1.0).unwrap();
        assert_eq!(mixing_analysis(&m, &g, 0.25).unwrap().t_mix, 1);
    }

    #[test]
    fn trivial_chain_mixes_immediately() {
        let space = StateSpace::new(0, 2).unwrap();
        let s = TransitionMatrix::from_rows(space, vec![1.0]).unwrap();
        let r = mixing_time_exact(&s, &DistVector::point_mass(1, ChainState(0)), 0.25).unwrap();
        assert_eq!(r.t_mix, 0);
    }

    #[test]
    fn bound_arithmetic() {
        let m = ModelSpec::sis_nia(0.1, 0.9).unwrap();
        assert!((bound_from_norm(&m, 3, 0.25, 0.5) - 12f64.ln() / 2f64.ln()).abs() < 1e-12);
        assert_eq!(bound_from_norm(&m, 3, 0.25, 1.0), f64::INFINITY);
        let reference = ModelSpec::sis_nia(0.055, 0.9).unwrap();
        assert!(bound_from_norm(&reference, 2000, 0.25, 0.1 + 0.055 * 16.159).is_finite());
    }

    #[test]
    fn r_pair_small_cases() {
        let (r, rinv) = build_r_pair(1).unwrap();
        assert_eq!(r.data, vec![1, 1, 0, 1]);
        assert_eq!(rinv.data, vec![1, -1, 0, 1]);
        let (_, rinv) = build_r_pair(2).unwrap();
        assert_eq!(rinv.get(0, 3), 1);
        for n in 0..=6 {
            let (r, rinv) = build_r_pair(n).unwrap();
            assert!(r.mul(&rinv).is_identity());
        }
    }

    #[test]
    fn u_vector_examples() {
        assert_eq!(u_vector(&[1.0, 1.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(u_vector(&[0.0, 0.0]).unwrap(), vec![1.0; 4]);
        assert!((u_vector(&[0.5, 0.25]).unwrap()[3] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn lp_two_node_path() {
        let g = generate(GraphKind::Path { n: 2 }, 0).unwrap();
        let m = ModelSpec::sis_nia(0.5, 0.5).unwrap();
        let p = MeanFieldPoint::new(vec![0.3, 0.4], None);
        let r = lp_marginal_max(&m, &g, 0, &p).unwrap();
        assert!((r.optimum - 0.35).abs() < 1e-12);
        assert!((r.closed_form - 0.35).abs() < 1e-12);
        let zero = MeanFieldPoint::new(vec![0.0, 0.0], None);
        assert!(lp_marginal_max(&m, &g, 0, &zero).unwrap().optimum.abs() < 1e-15);
    }

    #[test]
    fn lp_detects_infeasible_marginals() {
        let g = generate(GraphKind::Path { n: 2 }, 0).unwrap();
        let m = ModelSpec::sirs(0.5, 0.5, 0.5).unwrap();
        let p = MeanFieldPoint::new(vec![0.7, 0.1], Some(vec![0.5, 0.1]));
        assert!(matches!(lp_marginal_max(&m, &g, 0, &p), Err(EpiError::Infeasible)));
        let p = MeanFieldPoint::new(vec![0.7, 0.1], Some(vec![0.3, 0.1]));
        assert!(lp_marginal_max(&m, &g, 0, &p).is_ok());
    }

    #[test]
    fn non_absorption_trivial_cases() {
        let g = generate(GraphKind::Path { n: 3 }, 0).unwrap();
        let m = ModelSpec::sis_nia(0.3, 0.4).unwrap();
        let r = non_absorption_check(&m, &g, ChainState(0), 5).unwrap();
        assert_eq!((r.exact, r.bound), (0.0, 0.0));
        let r = non_absorption_check(&m, &g, ChainState(5), 0).unwrap();
        assert_eq!((r.exact, r.bound), (1.0, 1.0));
    }

    #[test]
    fn contact_u_bound_runs_through_the_transpose() {
        // node 1 infects node 0 w.p. 0.9, never the other way round
        let g = generate(GraphKind::Path { n: 2 }, 0).unwrap();
        let m = ModelSpec::general(DMatrix::from_row_slice(2, 2, &[0.5, 0.9, 0.0, 0.5])).unwrap();
        let s = build_transition_matrix(&m, &g).unwrap();
        let r = [1.0, 0.0];
        let x = s.space().encode(&[0, 1]).unwrap();
        let su = s.right_mul(&u_vector(&r).unwrap());
        let literal = meanfield::mf_step(&m, &g, &MeanFieldPoint::new(r.to_vec(), None)).unwrap();
        assert!((su[x.0] - 0.1).abs() < 1e-15);
        assert!((1.0 - literal.p_i[1] - 1.0).abs() < 1e-15);
        assert!(check_u_bound(&s, &m, &g, &r).unwrap() >= -1e-15);
    }
}
