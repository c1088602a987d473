//! Mean-field maps for every variant, their linearizations and Jacobians,
//! and the fixed-point solver.
//!
//! Points store infection probabilities in `p_i` and, for the three-state
//! variants, recovered/vaccinated probabilities in `p_r`. Flattened vectors
//! and Jacobians of three-state variants are ordered `(p_r, p_i)`.

use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EpiError, Result};
use crate::graph::Graph;
use crate::model::{ModelSpec, Variant};
use crate::spectral;

const RANGE_SLACK: f64 = 1e-12;
const MONOTONE_SLACK: f64 = 1e-14;
pub const CYCLE_WINDOW: usize = 64;
pub const CYCLE_TOLERANCE: f64 = 1e-9;
/// A recurrence only counts as a cycle while the one-step residual stays
/// above this level; slow convergence never produces it.
const CYCLE_MIN_RESIDUAL: f64 = 1e-6;
pub const DEFAULT_DAMPING: f64 = 0.5;
pub const DEFAULT_SPECTRUM_CAP: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldPoint {
    pub p_i: Vec<f64>,
    pub p_r: Option<Vec<f64>>,
}

impl MeanFieldPoint {
    pub fn new(p_i: Vec<f64>, p_r: Option<Vec<f64>>) -> Self {
        MeanFieldPoint { p_i, p_r }
    }

    pub fn zeros(model: &ModelSpec, n: usize) -> Self {
        let p_r = (model.states_per_node() == 3).then(|| vec![0.0; n]);
        MeanFieldPoint { p_i: vec![0.0; n], p_r }
    }

    /// All infected, nothing recovered.
    pub fn upper_corner(model: &ModelSpec, n: usize) -> Self {
        let mut x = Self::zeros(model, n);
        x.p_i.iter_mut().for_each(|v| *v = 1.0);
        x
    }

    /// Disease-free point: the origin, or the vaccinated equilibrium for SIV.
    pub fn base_point(model: &ModelSpec, n: usize) -> Self {
        let mut x = Self::zeros(model, n);
        if model.variant().is_siv() {
            let r = 1.0 - model.siv_susceptible_share();
            x.p_r = Some(vec![r; n]);
        }
        x
    }

    pub fn n(&self) -> usize {
        self.p_i.len()
    }

    pub fn p_r_or_zero(&self, i: usize) -> f64 {
        self.p_r.as_ref().map_or(0.0, |r| r[i])
    }

    pub fn validate(&self, model: &ModelSpec, n: usize) -> Result<()> {
        if self.p_i.len() != n {
            return Err(EpiError::Dimension { expected: n, got: self.p_i.len() });
        }
        let three = model.states_per_node() == 3;
        match (&self.p_r, three) {
            (Some(r), true) if r.len() != n => {
                return Err(EpiError::Dimension { expected: n, got: r.len() })
            }
            (None, true) => return Err(EpiError::InvalidParam("p_r is required for this variant".into())),
            (Some(_), false) => {
                return Err(EpiError::InvalidParam("p_r is only defined for three-state variants".into()))
            }
            _ => {}
        }
        let in_range = |v: f64| (-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v);
        for i in 0..n {
            let (pi, pr) = (self.p_i[i], self.p_r_or_zero(i));
            if !in_range(pi) || !in_range(pr) || pi + pr > 1.0 + RANGE_SLACK {
                return Err(EpiError::InvalidParam(format!(
                    "node {i}: (p_i, p_r) = ({pi}, {pr}) is not a probability pair"
                )));
            }
        }
        Ok(())
    }

    /// `max` distance over both coordinates.
    pub fn sup_distance(&self, other: &MeanFieldPoint) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let r = match (&self.p_r, &other.p_r) {
            (Some(a), Some(b)) => d(a, b),
            _ => 0.0,
        };
        d(&self.p_i, &other.p_i).max(r)
    }

    pub fn flatten(&self) -> Vec<f64> {
        match &self.p_r {
            Some(r) => r.iter().chain(&self.p_i).copied().collect(),
            None => self.p_i.clone(),
        }
    }

    pub fn from_flat(model: &ModelSpec, v: &[f64]) -> Self {
        if model.states_per_node() == 3 {
            let n = v.len() / 2;
            MeanFieldPoint { p_i: v[n..].to_vec(), p_r: Some(v[..n].to_vec()) }
        } else {
            MeanFieldPoint { p_i: v.to_vec(), p_r: None }
        }
    }

    fn lerp(&self, other: &MeanFieldPoint, eta: f64) -> MeanFieldPoint {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - eta) * x + eta * y).collect();
        MeanFieldPoint {
            p_i: mix(&self.p_i, &other.p_i),
            p_r: match (&self.p_r, &other.p_r) {
                (Some(a), Some(b)) => Some(mix(a, b)),
                _ => None,
            },
        }
    }
}

/// Per-node escape products `E_i = Π_j (1 − c_ij x_j)` where `c` is `βW`
/// or the contact matrix.
fn escape_products(model: &ModelSpec, graph: &Graph, x: &[f64]) -> Vec<f64> {
    match model.contact() {
        Some(m) => (0..x.len())
            .map(|i| (0..x.len()).map(|j| 1.0 - m[(i, j)] * x[j]).product())
            .collect(),
        None => {
            let b = model.beta();
            (0..x.len())
                .map(|i| graph.neighbors(i).iter().map(|&(j, w)| 1.0 - b * w * x[j]).product())
                .collect()
        }
    }
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(x)) {
        Some(i) => Err(EpiError::Verification(format!("{what}[{i}] = {} left [0, 1]", v[i]))),
        None => Ok(()),
    }
}

/// One synchronous application of the variant's mean-field map.
pub fn mf_step(model: &ModelSpec, graph: &Graph, x: &MeanFieldPoint) -> Result<MeanFieldPoint> {
    model.check_graph(graph)?;
    x.validate(model, graph.n())?;
    let n = graph.n();
    let (d, g, th) = (model.delta(), model.gamma(), model.theta());
    let e = escape_products(model, graph, &x.p_i);
    let out = match model.variant() {
        Variant::SisNia => MeanFieldPoint::new(
            (0..n).map(|i| 1.0 - (1.0 - (1.0 - d) * x.p_i[i]) * e[i]).collect(),
            None,
        ),
        Variant::SisIa => MeanFieldPoint::new(
            (0..n).map(|i| (1.0 - d) * x.p_i[i] + (1.0 - x.p_i[i]) * (1.0 - e[i])).collect(),
            None,
        ),
        Variant::SisGeneral => MeanFieldPoint::new(e.iter().map(|ei| 1.0 - ei).collect(), None),
        v => {
            let (pi, pr) = (&x.p_i, x.p_r.as_ref().expect("validated"));
            let mut ni = Vec::with_capacity(n);
            let mut nr = Vec::with_capacity(n);
            for i in 0..n {
                let s = 1.0 - pi[i] - pr[i];
                let xi = 1.0 - e[i];
                let (r_next, i_next) = match v {
                    Variant::Sirs => ((1.0 - g) * pr[i] + d * pi[i], (1.0 - d) * pi[i] + xi * s),
                    Variant::SivId => (
                        (1.0 - g) * pr[i] + d * pi[i] + th * s * e[i],
                        (1.0 - d) * pi[i] + xi * s,
                    ),
                    _ => (
                        (1.0 - g) * pr[i] + d * pi[i] + th * s,
                        (1.0 - d) * pi[i] + (1.0 - th) * xi * s,
                    ),
                };
                nr.push(r_next);
                ni.push(i_next);
            }
            MeanFieldPoint::new(ni, Some(nr))
        }
    };
    check_unit(&out.p_i, "p_i")?;
    if let Some(r) = &out.p_r {
        check_unit(r, "p_r")?;
        if let Some(i) = (0..n).find(|&i| out.p_i[i] + r[i] > 1.0 + RANGE_SLACK) {
            return Err(EpiError::Verification(format!("node {i}: p_i + p_r exceeds 1")));
        }
    }
    Ok(out)
}

/// `t + 1` points starting with `x0`.
pub fn mf_iterate(model: &ModelSpec, graph: &Graph, x0: &MeanFieldPoint, t: usize) -> Result<Vec<MeanFieldPoint>> {
    let mut traj = Vec::with_capacity(t + 1);
    traj.push(x0.clone());
    for _ in 0..t {
        let next = mf_step(model, graph, traj.last().expect("nonempty"))?;
        traj.push(next);
    }
    Ok(traj)
}

#[derive(Debug, Clone)]
pub struct LinearModel {
    pub matrix: DMatrix<f64>,
    pub base_point: MeanFieldPoint,
}

fn weighted_adjacency(model: &ModelSpec, graph: &Graph, scale: f64) -> DMatrix<f64> {
    graph.adjacency_dense() * (model.beta() * scale)
}

/// Jacobian of the map at its disease-free point, in the block layout
/// `[[∂R'/∂R, ∂R'/∂I], [∂I'/∂R, ∂I'/∂I]]` for three-state variants.
pub fn mf_linear_model(model: &ModelSpec, graph: &Graph) -> Result<LinearModel> {
    model.check_graph(graph)?;
    let n = graph.n();
    let (d, g, th) = (model.delta(), model.gamma(), model.theta());
    let eye = DMatrix::<f64>::identity(n, n);
    let base_point = MeanFieldPoint::base_point(model, n);
    let matrix = match model.variant() {
        Variant::SisNia | Variant::SisIa => &eye * (1.0 - d) + weighted_adjacency(model, graph, 1.0),
        Variant::SisGeneral => model.contact().expect("validated").clone(),
        v => {
            let ps = if v.is_siv() { model.siv_susceptible_share() } else { 1.0 };
            let (rr, ri, ii) = match v {
                Variant::Sirs => (&eye * (1.0 - g), &eye * d, &eye * (1.0 - d) + weighted_adjacency(model, graph, 1.0)),
                Variant::SivId => (
                    &eye * (1.0 - g - th),
                    &eye * (d - th) - weighted_adjacency(model, graph, th * ps),
                    &eye * (1.0 - d) + weighted_adjacency(model, graph, ps),
                ),
                _ => (
                    &eye * (1.0 - g - th),
                    &eye * (d - th),
                    &eye * (1.0 - d) + weighted_adjacency(model, graph, (1.0 - th) * ps),
                ),
            };
            let mut m = DMatrix::zeros(2 * n, 2 * n);
            m.view_mut((0, 0), (n, n)).copy_from(&rr);
            m.view_mut((0, n), (n, n)).copy_from(&ri);
            m.view_mut((n, n), (n, n)).copy_from(&ii);
            m
        }
    };
    Ok(LinearModel { matrix, base_point })
}

/// The n×n linear operator that dominates the infection coordinates of the
/// map: `(1−δ)I + βW`, with `β` scaled by `1−θ` for vaccination-dominant
/// SIV, or the contact matrix itself.
pub fn infection_bound_matrix(model: &ModelSpec, graph: &Graph) -> Result<DMatrix<f64>> {
    model.check_graph(graph)?;
    if let Some(m) = model.contact() {
        return Ok(m.clone());
    }
    let scale = if model.variant() == Variant::SivVd { 1.0 - model.theta() } else { 1.0 };
    let n = graph.n();
    Ok(DMatrix::<f64>::identity(n, n) * (1.0 - model.delta()) + weighted_adjacency(model, graph, scale))
}

/// Largest singular value. Symmetric nonnegative matrices go through the
/// Perron root, everything else through a dense SVD.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let symmetric_nonneg = m.iter().all(|&v| v >= 0.0) && (m - m.transpose()).amax() == 0.0;
    if symmetric_nonneg {
        Ok(spectral::dense_spectral_radius(m, 1e-13)?.lambda_max)
    } else {
        Ok(m.clone().singular_values().max())
    }
}

/// `∂Ξ_i/∂x_j = c_ij Π_{k≠j}(1 − c_ik x_k)`. Uses `E_i / (1 − c_ij x_j)`
/// when every factor is positive, the explicit leave-one-out product
/// otherwise.
fn infection_gradient(model: &ModelSpec, graph: &Graph, x: &[f64], e: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut grad = DMatrix::zeros(n, n);
    let rows: Vec<Vec<(usize, f64)>> = match model.contact() {
        Some(m) => (0..n).map(|i| (0..n).map(|j| (j, m[(i, j)])).filter(|&(_, c)| c != 0.0).collect()).collect(),
        None => (0..n)
            .map(|i| graph.neighbors(i).iter().map(|&(j, w)| (j, model.beta() * w)).collect())
            .collect(),
    };
    for (i, row) in rows.iter().enumerate() {
        let factors: Vec<f64> = row.iter().map(|&(j, c)| 1.0 - c * x[j]).collect();
        if factors.iter().all(|&f| f > 0.0) {
            for (&(j, c), f) in row.iter().zip(&factors) {
                grad[(i, j)] += c * e[i] / f;
            }
        } else {
            let mut prefix = vec![1.0; factors.len() + 1];
            for k in 0..factors.len() {
                prefix[k + 1] = prefix[k] * factors[k];
            }
            let mut suffix = 1.0;
            for k in (0..factors.len()).rev() {
                let (j, c) = row[k];
                grad[(i, j)] += c * prefix[k] * suffix;
                suffix *= factors[k];
            }
        }
    }
    grad
}

/// Analytic Jacobian of [`mf_step`] at `x`.
pub fn mf_jacobian(model: &ModelSpec, graph: &Graph, x: &MeanFieldPoint) -> Result<DMatrix<f64>> {
    model.check_graph(graph)?;
    x.validate(model, graph.n())?;
    let n = graph.n();
    let (d, g, th) = (model.delta(), model.gamma(), model.theta());
    let e = escape_products(model, graph, &x.p_i);
    let grad = infection_gradient(model, graph, &x.p_i, &e);
    let pi = &x.p_i;
    Ok(match model.variant() {
        Variant::SisNia => {
            let mut j = grad;
            for i in 0..n {
                j.row_mut(i).scale_mut(1.0 - (1.0 - d) * pi[i]);
                j[(i, i)] += (1.0 - d) * e[i];
            }
            j
        }
        Variant::SisIa => {
            let mut j = grad;
            for i in 0..n {
                j.row_mut(i).scale_mut(1.0 - pi[i]);
                j[(i, i)] += 1.0 - d - (1.0 - e[i]);
            }
            j
        }
        Variant::SisGeneral => grad,
        v => {
            let pr = x.p_r.as_ref().expect("validated");
            let vax_share = if v == Variant::SivVd { 1.0 - th } else { 1.0 };
            let mut j = DMatrix::zeros(2 * n, 2 * n);
            for i in 0..n {
                let s = 1.0 - pi[i] - pr[i];
                let xi = 1.0 - e[i];
                // infection rows
                j[(n + i, i)] = -vax_share * xi;
                for k in 0..n {
                    j[(n + i, n + k)] = vax_share * s * grad[(i, k)];
                }
                j[(n + i, n + i)] += 1.0 - d - vax_share * xi;
                // recovered rows
                match v {
                    Variant::Sirs => {
                        j[(i, i)] = 1.0 - g;
                        j[(i, n + i)] = d;
                    }
                    Variant::SivId => {
                        j[(i, i)] = 1.0 - g - th * e[i];
                        for k in 0..n {
                            j[(i, n + k)] = -th * s * grad[(i, k)];
                        }
                        j[(i, n + i)] += d - th * e[i];
                    }
                    _ => {
                        j[(i, i)] = 1.0 - g - th;
                        j[(i, n + i)] = d - th;
                    }
                }
            }
            j
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn norm(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// Eigenvalues of the Jacobian at `x`. For unweighted SIS maps at interior
/// points the Jacobian is `D + diag(a) A diag(b)` with `a, b > 0`, which is
/// similar to the symmetric `D + diag(√ab) A diag(√ab)`; that case uses a
/// symmetric solver and yields real eigenvalues only.
pub fn jacobian_spectrum(model: &ModelSpec, graph: &Graph, x: &MeanFieldPoint) -> Result<Vec<Eigenvalue>> {
    let jac = mf_jacobian(model, graph, x)?;
    if let Some(sym) = symmetrized_sis_jacobian(model, graph, x) {
        let mut ev: Vec<Eigenvalue> = sym.symmetric_eigenvalues().iter().map(|&re| Eigenvalue { re, im: 0.0 }).collect();
        ev.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
        return Ok(ev);
    }
    let mut ev: Vec<Eigenvalue> = bounded_eigenvalues(&jac)?;
    ev.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    Ok(ev)
}

/// QR sweeps cannot deflate a subdiagonal entry at machine precision next
/// to a near-defective eigenvalue cluster, as at a converged disease-free
/// point of a three-state map. The sweep count is capped and the deflation
/// tolerance loosened step by step; the transpose gets the same attempts.
fn bounded_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Eigenvalue>> {
    let max_iter = 1000 * m.nrows().max(1);
    let candidates = [m.clone(), m.transpose()];
    [f64::EPSILON, 1e-14, 1e-12, 1e-10]
        .into_iter()
        .find_map(|eps| candidates.iter().find_map(|a| Schur::try_new(a.clone(), eps, max_iter)))
        .map(|schur| schur.complex_eigenvalues().iter().map(|c| Eigenvalue { re: c.re, im: c.im }).collect())
        .ok_or(EpiError::NotConverged { iterations: max_iter, residual: f64::NAN })
}

fn symmetrized_sis_jacobian(model: &ModelSpec, graph: &Graph, x: &MeanFieldPoint) -> Option<DMatrix<f64>> {
    if !matches!(model.variant(), Variant::SisNia | Variant::SisIa) || graph.is_weighted() {
        return None;
    }
    let (b, d) = (model.beta(), model.delta());
    let pi = &x.p_i;
    if pi.iter().any(|&v| v >= 1.0 || b * v >= 1.0) {
        return None;
    }
    let e = escape_products(model, graph, pi);
    let n = graph.n();
    let mut diag = vec![0.0; n];
    let mut c = vec![0.0; n];
    for i in 0..n {
        let (lead, di) = match model.variant() {
            Variant::SisNia => (1.0 - (1.0 - d) * pi[i], (1.0 - d) * e[i]),
            _ => (1.0 - pi[i], 1.0 - d - (1.0 - e[i])),
        };
        let a = b * lead * e[i];
        if a <= 0.0 && graph.degree(i) > 0 {
            return None;
        }
        diag[i] = di;
        c[i] = (a / (1.0 - b * pi[i])).sqrt();
    }
    let mut sym = DMatrix::from_diagonal(&DVector::from_vec(diag));
    for &(u, v) in graph.edges() {
        let val = c[u] * c[v];
        sym[(u, v)] = val;
        sym[(v, u)] = val;
    }
    Some(sym)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Classification {
    DiseaseFree,
    Endemic,
    Cycle { period: usize },
    NonConverged,
}

#[derive(Debug, Clone)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub cap: usize,
    /// `None` picks the variant default: plain monotone iteration for
    /// `sis-nia`/`sis-general`, damping 0.5 otherwise. `Some(1.0)` is raw
    /// iteration.
    pub damping: Option<f64>,
    pub start: Option<MeanFieldPoint>,
    /// Iterate on `p_i` alone with `p_r` pinned to the fixed-point relation.
    pub reduce_with_relation: bool,
    /// Skip the eigenvalue computation above this dimension.
    pub spectrum_cap: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-10,
            cap: 1_000_000,
            damping: None,
            start: None,
            reduce_with_relation: false,
            spectrum_cap: DEFAULT_SPECTRUM_CAP,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub point: MeanFieldPoint,
    pub residual: f64,
    pub iterations: usize,
    pub classification: Classification,
    pub jacobian_spectrum: Vec<Eigenvalue>,
    /// Sup-norm defect of the variant's linear `p_r`/`p_i` relation at an
    /// endemic three-state point.
    pub relation_defect: Option<f64>,
}

/// `p_r` implied by `p_i` at a fixed point of a three-state map.
pub fn relation_p_r(model: &ModelSpec, p_i: &[f64]) -> Option<Vec<f64>> {
    let (d, g, th) = (model.delta(), model.gamma(), model.theta());
    let (c0, c1) = match model.variant() {
        Variant::Sirs if g > 0.0 => (0.0, d / g),
        Variant::SivId => (th / (g + th), (d - th - d * th) / (g + th)),
        Variant::SivVd => (th / (g + th), (d - th) / (g + th)),
        _ => return None,
    };
    Some(p_i.iter().map(|&x| c0 + c1 * x).collect())
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn reduced_step(model: &ModelSpec, graph: &Graph, x: &MeanFieldPoint) -> Result<MeanFieldPoint> {
    let p_r = relation_p_r(model, &x.p_i).ok_or_else(|| EpiError::Unsupported {
        variant: model.variant().name(),
        reason: "no fixed-point relation to reduce with".into(),
    })?;
    let full = MeanFieldPoint::new(x.p_i.clone(), Some(p_r.iter().map(|v| v.clamp(0.0, 1.0)).collect()));
    let stepped = mf_step(model, graph, &full)?;
    let p_i = stepped.p_i;
    let p_r = relation_p_r(model, &p_i).expect("checked");
    Ok(MeanFieldPoint::new(p_i, Some(p_r)))
}

/// Largest uniform `p_i` whose related `p_r` still leaves room for `p_i`.
fn reduced_corner(model: &ModelSpec, n: usize) -> Result<MeanFieldPoint> {
    let r0 = relation_p_r(model, &[0.0]).and_then(|v| v.first().copied());
    let r1 = relation_p_r(model, &[1.0]).and_then(|v| v.first().copied());
    let (Some(c0), Some(r1)) = (r0, r1) else {
        return Err(EpiError::Unsupported {
            variant: model.variant().name(),
            reason: "no fixed-point relation to reduce with".into(),
        });
    };
    let c1 = r1 - c0;
    let top = if 1.0 + c1 > 0.0 { ((1.0 - c0) / (1.0 + c1)).clamp(0.0, 1.0) } else { 1.0 };
    let p_i = vec![top; n];
    let p_r = relation_p_r(model, &p_i).expect("checked").iter().map(|v| v.clamp(0.0, 1.0 - top)).collect();
    Ok(MeanFieldPoint::new(p_i, Some(p_r)))
}

pub fn find_fixed_point(model: &ModelSpec, graph: &Graph, opts: &FixedPointOptions) -> Result<FixedPointReport> {
    if !(opts.tol > 0.0) {
        return Err(EpiError::InvalidParam("tolerance must be positive".into()));
    }
    let eta = opts.damping.unwrap_or(match model.variant() {
        Variant::SisNia | Variant::SisGeneral => 1.0,
        _ => DEFAULT_DAMPING,
    });
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(EpiError::InvalidParam(format!("damping {eta} outside (0, 1]")));
    }
    let n = graph.n();
    let monotone = opts.start.is_none()
        && eta == 1.0
        && matches!(model.variant(), Variant::SisNia | Variant::SisGeneral);
    let mut x = match &opts.start {
        Some(s) => {
            s.validate(model, n)?;
            s.clone()
        }
        None if opts.reduce_with_relation => reduced_corner(model, n)?,
        None => MeanFieldPoint::upper_corner(model, n),
    };
    let step = |x: &MeanFieldPoint| {
        if opts.reduce_with_relation {
            reduced_step(model, graph, x)
        } else {
            mf_step(model, graph, x)
        }
    };
    let mut history: std::collections::VecDeque<MeanFieldPoint> = std::collections::VecDeque::new();
    let mut prev_residual = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut classification = Classification::NonConverged;
    let mut iterations = 0;
    while iterations < opts.cap {
        let fx = step(&x)?;
        residual = fx.sup_distance(&x);
        // converged once the geometric estimate `r/(1−ρ)` of the distance to
        // the limit is below tol, so a disease-free limit leaves ‖x‖∞ < tol
        let rate = if prev_residual.is_finite() && prev_residual > 0.0 { residual / prev_residual } else { 1.0 };
        let tail = if rate < 1.0 { residual * rate / (1.0 - rate) } else { f64::INFINITY };
        if residual + tail < opts.tol || residual == 0.0 {
            classification = Classification::Endemic;
            break;
        }
        if monotone {
            if let Some(j) = (0..n).find(|&j| fx.p_i[j] > x.p_i[j] + MONOTONE_SLACK) {
                return Err(EpiError::Verification(format!(
                    "monotone upper iteration increased at node {j} (step {iterations})"
                )));
            }
        }
        if residual > CYCLE_MIN_RESIDUAL {
            if let Some(q) = history
                .iter()
                .rev()
                .enumerate()
                .skip(1)
                .find(|(_, h)| h.sup_distance(&x) < CYCLE_TOLERANCE)
                .map(|(k, _)| k + 1)
            {
                classification = Classification::Cycle { period: q };
                break;
            }
        }
        history.push_back(x.clone());
        if history.len() > CYCLE_WINDOW {
            history.pop_front();
        }
        x = if eta == 1.0 { fx } else { x.lerp(&fx, eta) };
        prev_residual = residual;
        iterations += 1;
    }
    if classification == Classification::Endemic && x.p_i.iter().fold(0.0_f64, |m, v| m.max(*v)) < opts.tol {
        classification = Classification::DiseaseFree;
    }
    let relation_defect = match (classification, &x.p_r) {
        (Classification::Endemic, Some(pr)) => relation_p_r(model, &x.p_i).map(|rel| sup_diff(pr, &rel)),
        _ => None,
    };
    let converged = matches!(classification, Classification::Endemic | Classification::DiseaseFree);
    let dim = if model.states_per_node() == 3 { 2 * n } else { n };
    let jacobian_spectrum = if converged && dim <= opts.spectrum_cap {
        jacobian_spectrum(model, graph, &x)?
    } else {
        Vec::new()
    };
    Ok(FixedPointReport { point: x, residual, iterations, classification, jacobian_spectrum, relation_defect })
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub spectral_radius: f64,
    pub stable: bool,
    pub dominant: Eigenvalue,
    /// Largest purely real eigenvalue, if any.
    pub max_real_eigenvalue: Option<f64>,
}

pub const FIXED_POINT_CHECK: f64 = 1e-6;

pub fn classify_stability(model: &ModelSpec, graph: &Graph, point: &MeanFieldPoint) -> Result<StabilityReport> {
    let image = mf_step(model, graph, point)?;
    let defect = image.sup_distance(point);
    if defect > FIXED_POINT_CHECK {
        return Err(EpiError::Verification(format!("not a fixed point (residual {defect:e})")));
    }
    let ev = jacobian_spectrum(model, graph, point)?;
    stability_from_spectrum(&ev)
}

pub fn stability_from_spectrum(ev: &[Eigenvalue]) -> Result<StabilityReport> {
    let dominant = *ev
        .first()
        .ok_or_else(|| EpiError::InvalidParam("empty spectrum".into()))?;
    let spectral_radius = dominant.norm();
    let scale = ev.iter().map(|e| e.norm()).fold(1.0, f64::max);
    let max_real_eigenvalue = ev
        .iter()
        .filter(|e| e.im.abs() <= 1e-12 * scale)
        .map(|e| e.re)
        .reduce(f64::max);
    Ok(StabilityReport { spectral_radius, stable: spectral_radius < 1.0, dominant, max_real_eigenvalue })
}

/// Positive `v` with `(βA − δI)v ≻ 0` (with the variant's effective
/// infection scale), present iff the threshold ratio exceeds 1. The vector
/// has unit 2-norm.
pub fn perron_certificate(model: &ModelSpec, graph: &Graph) -> Result<Option<Vec<f64>>> {
    model.check_graph(graph)?;
    let (report, ratio) = match model.contact() {
        Some(m) => {
            let r = spectral::dense_spectral_radius(m, 1e-13)?;
            let ratio = r.lambda_max;
            (r, ratio)
        }
        None => {
            let r = spectral::spectral_radius(graph, 1e-13)?;
            let ratio = spectral::ratio_from_lambda(model, r.lambda_max);
            (r, ratio)
        }
    };
    if !(ratio > 1.0) {
        return Ok(None);
    }
    let norm = report.eigvec.iter().map(|v| v * v).sum::<f64>().sqrt();
    let v: Vec<f64> = report.eigvec.iter().map(|x| x / norm).collect();
    let n = v.len();
    let mut image = vec![0.0; n];
    match model.contact() {
        Some(m) => {
            for i in 0..n {
                image[i] = (0..n).map(|j| m[(i, j)] * v[j]).sum::<f64>() - v[i];
            }
        }
        None => {
            let scale = spectral::effective_beta(model);
            graph.adj_mul(&v, &mut image);
            for i in 0..n {
                image[i] = scale * image[i] - model.delta() * v[i];
            }
        }
    }
    if let Some(i) = (0..n).find(|&i| !(image[i] > 1e-12)) {
        return Err(EpiError::Verification(format!(
            "Perron certificate fails at node {i}: component {}",
            image[i]
        )));
    }
    Ok(Some(v))
}

/// `min_i [(B p_i)_i − map(x)_i]` over infection coordinates, where `B` is
/// [`infection_bound_matrix`].
pub fn linear_bound_check(model: &ModelSpec, graph: &Graph, x: &MeanFieldPoint) -> Result<f64> {
    let b = infection_bound_matrix(model, graph)?;
    let next = mf_step(model, graph, x)?;
    let lin = &b * DVector::from_column_slice(&x.p_i);
    Ok((0..graph.n()).map(|i| lin[i] - next.p_i[i]).fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate, GraphKind};

    fn star3() -> Graph {
        generate(GraphKind::Star { n: 3 }, 0).unwrap()
    }

    #[test]
    fn origin_is_fixed_for_every_variant() {
        let g = generate(GraphKind::Path { n: 4 }, 0).unwrap();
        let models = [
            ModelSpec::sis_nia(0.3, 0.2).unwrap(),
            ModelSpec::sis_ia(0.3, 0.2).unwrap(),
            ModelSpec::general(ModelSpec::contact_from_graph(&g, 0.3, 0.2).unwrap()).unwrap(),
            ModelSpec::sirs(0.3, 0.2, 0.1).unwrap(),
        ];
        for m in &models {
            let z = MeanFieldPoint::zeros(m, 4);
            assert_eq!(mf_step(m, &g, &z).unwrap(), z);
        }
    }

    #[test]
    fn siv_base_point_is_fixed() {
        let g = generate(GraphKind::Complete { n: 4 }, 0).unwrap();
        for v in [Variant::SivId, Variant::SivVd] {
            let m = ModelSpec::siv(v, 0.4, 0.3, 0.2, 0.6).unwrap();
            let b = MeanFieldPoint::base_point(&m, 4);
            assert!(mf_step(&m, &g, &b).unwrap().sup_distance(&b) < 1e-15);
        }
    }

    #[test]
    fn no_infection_decays_geometrically() {
        let g = generate(GraphKind::Path { n: 3 }, 0).unwrap();
        let m = ModelSpec::sis_nia(0.0, 0.3).unwrap();
        let x = MeanFieldPoint::new(vec![0.2, 0.5, 1.0], None);
        let y = mf_step(&m, &g, &x).unwrap();
        for (a, b) in y.p_i.iter().zip(&x.p_i) {
            assert!((a - 0.7 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn k2_sis_linear_model() {
        let g = generate(GraphKind::Complete { n: 2 }, 0).unwrap();
        let m = ModelSpec::sis_nia(0.3, 0.4).unwrap();
        let lm = mf_linear_model(&m, &g).unwrap();
        assert_eq!(lm.matrix, DMatrix::from_row_slice(2, 2, &[0.6, 0.3, 0.3, 0.6]));
    }

    #[test]
    fn sirs_block_layout() {
        let g = generate(GraphKind::Path { n: 2 }, 0).unwrap();
        let m = ModelSpec::sirs(0.3, 0.4, 0.1).unwrap();
        let lm = mf_linear_model(&m, &g).unwrap().matrix;
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[0.9, 0.0, 0.4, 0.0, 0.0, 0.9, 0.0, 0.4, 0.0, 0.0, 0.6, 0.3, 0.0, 0.0, 0.3, 0.6],
        );
        assert!((lm - expect).amax() < 1e-15);
    }

    #[test]
    fn jacobian_at_origin_is_linear_model() {
        let g = generate(GraphKind::Star { n: 4 }, 0).unwrap();
        for m in [
            ModelSpec::sis_nia(0.3, 0.4).unwrap(),
            ModelSpec::sis_ia(0.3, 0.4).unwrap(),
            ModelSpec::sirs(0.3, 0.4, 0.2).unwrap(),
        ] {
            let j = mf_jacobian(&m, &g, &MeanFieldPoint::zeros(&m, 4)).unwrap();
            assert!((j - mf_linear_model(&m, &g).unwrap().matrix).amax() < 1e-15);
        }
        for v in [Variant::SivId, Variant::SivVd] {
            let m = ModelSpec::siv(v, 0.3, 0.4, 0.2, 0.5).unwrap();
            let j = mf_jacobian(&m, &g, &MeanFieldPoint::base_point(&m, 4)).unwrap();
            assert!((j - mf_linear_model(&m, &g).unwrap().matrix).amax() < 1e-15, "{v}");
        }
    }

    #[test]
    fn k2_endemic_point() {
        let g = generate(GraphKind::Complete { n: 2 }, 0).unwrap();
        let m = ModelSpec::sis_nia(0.8, 0.4).unwrap();
        let r = find_fixed_point(&m, &g, &FixedPointOptions::default()).unwrap();
        assert_eq!(r.classification, Classification::Endemic);
        for v in &r.point.p_i {
            assert!((v - 5.0 / 6.0).abs() < 1e-8);
        }
    }

    #[test]
    fn k2_sirs_endemic_point() {
        let g = generate(GraphKind::Complete { n: 2 }, 0).unwrap();
        let m = ModelSpec::sirs(0.8, 0.4, 0.4).unwrap();
        let r = find_fixed_point(&m, &g, &FixedPointOptions::default()).unwrap();
        assert_eq!(r.classification, Classification::Endemic);
        for i in 0..2 {
            assert!((r.point.p_i[i] - 0.25).abs() < 1e-8);
            assert!((r.point.p_r.as_ref().unwrap()[i] - 0.25).abs() < 1e-8);
        }
        let reduced = find_fixed_point(&m, &g, &FixedPointOptions { reduce_with_relation: true, ..Default::default() })
            .unwrap();
        assert!(reduced.point.sup_distance(&r.point) < 1e-8);
    }

    #[test]
    fn star_example_raw_iteration_cycles() {
        let m = ModelSpec::sis_ia(0.9, 0.9).unwrap();
        let opts = FixedPointOptions { damping: Some(1.0), ..Default::default() };
        let r = find_fixed_point(&m, &star3(), &opts).unwrap();
        assert_eq!(r.classification, Classification::Cycle { period: 2 });
    }

    #[test]
    fn disease_free_sirs_spectrum_terminates() {
        // (1−γ) = 0.7 has multiplicity 5 and the converged point is ~1e−11 off the origin
        let g = generate(GraphKind::Path { n: 5 }, 0).unwrap();
        let m = ModelSpec::sirs(0.1, 0.5, 0.3).unwrap();
        let rep = find_fixed_point(&m, &g, &FixedPointOptions::default()).unwrap();
        assert_eq!(rep.classification, Classification::DiseaseFree);
        assert_eq!(rep.jacobian_spectrum.len(), 10);
        let radius = rep.jacobian_spectrum[0].norm();
        assert!((radius - 0.7).abs() < 1e-6, "{radius}");
    }

    #[test]
    fn star_example_damped_point_and_spectrum() {
        let m = ModelSpec::sis_ia(0.9, 0.9).unwrap();
        let r = find_fixed_point(&m, &star3(), &FixedPointOptions::default()).unwrap();
        assert_eq!(r.classification, Classification::Endemic);
        for (a, b) in r.point.p_i.iter().zip([0.286, 0.222, 0.222]) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!((r.jacobian_spectrum[0].re + 1.059).abs() < 1e-2);
        let s = classify_stability(&m, &star3(), &r.point).unwrap();
        assert!(!s.stable);
    }

    #[test]
    fn perron_certificate_k2() {
        let g = generate(GraphKind::Complete { n: 2 }, 0).unwrap();
        let v = perron_certificate(&ModelSpec::sis_nia(0.8, 0.4).unwrap(), &g).unwrap().unwrap();
        assert!((v[0] - 0.5f64.sqrt()).abs() < 1e-10 && (v[1] - 0.5f64.sqrt()).abs() < 1e-10);
        assert!(perron_certificate(&ModelSpec::sis_nia(0.1, 0.4).unwrap(), &g).unwrap().is_none());
    }

    #[test]
    fn relations_at_origin_slack() {
        let g = star3();
        let m = ModelSpec::sis_nia(0.5, 0.5).unwrap();
        assert_eq!(linear_bound_check(&m, &g, &MeanFieldPoint::zeros(&m, 3)).unwrap(), 0.0);
    }
}
