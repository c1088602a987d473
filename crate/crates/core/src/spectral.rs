//! Dominant eigenpair of nonnegative matrices and the epidemic threshold
//! ratios built from it.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{EpiError, Result};
use crate::graph::Graph;
use crate::model::{ModelSpec, Variant};

pub const MAX_POWER_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub lambda_max: f64,
    pub iterations: usize,
    /// `‖A v − λ v‖∞` for the returned max-normalized `v`.
    pub residual: f64,
    pub eigvec: Vec<f64>,
    pub connected: bool,
}

/// Shifted power iteration `v ← (A + I) v` from the all-ones vector. The
/// unit shift keeps bipartite graphs (where `±λ` are both eigenvalues of
/// `A`) from oscillating.
fn power_iteration<F>(n: usize, tol: f64, mut apply: F) -> Result<(f64, usize, f64, Vec<f64>)>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if !(tol > 0.0) {
        return Err(EpiError::InvalidParam(format!("tolerance {tol} must be positive")));
    }
    if n == 0 {
        return Ok((0.0, 0, 0.0, Vec::new()));
    }
    let mut v = vec![1.0; n];
    let mut w = vec![0.0; n];
    let mut prev = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for it in 1..=MAX_POWER_ITERATIONS {
        apply(&v, &mut w);
        let vw: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let vv: f64 = v.iter().map(|a| a * a).sum();
        let lambda = vw / vv;
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).abs())
            .fold(0.0, f64::max);
        if (lambda - prev).abs() < tol && residual < tol {
            return Ok((lambda, it, residual, v));
        }
        prev = lambda;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi += wi;
        }
        let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return Ok((0.0, it, 0.0, v));
        }
        v.iter_mut().for_each(|x| *x /= scale);
    }
    Err(EpiError::NotConverged { iterations: MAX_POWER_ITERATIONS, residual })
}

/// Largest adjacency eigenvalue (edge weights applied) with its Perron
/// vector, normalized to unit max entry.
pub fn spectral_radius(graph: &Graph, tol: f64) -> Result<SpectralReport> {
    let connected = graph.is_connected();
    if !connected {
        log::warn!(
            "graph has {} components; the dominant pair comes from the largest-eigenvalue component",
            graph.components().len()
        );
    }
    let (lambda_max, iterations, residual, eigvec) =
        power_iteration(graph.n(), tol, |x, y| graph.adj_mul(x, y))?;
    Ok(SpectralReport { lambda_max, iterations, residual, eigvec, connected })
}

/// Perron root of a dense nonnegative matrix.
pub fn dense_spectral_radius(m: &DMatrix<f64>, tol: f64) -> Result<SpectralReport> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(EpiError::Dimension { expected: n, got: m.ncols() });
    }
    let (lambda_max, iterations, residual, eigvec) = power_iteration(n, tol, |x, y| {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = (0..n).map(|j| m[(i, j)] * x[j]).sum();
        }
    })?;
    let irreducible = {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        if n > 0 {
            seen[0] = true;
        }
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if !seen[v] && (m[(u, v)] > 0.0 || m[(v, u)] > 0.0) {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    Ok(SpectralReport { lambda_max, iterations, residual, eigvec, connected: irreducible })
}

/// Local-stability ratio of the disease-free point given `λ_max` of the
/// adjacency matrix (ignored for the contact model, which needs its own
/// Perron root; see [`threshold_ratio`]).
pub fn ratio_from_lambda(model: &ModelSpec, lambda_max: f64) -> f64 {
    let effective = effective_beta(model) * lambda_max;
    if effective == 0.0 {
        0.0
    } else if model.delta() == 0.0 {
        f64::INFINITY
    } else {
        effective / model.delta()
    }
}

/// Infection probability per infected neighbor seen by the linearization
/// at the disease-free point.
pub fn effective_beta(model: &ModelSpec) -> f64 {
    match model.variant() {
        Variant::SisNia | Variant::SisIa | Variant::Sirs | Variant::SisGeneral => model.beta(),
        Variant::SivId => model.siv_susceptible_share() * model.beta(),
        Variant::SivVd => (1.0 - model.theta()) * model.siv_susceptible_share() * model.beta(),
    }
}

/// The variant's threshold ratio: `βλ/δ` for SIS/SIRS, scaled by the
/// susceptible share `γ/(γ+θ)` for SIV (and by `1−θ` when vaccination
/// dominates), and `λ_max(M)` for the contact model. `+∞` when `δ = 0`
/// while infection is possible.
pub fn threshold_ratio(model: &ModelSpec, graph: &Graph) -> Result<f64> {
    model.check_graph(graph)?;
    match model.contact() {
        Some(m) => Ok(dense_spectral_radius(m, 1e-12)?.lambda_max),
        None => Ok(ratio_from_lambda(model, spectral_radius(graph, 1e-12)?.lambda_max)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate, GraphKind};

    #[test]
    fn single_edge() {
        let g = generate(GraphKind::Path { n: 2 }, 0).unwrap();
        let r = spectral_radius(&g, 1e-12).unwrap();
        assert!((r.lambda_max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_leaf_star_is_sqrt_two() {
        // characteristic polynomial λ(λ² − 2)
        let g = generate(GraphKind::Star { n: 3 }, 0).unwrap();
        let r = spectral_radius(&g, 1e-10).unwrap();
        assert!((r.lambda_max - 2f64.sqrt()).abs() < 1e-10);
        assert!(r.residual < 1e-10);
        assert!(r.eigvec.iter().all(|&x| x >= 0.0));
        assert!((r.eigvec.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn complete_graphs() {
        for n in 2..=8 {
            let g = generate(GraphKind::Complete { n }, 0).unwrap();
            let r = spectral_radius(&g, 1e-12).unwrap();
            assert!((r.lambda_max - (n as f64 - 1.0)).abs() < 1e-12, "K{n}");
        }
    }

    #[test]
    fn isolated_node_has_zero_radius() {
        let g = Graph::from_edges(1, []).unwrap();
        assert_eq!(spectral_radius(&g, 1e-9).unwrap().lambda_max, 0.0);
    }

    #[test]
    fn weighted_edge_scales_radius() {
        let g = Graph::from_weighted_edges(2, [(0, 1, 0.25)]).unwrap();
        assert!((spectral_radius(&g, 1e-12).unwrap().lambda_max - 0.25).abs() < 1e-12);
    }

    #[test]
    fn disconnected_graph_is_flagged() {
        let g = Graph::from_edges(5, [(0, 1), (2, 3), (3, 4)]).unwrap();
        let r = spectral_radius(&g, 1e-12).unwrap();
        assert!(!r.connected);
        assert!((r.lambda_max - 2f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn large_graph_threshold_ratios() {
        let sis = ModelSpec::sis_nia(0.055, 0.9).unwrap();
        assert!((ratio_from_lambda(&sis, 16.159) - 0.987_494).abs() < 1e-5);
        let sis = ModelSpec::sis_nia(0.056, 0.9).unwrap();
        assert!((ratio_from_lambda(&sis, 16.159) - 1.005_449).abs() < 1e-5);
        let siv = ModelSpec::siv(Variant::SivId, 0.11, 0.9, 0.5, 0.5).unwrap();
        assert!((ratio_from_lambda(&siv, 16.232) - 0.991_956).abs() < 1e-5);
    }

    #[test]
    fn zero_recovery_is_infinite() {
        let m = ModelSpec::sis_nia(0.1, 0.0).unwrap();
        assert_eq!(ratio_from_lambda(&m, 2.0), f64::INFINITY);
        let m = ModelSpec::sis_nia(0.0, 0.0).unwrap();
        assert_eq!(ratio_from_lambda(&m, 2.0), 0.0);
    }

    #[test]
    fn siv_without_vaccination_matches_sirs() {
        let g = generate(GraphKind::Path { n: 5 }, 0).unwrap();
        let siv = ModelSpec::siv(Variant::SivId, 0.2, 0.3, 0.4, 0.0).unwrap();
        let sirs = ModelSpec::sirs(0.2, 0.3, 0.4).unwrap();
        assert_eq!(threshold_ratio(&siv, &g).unwrap(), threshold_ratio(&sirs, &g).unwrap());
    }

    #[test]
    fn contact_ratio_is_perron_root() {
        let g = generate(GraphKind::Complete { n: 3 }, 0).unwrap();
        let m = ModelSpec::contact_from_graph(&g, 0.2, 0.5).unwrap();
        let model = ModelSpec::general(m).unwrap();
        assert!((threshold_ratio(&model, &g).unwrap() - 0.9).abs() < 1e-10);
    }
}
