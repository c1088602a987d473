//! Model variants, their rate parameters and the per-node transition tables
//! shared by the exact chain and the Monte Carlo engine.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{EpiError, Result};
use crate::graph::Graph;

pub const SUSCEPTIBLE: u8 = 0;
pub const INFECTED: u8 = 1;
pub const RECOVERED: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// SIS where a recovering node can be reinfected within the same step.
    SisNia,
    /// SIS where a node that recovers stays healthy for that step.
    SisIa,
    /// SIS driven by a per-pair contact matrix.
    SisGeneral,
    Sirs,
    /// SIV, infection wins a simultaneous infection/vaccination.
    SivId,
    /// SIV, vaccination wins a simultaneous infection/vaccination.
    SivVd,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SisNia,
        Variant::SisIa,
        Variant::SisGeneral,
        Variant::Sirs,
        Variant::SivId,
        Variant::SivVd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SisNia => "sis-nia",
            Variant::SisIa => "sis-ia",
            Variant::SisGeneral => "sis-general",
            Variant::Sirs => "sirs",
            Variant::SivId => "siv-id",
            Variant::SivVd => "siv-vd",
        }
    }

    /// Number of per-node states: 2 for the SIS family, 3 otherwise.
    pub fn states_per_node(self) -> usize {
        if self.is_sis() {
            2
        } else {
            3
        }
    }

    pub fn is_sis(self) -> bool {
        matches!(self, Variant::SisNia | Variant::SisIa | Variant::SisGeneral)
    }

    pub fn is_siv(self) -> bool {
        matches!(self, Variant::SivId | Variant::SivVd)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = EpiError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EpiError::InvalidParam(format!("unknown model variant `{s}`")))
    }
}

/// Optional rate inputs; [`ModelSpec::new`] checks that the variant's
/// required fields are present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub beta: Option<f64>,
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    pub theta: Option<f64>,
    pub contact: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    variant: Variant,
    beta: f64,
    delta: f64,
    gamma: f64,
    theta: f64,
    contact: Option<DMatrix<f64>>,
}

fn check_prob(name: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(EpiError::InvalidParam(format!("{name} = {v} is not a probability")))
    }
}

impl ModelSpec {
    pub fn new(variant: Variant, rates: Rates) -> Result<Self> {
        let need = |field: &'static str, v: Option<f64>| -> Result<f64> {
            let v = v.ok_or(EpiError::MissingRate { variant: variant.name(), field })?;
            check_prob(field, v)
        };
        let mut spec = ModelSpec { variant, beta: 0.0, delta: 0.0, gamma: 0.0, theta: 0.0, contact: None };
        match variant {
            Variant::SisGeneral => {
                let rows = rates.contact.ok_or(EpiError::MissingRate {
                    variant: variant.name(),
                    field: "contact",
                })?;
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(EpiError::InvalidParam("contact matrix must be square".into()));
                }
                for (i, row) in rows.iter().enumerate() {
                    for (j, &m) in row.iter().enumerate() {
                        check_prob(&format!("contact[{i}][{j}]"), m)?;
                    }
                }
                spec.contact = Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]));
            }
            _ => {
                spec.beta = need("beta", rates.beta)?;
                spec.delta = need("delta", rates.delta)?;
                if !variant.is_sis() {
                    spec.gamma = need("gamma", rates.gamma)?;
                }
                if variant.is_siv() {
                    spec.theta = need("theta", rates.theta)?;
                    if spec.gamma == 1.0 && spec.theta == 1.0 {
                        return Err(EpiError::InvalidParam(
                            "gamma = theta = 1 makes the per-node S/R chain periodic".into(),
                        ));
                    }
                    if spec.gamma + spec.theta == 0.0 {
                        return Err(EpiError::InvalidParam(
                            "gamma + theta must be positive for a unique stationary law".into(),
                        ));
                    }
                }
            }
        }
        Ok(spec)
    }

    pub fn sis_nia(beta: f64, delta: f64) -> Result<Self> {
        Self::new(Variant::SisNia, Rates { beta: Some(beta), delta: Some(delta), ..Rates::default() })
    }

    pub fn sis_ia(beta: f64, delta: f64) -> Result<Self> {
        Self::new(Variant::SisIa, Rates { beta: Some(beta), delta: Some(delta), ..Rates::default() })
    }

    pub fn sirs(beta: f64, delta: f64, gamma: f64) -> Result<Self> {
        Self::new(
            Variant::Sirs,
            Rates { beta: Some(beta), delta: Some(delta), gamma: Some(gamma), ..Rates::default() },
        )
    }

    pub fn siv(variant: Variant, beta: f64, delta: f64, gamma: f64, theta: f64) -> Result<Self> {
        if !variant.is_siv() {
            return Err(EpiError::InvalidParam(format!("{variant} is not an SIV variant")));
        }
        Self::new(
            variant,
            Rates { beta: Some(beta), delta: Some(delta), gamma: Some(gamma), theta: Some(theta), contact: None },
        )
    }

    pub fn general(contact: DMatrix<f64>) -> Result<Self> {
        let rows = contact.row_iter().map(|r| r.iter().copied().collect()).collect();
        Self::new(Variant::SisGeneral, Rates { contact: Some(rows), ..Rates::default() })
    }

    /// Contact matrix of a (possibly weighted) graph: `beta * w_ij` off the
    /// diagonal and `1 - delta` on it.
    pub fn contact_from_graph(graph: &Graph, beta: f64, delta: f64) -> Result<DMatrix<f64>> {
        check_prob("beta", beta)?;
        check_prob("delta", delta)?;
        let mut m = graph.adjacency_dense() * beta;
        for i in 0..graph.n() {
            m[(i, i)] = 1.0 - delta;
        }
        Ok(m)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn contact(&self) -> Option<&DMatrix<f64>> {
        self.contact.as_ref()
    }

    pub fn states_per_node(&self) -> usize {
        self.variant.states_per_node()
    }

    /// The rate fields this model was built from; `ModelSpec::new(variant, rates)`
    /// reconstructs it.
    pub fn rates(&self) -> Rates {
        if let Some(m) = &self.contact {
            let rows = m.row_iter().map(|r| r.iter().copied().collect()).collect();
            return Rates { contact: Some(rows), ..Rates::default() };
        }
        let v = self.variant;
        Rates {
            beta: Some(self.beta),
            delta: Some(self.delta),
            gamma: (!v.is_sis()).then_some(self.gamma),
            theta: v.is_siv().then_some(self.theta),
            contact: None,
        }
    }

    /// Stationary susceptible probability of the decoupled S/R chain.
    pub fn siv_susceptible_share(&self) -> f64 {
        self.gamma / (self.gamma + self.theta)
    }

    /// Checks that the model can run on `graph`.
    pub fn check_graph(&self, graph: &Graph) -> Result<()> {
        if let Some(m) = &self.contact {
            if m.nrows() != graph.n() {
                return Err(EpiError::Dimension { expected: graph.n(), got: m.nrows() });
            }
        }
        Ok(())
    }

    /// Probability that node `i` escapes infection given which nodes are
    /// infected. For the contact model the node's own row (including the
    /// diagonal self-infection entry) is used.
    pub fn escape_probability(&self, graph: &Graph, i: usize, infected: impl Fn(usize) -> bool) -> f64 {
        match &self.contact {
            Some(m) => (0..m.ncols())
                .filter(|&j| infected(j))
                .map(|j| 1.0 - m[(i, j)])
                .product(),
            None => graph
                .neighbors(i)
                .iter()
                .filter(|&&(j, _)| infected(j))
                .map(|&(_, w)| 1.0 - self.beta * w)
                .product(),
        }
    }

    /// Next-step distribution `[P(S), P(I), P(R)]` of a node currently in
    /// state `current` whose infection-escape probability is `escape`.
    pub fn local_transition(&self, current: u8, escape: f64) -> [f64; 3] {
        let (d, g, th) = (self.delta, self.gamma, self.theta);
        match (self.variant, current) {
            (Variant::SisGeneral, _) => [escape, 1.0 - escape, 0.0],
            (Variant::SisNia, INFECTED) => [d * escape, 1.0 - d * escape, 0.0],
            (Variant::SisIa, INFECTED) => [d, 1.0 - d, 0.0],
            (v, SUSCEPTIBLE) if v.is_sis() || v == Variant::Sirs => [escape, 1.0 - escape, 0.0],
            (Variant::SivId, SUSCEPTIBLE) => [escape * (1.0 - th), 1.0 - escape, escape * th],
            (Variant::SivVd, SUSCEPTIBLE) => [escape * (1.0 - th), (1.0 - escape) * (1.0 - th), th],
            (_, INFECTED) => [0.0, 1.0 - d, d],
            (_, _) => [g, 0.0, 1.0 - g],
        }
    }
}
