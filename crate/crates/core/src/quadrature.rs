//! Fixed Gauss rules used by the conditional-moment oracles and the MPPLE integrals.

use gauss_quad::{GaussHermite, GaussLegendre};
use std::f64::consts::{PI, SQRT_2};
use std::num::NonZeroUsize;

/// Gauss–Hermite rule rescaled for expectations under a normal law.
#[derive(Debug, Clone)]
pub struct NormalExpectation {
    nodes: Vec<(f64, f64)>,
}

impl NormalExpectation {
    pub fn new(points: usize) -> Self {
        let rule = GaussHermite::new(NonZeroUsize::new(points.max(1)).unwrap());
        let norm = PI.sqrt();
        let nodes = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (SQRT_2 * x, w / norm))
            .collect();
        Self { nodes }
    }

    /// `E[f(X)]` for `X ~ N(mean, sd²)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, sd: f64, mut f: F) -> f64 {
        self.nodes.iter().map(|&(z, w)| w * f(mean + sd * z)).sum()
    }
}

/// Gauss–Legendre rule on `[-1, 1]`, mapped onto arbitrary panels.
#[derive(Debug, Clone)]
pub struct Legendre {
    nodes: Vec<(f64, f64)>,
}

impl Legendre {
    pub fn new(points: usize) -> Self {
        let rule = GaussLegendre::new(NonZeroUsize::new(points.max(1)).unwrap());
        Self {
            nodes: rule.as_node_weight_pairs().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights for the panel `[a, b]`.
    pub fn panel(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().map(move |&(x, w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.panel(a, b).map(|(x, w)| w * f(x)).sum()
    }
}
