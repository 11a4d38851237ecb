//! Quadrature rules on simplices in barycentric coordinates.
//!
//! The exact rule is the Grundmann–Möller formula of degree `2s + 1`, which
//! has rational nodes and weights for every dimension. The nodal rule samples
//! the vertices only and is exact for degree one.

use serde::{Deserialize, Serialize};

/// Barycentric quadrature rule; weights are normalised to sum to one, so an
/// element integral is `volume * Σ w_q f(λ_q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    dim: usize,
    degree: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Which rule the scheme's nonlinear and noise loads use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureChoice {
    /// Grundmann–Möller, exact for the degree-4 nonlinear integrands.
    Exact,
    /// Vertex sampling (mass-lumped loads); breaks the discrete energy identity.
    Lumped,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// All multi-indices of length `parts` summing to `total`.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

impl QuadRule {
    /// Grundmann–Möller rule on the `dim`-simplex exact for polynomials of
    /// degree `2s + 1`.
    pub fn grundmann_moller(dim: usize, s: usize) -> Self {
        let d = 2 * s + 1;
        let n = dim;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for i in 0..=s {
            let denom = (d + n - 2 * i) as f64;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            // Weight relative to the reference simplex volume 1/n!.
            let w = sign * 2f64.powi(-(2 * s as i32)) * denom.powi(d as i32)
                / (factorial(i) * factorial(d + n - i))
                * factorial(n);
            for beta in compositions(s - i, n + 1) {
                points.push(
                    beta.iter()
                        .map(|&b| (2 * b + 1) as f64 / denom)
                        .collect(),
                );
                weights.push(w);
            }
        }
        Self {
            dim,
            degree: d,
            points,
            weights,
        }
    }

    /// Smallest Grundmann–Möller rule exact for `degree`.
    pub fn exact_for(dim: usize, degree: usize) -> Self {
        Self::grundmann_moller(dim, degree.saturating_sub(1).div_ceil(2))
    }

    /// Vertex rule, weights `1/(dim+1)`.
    pub fn nodal(dim: usize) -> Self {
        let points = (0..=dim)
            .map(|a| (0..=dim).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            dim,
            degree: 1,
            points,
            weights: vec![1.0 / (dim + 1) as f64; dim + 1],
        }
    }

    pub fn for_choice(dim: usize, choice: QuadratureChoice) -> Self {
        match choice {
            QuadratureChoice::Exact => Self::exact_for(dim, 4),
            QuadratureChoice::Lumped => Self::nodal(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Polynomial degree integrated exactly.
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Barycentric coordinates of node `q`.
    pub fn point(&self, q: usize) -> &[f64] {
        &self.points[q]
    }

    pub fn weight(&self, q: usize) -> f64 {
        self.weights[q]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points
            .iter()
            .map(Vec::as_slice)
            .zip(self.weights.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ∫_K Π λ_a^{α_a} = |K| n! Π α_a! / (|α| + n)!
    fn monomial_oracle(alpha: &[usize]) -> f64 {
        let n = alpha.len() - 1;
        let total: usize = alpha.iter().sum();
        factorial(n) * alpha.iter().map(|&a| factorial(a)).product::<f64>() / factorial(total + n)
    }

    #[test]
    fn weights_sum_to_one() {
        for dim in 1..=3 {
            for s in 0..=3 {
                let rule = QuadRule::grundmann_moller(dim, s);
                let total: f64 = rule.weights.iter().sum();
                assert!((total - 1.0).abs() < 1e-14, "dim {dim} s {s}: {total}");
                for p in &rule.points {
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn exact_rule_integrates_all_degree_five_monomials() {
        for dim in 1..=3 {
            let rule = QuadRule::exact_for(dim, 4);
            assert!(rule.degree() >= 4);
            for total in 0..=rule.degree() {
                for alpha in compositions(total, dim + 1) {
                    let q: f64 = rule
                        .iter()
                        .map(|(p, w)| {
                            w * p
                                .iter()
                                .zip(&alpha)
                                .map(|(l, &a)| l.powi(a as i32))
                                .product::<f64>()
                        })
                        .sum();
                    let exact = monomial_oracle(&alpha);
                    assert!(
                        (q - exact).abs() <= 1e-14 * exact.max(1e-3),
                        "dim {dim} alpha {alpha:?}: {q} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn nodal_rule_is_only_linear_exact() {
        let rule = QuadRule::nodal(1);
        let q: f64 = rule.iter().map(|(p, w)| w * p[0] * p[0]).sum();
        assert!((q - monomial_oracle(&[2, 0])).abs() > 0.1);
    }
}
