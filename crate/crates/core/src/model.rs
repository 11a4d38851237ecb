//! Double-well potential, drift nonlinearities, energy functional and noise
//! coefficients of the stochastic Allen–Cahn equation.
//!
//! All polynomial integrals use the space's exact rule, so energies and the
//! discrete energy identity are evaluated without quadrature error.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fem::{FemSpace, Field};
use crate::linalg::CsrMatrix;
use crate::quadrature::QuadRule;

/// `Dψ(y) = (y² − 1) y`.
#[inline]
pub fn dpsi(y: f64) -> f64 {
    (y * y - 1.0) * y
}

/// Mixed nonlinearity `f(y, z) = (y² − 1)(y + z)/2`; `f(y, y) = Dψ(y)`.
#[inline]
pub fn f_mixed(y: f64, z: f64) -> f64 {
    (y * y - 1.0) * (y + z) * 0.5
}

/// `∂f/∂y (y, z) = y (y + z) + (y² − 1)/2`.
#[inline]
pub fn f_mixed_dy(y: f64, z: f64) -> f64 {
    y * (y + z) + 0.5 * (y * y - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    Zero,
    Sine,
    Rational,
}

/// Noise coefficient σ. Both non-trivial presets vanish at zero, are smooth
/// with bounded derivatives, and are Lipschitz with constant `|c|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPreset {
    pub kind: SigmaKind,
    pub amplitude: f64,
}

impl SigmaPreset {
    pub const ZERO: SigmaPreset = SigmaPreset {
        kind: SigmaKind::Zero,
        amplitude: 0.0,
    };

    pub fn sine(amplitude: f64) -> Self {
        Self {
            kind: SigmaKind::Sine,
            amplitude,
        }
    }

    pub fn rational(amplitude: f64) -> Self {
        Self {
            kind: SigmaKind::Rational,
            amplitude,
        }
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match self.kind {
            SigmaKind::Zero => 0.0,
            SigmaKind::Sine => self.amplitude * u.sin(),
            SigmaKind::Rational => self.amplitude * u / (1.0 + u * u),
        }
    }

    /// Lipschitz constant of the preset.
    pub fn lipschitz(&self) -> f64 {
        match self.kind {
            SigmaKind::Zero => 0.0,
            SigmaKind::Sine | SigmaKind::Rational => self.amplitude.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.kind == SigmaKind::Zero || self.amplitude == 0.0
    }
}

/// Energy split `𝒥(u) = ½‖∇u‖² + ψ(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub grad_part: f64,
    pub psi_part: f64,
    pub total: f64,
}

/// `ψ(u) = ¼ ∫ (u² − 1)²`, integrated exactly.
pub fn psi_value(space: &FemSpace, u: &Field) -> Result<f64> {
    space.check(u)?;
    Ok(space.integrate_pointwise(&[u], |v| {
        let w = v[0] * v[0] - 1.0;
        0.25 * w * w
    }))
}

/// `‖∇u‖²` summed element by element, so that constants give exactly 0.
fn gradient_norm_sq(space: &FemSpace, u: &Field) -> f64 {
    let mesh = space.mesh();
    let d = mesh.dim();
    let mut grad = vec![0.0; d];
    let mut total = 0.0;
    for e in 0..mesh.num_elements() {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (a, &v) in mesh.element(e).iter().enumerate() {
            for (g, da) in grad.iter_mut().zip(mesh.grad(e, a)) {
                *g += u.coeffs[v] * da;
            }
        }
        total += mesh.element_volume(e) * grad.iter().map(|g| g * g).sum::<f64>();
    }
    total
}

pub fn energy(space: &FemSpace, u: &Field) -> Result<EnergyBreakdown> {
    space.check(u)?;
    let grad_part = 0.5 * gradient_norm_sq(space, u);
    let psi_part = psi_value(space, u)?;
    Ok(EnergyBreakdown {
        grad_part,
        psi_part,
        total: grad_part + psi_part,
    })
}

/// `b_i = (f(Y, Z), φ_i)` with the space's load rule.
pub fn nonlinear_load(space: &FemSpace, y: &Field, z: &Field) -> Result<Vec<f64>> {
    nonlinear_load_with(space, space.load_rule(), y, z)
}

pub(crate) fn nonlinear_load_with(
    space: &FemSpace,
    rule: &QuadRule,
    y: &Field,
    z: &Field,
) -> Result<Vec<f64>> {
    space.check(y)?;
    space.check(z)?;
    Ok(space.load_pointwise_with(rule, &[y, z], |v| f_mixed(v[0], v[1])))
}

/// `(Dψ(u), φ_i)` with the exact rule.
pub fn dpsi_load(space: &FemSpace, u: &Field) -> Result<Vec<f64>> {
    space.check(u)?;
    Ok(space.load_pointwise_with(space.exact_rule(), &[u], |v| dpsi(v[0])))
}

/// Jacobian block `∫ ∂f/∂y(Y, Z) φ_j φ_i` with the space's load rule.
pub fn nonlinear_jacobian(space: &FemSpace, y: &Field, z: &Field) -> Result<CsrMatrix> {
    space.check(y)?;
    space.check(z)?;
    Ok(space.weighted_mass_with(space.load_rule(), &[y, z], |v| f_mixed_dy(v[0], v[1])))
}

/// `s_i = (σ(u), φ_i)`, σ evaluated at the quadrature points of the P1
/// interpolant of `u`.
pub fn sigma_load(space: &FemSpace, preset: &SigmaPreset, u: &Field) -> Result<Vec<f64>> {
    sigma_load_with(space, space.load_rule(), preset, u)
}

pub(crate) fn sigma_load_with(
    space: &FemSpace,
    rule: &QuadRule,
    preset: &SigmaPreset,
    u: &Field,
) -> Result<Vec<f64>> {
    space.check(u)?;
    if preset.is_zero() {
        return Ok(vec![0.0; space.num_dofs()]);
    }
    Ok(space.load_pointwise_with(rule, &[u], |v| preset.eval(v[0])))
}

/// `⟨𝒜(y₁) − 𝒜(y₂), y₁ − y₂⟩ = −eᵀAe − (Dψ(y₁) − Dψ(y₂), e)`.
pub fn drift_pairing(space: &FemSpace, y1: &Field, y2: &Field) -> Result<f64> {
    space.check(y1)?;
    space.check(y2)?;
    let e: Vec<f64> = y1.coeffs.iter().zip(&y2.coeffs).map(|(a, b)| a - b).collect();
    let stiff = space.stiffness().bilinear(&e, &e);
    let nonlinear = space.integrate_pointwise(&[y1, y2], |v| (dpsi(v[0]) - dpsi(v[1])) * (v[0] - v[1]));
    Ok(-stiff - nonlinear)
}

/// Weak-monotonicity gap `⟨𝒜(y₁) − 𝒜(y₂), e⟩ + ‖∇e‖² − K‖e‖²`, never positive
/// for `K ≥ 1`.
///
/// The stiffness contributions of the pairing and of `‖∇e‖²` cancel
/// identically, so they are dropped before evaluation; what remains is
/// `−∫ e² (y₁² + y₁y₂ + y₂² − 1 + K)`.
pub fn monotonicity_gap_with(space: &FemSpace, y1: &Field, y2: &Field, k: f64) -> Result<f64> {
    space.check(y1)?;
    space.check(y2)?;
    Ok(-space.integrate_pointwise(&[y1, y2], |v| {
        let (a, b) = (v[0], v[1]);
        let e = a - b;
        e * e * (a * a + a * b + b * b - 1.0 + k)
    }))
}

pub fn monotonicity_gap(space: &FemSpace, y1: &Field, y2: &Field) -> Result<f64> {
    monotonicity_gap_with(space, y1, y2, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::QuadratureChoice;
    use crate::fem::SpaceOptions;
    use crate::mesh::PeriodicMesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn scalar_nonlinearities() {
        assert_eq!(dpsi(2.0), 6.0);
        assert_eq!(f_mixed(2.0, 0.0), 3.0);
        let mut r = rng();
        for _ in 0..1000 {
            let y: f64 = r.random_range(-5.0..5.0);
            assert!((f_mixed(y, y) - dpsi(y)).abs() <= 4.0 * f64::EPSILON * dpsi(y).abs().max(1.0));
            assert_eq!(f_mixed(1.0, y), 0.0);
            // Finite-difference check of ∂f/∂y.
            let z: f64 = r.random_range(-3.0..3.0);
            let eps = 1e-6;
            let fd = (f_mixed(y + eps, z) - f_mixed(y - eps, z)) / (2.0 * eps);
            assert!((fd - f_mixed_dy(y, z)).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn psi_and_energy_reference_values() {
        let space = FemSpace::periodic(1, 1.0, 16).unwrap();
        assert!(psi_value(&space, &space.constant(1.0)).unwrap().abs() < 1e-16);
        assert!((psi_value(&space, &space.constant(0.0)).unwrap() - 0.25).abs() < 1e-15);
        assert!(energy(&space, &space.constant(1.0)).unwrap().total.abs() < 1e-14);
        assert!((energy(&space, &space.constant(0.0)).unwrap().total - 0.25).abs() < 1e-15);

        let space = FemSpace::periodic(1, 1.0, 512).unwrap();
        let u = space.interpolate(|x| (2.0 * PI * x[0]).cos());
        // ¼∫(cos² − 1)² = ¼∫sin⁴ = 3/32.
        assert!((psi_value(&space, &u).unwrap() - 3.0 / 32.0).abs() < 1e-3);
        let e = energy(&space, &u).unwrap();
        assert!((e.total - (PI * PI + 3.0 / 32.0)).abs() < 1e-2);
        assert_eq!(e.total, e.grad_part + e.psi_part);
    }

    #[test]
    fn energy_vanishes_only_at_the_wells() {
        let space = FemSpace::periodic(2, 1.0, 4).unwrap();
        assert!(energy(&space, &space.constant(-1.0)).unwrap().total.abs() < 1e-14);
        let mut r = rng();
        for _ in 0..100 {
            let u = space
                .field((0..space.num_dofs()).map(|_| r.random_range(-2.0..2.0)).collect())
                .unwrap();
            let e = energy(&space, &u).unwrap();
            assert!(e.total > 0.0 && e.grad_part >= 0.0 && e.psi_part >= 0.0);
        }
    }

    #[test]
    fn nonlinear_load_examples() {
        let space = FemSpace::periodic(1, 1.0, 2).unwrap();
        let b = nonlinear_load(&space, &space.constant(1.0), &space.constant(1.0)).unwrap();
        assert!(b.iter().all(|v| v.abs() < 1e-16));
        let b = nonlinear_load(&space, &space.constant(2.0), &space.constant(0.0)).unwrap();
        assert!(b.iter().all(|v| (v - 1.5).abs() < 1e-14), "{b:?}");

        let space = FemSpace::periodic(2, 1.0, 4).unwrap();
        let mut r = rng();
        let y = space
            .field((0..space.num_dofs()).map(|_| r.random_range(-2.0..2.0)).collect())
            .unwrap();
        let b = nonlinear_load(&space, &y, &y).unwrap();
        let c = dpsi_load(&space, &y).unwrap();
        for (x, z) in b.iter().zip(&c) {
            assert!((x - z).abs() < 1e-13);
        }
    }

    #[test]
    fn nonlinear_jacobian_matches_finite_differences() {
        let space = FemSpace::periodic(1, 1.0, 6).unwrap();
        let mut r = rng();
        let mut y = space
            .field((0..6).map(|_| r.random_range(-1.5..1.5)).collect())
            .unwrap();
        let z = space
            .field((0..6).map(|_| r.random_range(-1.5..1.5)).collect())
            .unwrap();
        let jac = nonlinear_jacobian(&space, &y, &z).unwrap();
        let eps = 1e-6;
        for j in 0..6 {
            y.coeffs[j] += eps;
            let bp = nonlinear_load(&space, &y, &z).unwrap();
            y.coeffs[j] -= 2.0 * eps;
            let bm = nonlinear_load(&space, &y, &z).unwrap();
            y.coeffs[j] += eps;
            for i in 0..6 {
                let fd = (bp[i] - bm[i]) / (2.0 * eps);
                assert!((fd - jac.get(i, j)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sigma_load_examples() {
        let space = FemSpace::periodic(1, 1.0, 8).unwrap();
        let u = space.constant(0.7);
        assert!(sigma_load(&space, &SigmaPreset::ZERO, &u).unwrap().iter().all(|v| *v == 0.0));
        for p in [SigmaPreset::sine(0.5), SigmaPreset::rational(2.0)] {
            let s = sigma_load(&space, &p, &space.constant(0.0)).unwrap();
            assert!(s.iter().all(|v| *v == 0.0));
        }
        let s = sigma_load(&space, &SigmaPreset::sine(1.0), &space.constant(PI / 2.0)).unwrap();
        assert!(s.iter().all(|v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn sigma_presets_are_lipschitz() {
        let mut r = rng();
        for p in [SigmaPreset::sine(0.5), SigmaPreset::rational(1.5)] {
            for _ in 0..10_000 {
                let a: f64 = r.random_range(-10.0..10.0);
                let b: f64 = r.random_range(-10.0..10.0);
                assert!((p.eval(a) - p.eval(b)).abs() <= p.lipschitz() * (a - b).abs() + 1e-15);
            }
        }
    }

    #[test]
    fn monotonicity_gap_is_nonpositive() {
        let mut r = rng();
        for (d, n) in [(1, 16), (2, 4)] {
            let space = FemSpace::periodic(d, 1.0, n).unwrap();
            let nd = space.num_dofs();
            let y = space.field((0..nd).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
            assert_eq!(monotonicity_gap(&space, &y, &y).unwrap(), 0.0);
            for _ in 0..200 {
                let y1 = space.field((0..nd).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
                let y2 = space.field((0..nd).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
                let e2 = space.norms(&space.field(
                    y1.coeffs.iter().zip(&y2.coeffs).map(|(a, b)| a - b).collect(),
                ).unwrap()).unwrap().l2.powi(2);
                let g = monotonicity_gap(&space, &y1, &y2).unwrap();
                assert!(g <= 1e-12 * (1.0 + e2));
                // Agrees with the definition through the drift pairing.
                let full = drift_pairing(&space, &y1, &y2).unwrap()
                    + space.stiffness().bilinear(
                        &y1.coeffs.iter().zip(&y2.coeffs).map(|(a, b)| a - b).collect::<Vec<_>>(),
                        &y1.coeffs.iter().zip(&y2.coeffs).map(|(a, b)| a - b).collect::<Vec<_>>(),
                    )
                    - e2;
                assert!((full - g).abs() < 1e-9 * (1.0 + g.abs()));
            }
        }
        // Small perturbation: gap is O(ε²).
        let space = FemSpace::periodic(1, 1.0, 16).unwrap();
        let y2 = space.interpolate(|x| (2.0 * PI * x[0]).cos());
        let mut y1 = y2.clone();
        y1.coeffs[3] += 1e-3;
        let g = monotonicity_gap(&space, &y1, &y2).unwrap();
        assert!(g <= 0.0 && g.abs() < 1e-6 * 10.0);
    }

    #[test]
    fn gateaux_derivative_consistency() {
        let space = FemSpace::periodic(1, 1.0, 16).unwrap();
        let mut r = rng();
        let u = space.field((0..16).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap();
        let v = space.field((0..16).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let exact = space.stiffness().bilinear(&u.coeffs, &v.coeffs)
            + crate::linalg::dot(&dpsi_load(&space, &u).unwrap(), &v.coeffs);
        let err = |eps: f64| {
            let plus = space.field(u.coeffs.iter().zip(&v.coeffs).map(|(a, b)| a + eps * b).collect()).unwrap();
            let minus = space.field(u.coeffs.iter().zip(&v.coeffs).map(|(a, b)| a - eps * b).collect()).unwrap();
            let fd = (energy(&space, &plus).unwrap().total - energy(&space, &minus).unwrap().total) / (2.0 * eps);
            (fd - exact).abs()
        };
        let (e3, e4) = (err(1e-3), err(1e-4));
        assert!(e4 < e3 / 50.0, "{e3} {e4}");
    }

    #[test]
    fn lumped_quadrature_changes_the_load() {
        let mesh = PeriodicMesh::build(1, 1.0, 8).unwrap();
        let lumped = FemSpace::assemble(
            mesh,
            SpaceOptions { quadrature: QuadratureChoice::Lumped, solver: None },
        )
        .unwrap();
        let exact = FemSpace::periodic(1, 1.0, 8).unwrap();
        let g = |x: &[f64]| 1.2 * (2.0 * PI * x[0]).cos();
        let yl = lumped.interpolate(g);
        let ye = exact.interpolate(g);
        let bl = nonlinear_load(&lumped, &yl, &yl).unwrap();
        let be = nonlinear_load(&exact, &ye, &ye).unwrap();
        assert!(bl.iter().zip(&be).any(|(a, b)| (a - b).abs() > 1e-4));
        assert_eq!(lumped.quad_degree(), 1);
        assert!(exact.quad_degree() >= 4);
    }
}
