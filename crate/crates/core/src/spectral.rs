//! Fourier–Galerkin realization of the time-discrete scheme on the periodic
//! interval `[0, R)`.
//!
//! A field is `u(x) = Σ_{|m| ≤ N} c_m e^{2πi m x / R}`, stored with `c_m` at
//! index `m + N`. Nonlinear terms are evaluated pseudo-spectrally on a
//! collocation grid of `G > 2·pad·N` points; for `G > 4N` all products up to
//! quartic order are alias-free on the retained modes.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::error::{Result, SacError};
use crate::fem::{FemSpace, Field};
use crate::model::{f_mixed, f_mixed_dy, EnergyBreakdown, SigmaPreset};
use crate::stepper::SchemeConfig;

const INNER_REL_TOL: f64 = 1e-12;
const INNER_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct SpectralSpaceId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralField {
    pub space_id: SpectralSpaceId,
    pub coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn modes(&self) -> usize {
        self.coeffs.len() / 2
    }

    /// `c_m`, zero outside the retained band.
    pub fn coeff(&self, m: i64) -> Complex64 {
        let n = self.modes() as i64;
        if m.abs() > n {
            Complex64::new(0.0, 0.0)
        } else {
            self.coeffs[(m + n) as usize]
        }
    }

    /// `max_m |c_m − conj(c_{−m})|`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.modes() as i64;
        (0..=n)
            .map(|m| (self.coeff(m) - self.coeff(-m).conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Largest coefficient magnitude in the upper half of the band relative
    /// to the largest overall; a resolution diagnostic.
    pub fn tail_ratio(&self) -> f64 {
        let n = self.modes() as i64;
        let max_all = self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if max_all == 0.0 {
            return 0.0;
        }
        let tail = (n / 2 + 1..=n)
            .map(|m| self.coeff(m).norm().max(self.coeff(-m).norm()))
            .fold(0.0, f64::max);
        tail / max_all
    }
}

#[derive(Clone)]
pub struct SpectralSpace {
    length: f64,
    modes: usize,
    pad: f64,
    grid: usize,
    id: SpectralSpaceId,
    lambda: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectralSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralSpace")
            .field("length", &self.length)
            .field("modes", &self.modes)
            .field("pad", &self.pad)
            .field("grid", &self.grid)
            .finish()
    }
}

/// Smallest `2^a 3^b 5^c` that is at least `n`.
fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

impl SpectralSpace {
    pub fn new(length: f64, modes: usize, pad: f64) -> Result<Self> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(SacError::Config(format!("R must be positive (got {length})")));
        }
        if modes == 0 {
            return Err(SacError::Config("spectral_modes must be positive".into()));
        }
        if !(pad >= 1.5) || !pad.is_finite() {
            return Err(SacError::Config(format!("spectral_pad must be at least 1.5 (got {pad})")));
        }
        let grid = smooth_size((2.0 * pad * modes as f64).ceil() as usize + 1);
        let mut planner = FftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(grid);
        let inverse = planner.plan_fft_inverse(grid);
        let lambda = (-(modes as i64)..=modes as i64)
            .map(|m| {
                let w = 2.0 * std::f64::consts::PI * m as f64 / length;
                w * w
            })
            .collect();
        let id = SpectralSpaceId(
            length.to_bits().rotate_left(17) ^ (modes as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                ^ (grid as u64) << 40,
        );
        Ok(Self {
            length,
            modes,
            pad,
            grid,
            id,
            lambda,
            forward,
            inverse,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn pad(&self) -> f64 {
        self.pad
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn id(&self) -> SpectralSpaceId {
        self.id
    }

    /// Whether quartic products are alias-free on the retained modes.
    pub fn is_dealiased(&self) -> bool {
        self.grid > 4 * self.modes
    }

    /// `λ_m = (2πm/R)²` indexed like the coefficients.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.lambda
    }

    pub fn check(&self, u: &SpectralField) -> Result<()> {
        if u.space_id != self.id || u.coeffs.len() != 2 * self.modes + 1 {
            return Err(SacError::Structure(
                "spectral field is not bound to this space".into(),
            ));
        }
        Ok(())
    }

    pub fn field(&self, coeffs: Vec<Complex64>) -> Result<SpectralField> {
        if coeffs.len() != 2 * self.modes + 1 {
            return Err(SacError::Structure(format!(
                "{} coefficients for {} modes",
                coeffs.len(),
                self.modes
            )));
        }
        Ok(SpectralField {
            space_id: self.id,
            coeffs,
        })
    }

    pub fn zero(&self) -> SpectralField {
        self.constant(0.0)
    }

    pub fn constant(&self, c: f64) -> SpectralField {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); 2 * self.modes + 1];
        coeffs[self.modes] = Complex64::new(c, 0.0);
        SpectralField {
            space_id: self.id,
            coeffs,
        }
    }

    /// Truncated Fourier interpolant of `g` sampled on the collocation grid.
    pub fn from_function(&self, g: impl Fn(f64) -> f64) -> SpectralField {
        let h = self.length / self.grid as f64;
        let vals: Vec<f64> = (0..self.grid).map(|i| g(i as f64 * h)).collect();
        let mut u = SpectralField {
            space_id: self.id,
            coeffs: self.from_grid(&vals),
        };
        symmetrize(&mut u.coeffs);
        u
    }

    /// Collocation coordinates `x_g = g R / G`.
    pub fn grid_points(&self) -> Vec<f64> {
        let h = self.length / self.grid as f64;
        (0..self.grid).map(|i| i as f64 * h).collect()
    }

    fn to_grid_complex(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        let n = self.modes as i64;
        let g = self.grid as i64;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.grid];
        for m in -n..=n {
            buf[m.rem_euclid(g) as usize] = coeffs[(m + n) as usize];
        }
        self.inverse.process(&mut buf);
        buf
    }

    fn from_grid_complex(&self, mut buf: Vec<Complex64>) -> Vec<Complex64> {
        self.forward.process(&mut buf);
        let n = self.modes as i64;
        let g = self.grid as i64;
        let scale = 1.0 / self.grid as f64;
        (-n..=n).map(|m| buf[m.rem_euclid(g) as usize] * scale).collect()
    }

    /// Real values on the collocation grid.
    pub fn to_grid(&self, u: &SpectralField) -> Vec<f64> {
        self.to_grid_complex(&u.coeffs).into_iter().map(|z| z.re).collect()
    }

    /// Retained Fourier coefficients of grid values.
    pub fn from_grid(&self, vals: &[f64]) -> Vec<Complex64> {
        self.from_grid_complex(vals.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    /// Point evaluation of the truncated series.
    pub fn eval(&self, u: &SpectralField, x: f64) -> f64 {
        let n = self.modes as i64;
        let theta = 2.0 * std::f64::consts::PI * x / self.length;
        let mut s = u.coeff(0).re;
        for m in 1..=n {
            let e = Complex64::from_polar(1.0, theta * m as f64);
            s += 2.0 * (u.coeff(m) * e).re;
        }
        s
    }

    /// `R Σ conj(a_m) b_m`, real part: the L² inner product.
    pub fn inner(&self, a: &SpectralField, b: &SpectralField) -> f64 {
        self.length * re_dot(&a.coeffs, &b.coeffs)
    }

    pub fn l2_norm(&self, u: &SpectralField) -> f64 {
        self.inner(u, u).max(0.0).sqrt()
    }

    /// `‖∇u‖²` by Parseval.
    pub fn grad_norm_sq(&self, u: &SpectralField) -> f64 {
        self.length
            * u.coeffs
                .iter()
                .zip(&self.lambda)
                .map(|(c, l)| l * c.norm_sqr())
                .sum::<f64>()
    }

    /// `(‖a − b‖², ‖∇(a − b)‖²)`.
    pub fn difference_norms_sq(&self, a: &SpectralField, b: &SpectralField) -> (f64, f64) {
        let mut l2 = 0.0;
        let mut h1 = 0.0;
        for ((x, y), l) in a.coeffs.iter().zip(&b.coeffs).zip(&self.lambda) {
            let d = (x - y).norm_sqr();
            l2 += d;
            h1 += l * d;
        }
        (self.length * l2, self.length * h1)
    }

    /// Grid quadrature `R/G Σ g(u(x_g), v(x_g), …)`; exact for
    /// polynomials of total degree below `G` in the coefficients' band.
    pub fn integrate_pointwise(&self, fields: &[&SpectralField], g: impl Fn(&[f64]) -> f64) -> f64 {
        let grids: Vec<Vec<f64>> = fields.iter().map(|u| self.to_grid(u)).collect();
        let mut vals = vec![0.0; fields.len()];
        let mut s = 0.0;
        for i in 0..self.grid {
            for (v, gr) in vals.iter_mut().zip(&grids) {
                *v = gr[i];
            }
            s += g(&vals);
        }
        s * self.length / self.grid as f64
    }

    pub fn energy(&self, u: &SpectralField) -> EnergyBreakdown {
        let grad_part = 0.5 * self.grad_norm_sq(u);
        let psi_part = 0.25 * self.integrate_pointwise(&[u], |v| (v[0] * v[0] - 1.0).powi(2));
        EnergyBreakdown {
            grad_part,
            psi_part,
            total: grad_part + psi_part,
        }
    }

    /// `P_N g(u_1, …)` evaluated on the grid.
    fn project_pointwise(&self, fields: &[&[f64]], g: impl Fn(&[f64]) -> f64) -> Vec<Complex64> {
        let mut vals = vec![0.0; fields.len()];
        let buf: Vec<Complex64> = (0..self.grid)
            .map(|i| {
                for (v, gr) in vals.iter_mut().zip(fields) {
                    *v = gr[i];
                }
                Complex64::new(g(&vals), 0.0)
            })
            .collect();
        self.from_grid_complex(buf)
    }
}

fn re_dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// Enforces `c_{−m} = conj(c_m)` and a real mean.
fn symmetrize(c: &mut [Complex64]) {
    let n = c.len() / 2;
    c[n].im = 0.0;
    for m in 1..=n {
        let avg = 0.5 * (c[n + m] + c[n - m].conj());
        c[n + m] = avg;
        c[n - m] = avg.conj();
    }
}

#[derive(Debug, Clone)]
pub struct SpectralOutcome {
    pub next: SpectralField,
    pub newton_iters: usize,
    pub residual_norm: f64,
    pub residual_scale: f64,
    pub picard_fallback: bool,
}

/// Reusable per-(space, config) state for spectral stepping.
#[derive(Debug, Clone)]
pub struct SpectralStepper<'a> {
    space: &'a SpectralSpace,
    cfg: SchemeConfig,
    k: f64,
    /// `1 + k λ_m`.
    diag: Vec<f64>,
    reaction: bool,
}

impl<'a> SpectralStepper<'a> {
    pub fn new(space: &'a SpectralSpace, cfg: SchemeConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.time_step();
        let diag = space.lambda.iter().map(|l| 1.0 + k * l).collect();
        Ok(Self {
            space,
            cfg,
            k,
            diag,
            reaction: true,
        })
    }

    /// Drops the nonlinearity, leaving the diagonal heat-equation solve.
    pub fn without_reaction(mut self) -> Self {
        self.reaction = false;
        self
    }

    pub fn space(&self) -> &'a SpectralSpace {
        self.space
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.cfg
    }

    pub fn time_step(&self) -> f64 {
        self.k
    }

    fn norm(&self, c: &[Complex64]) -> f64 {
        (self.space.length * re_dot(c, c)).max(0.0).sqrt()
    }

    /// Residual of the Galerkin system at `x` plus the grid values of `x`.
    fn residual(
        &self,
        x: &[Complex64],
        prev_grid: &[f64],
        rhs: &[Complex64],
    ) -> (Vec<Complex64>, Vec<f64>) {
        let grid: Vec<f64> = self.space.to_grid_complex(x).into_iter().map(|z| z.re).collect();
        let mut r: Vec<Complex64> = (0..x.len()).map(|i| self.diag[i] * x[i] - rhs[i]).collect();
        if self.reaction {
            let nl = self
                .space
                .project_pointwise(&[&grid, prev_grid], |v| f_mixed(v[0], v[1]));
            for (ri, n) in r.iter_mut().zip(&nl) {
                *ri += self.k * n;
            }
        }
        (r, grid)
    }

    fn apply_jacobian(&self, weight: &[f64], d: &[Complex64]) -> Vec<Complex64> {
        let mut g = self.space.to_grid_complex(d);
        for (z, w) in g.iter_mut().zip(weight) {
            *z *= *w;
        }
        let p = self.space.from_grid_complex(g);
        (0..d.len()).map(|i| self.diag[i] * d[i] + self.k * p[i]).collect()
    }

    /// Preconditioned CG for the Hermitian Jacobian with grid weight `w`.
    fn solve_jacobian(&self, weight: &[f64], b: &[Complex64]) -> Option<Vec<Complex64>> {
        let mean = weight.iter().sum::<f64>() / weight.len() as f64;
        let precond: Vec<f64> = self.diag.iter().map(|d| d + self.k * mean).collect();
        if precond.iter().any(|p| !(*p > 0.0)) {
            return None;
        }
        let bnorm = re_dot(b, b).sqrt();
        let mut x = vec![Complex64::new(0.0, 0.0); b.len()];
        if bnorm == 0.0 {
            return Some(x);
        }
        let mut r = b.to_vec();
        let mut z: Vec<Complex64> = r.iter().zip(&precond).map(|(r, p)| r / p).collect();
        let mut p = z.clone();
        let mut rz = re_dot(&r, &z);
        for _ in 0..INNER_MAX_ITER {
            let ap = self.apply_jacobian(weight, &p);
            let pap = re_dot(&p, &ap);
            if !(pap > 0.0) {
                return None;
            }
            let alpha = rz / pap;
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if re_dot(&r, &r).sqrt() <= INNER_REL_TOL * bnorm {
                return Some(x);
            }
            z = r.iter().zip(&precond).map(|(r, p)| r / p).collect();
            let rz_new = re_dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..p.len() {
                p[i] = z[i] + beta * p[i];
            }
        }
        Some(x)
    }

    pub fn solve(&self, prev: &SpectralField, dw: f64) -> Result<SpectralOutcome> {
        self.space.check(prev)?;
        let prev_grid = self.space.to_grid(prev);
        let mut rhs = prev.coeffs.clone();
        if !self.cfg.sigma.is_zero() && dw != 0.0 {
            let sigma = self.cfg.sigma;
            let noise = self.space.project_pointwise(&[&prev_grid], |v| sigma.eval(v[0]));
            for (r, s) in rhs.iter_mut().zip(&noise) {
                *r += dw * s;
            }
        }
        let scale = 1.0 + self.space.l2_norm(prev);
        let target = self.cfg.newton_tol * scale;
        let mut x = prev.coeffs.clone();
        let (mut r, mut grid) = self.residual(&x, &prev_grid, &rhs);
        let mut rnorm = self.norm(&r);
        let mut iters = 0;
        let mut picard = false;
        while rnorm > target {
            if iters >= self.cfg.newton_max_iter {
                return Err(SacError::StepFailure {
                    iterations: iters,
                    residual: rnorm,
                });
            }
            iters += 1;
            let neg_r: Vec<Complex64> = r.iter().map(|v| -v).collect();
            let weight: Vec<f64> = grid
                .iter()
                .zip(&prev_grid)
                .map(|(&y, &z)| if self.reaction { f_mixed_dy(y, z) } else { 0.0 })
                .collect();
            let delta = match self.solve_jacobian(&weight, &neg_r) {
                Some(d) => d,
                None => {
                    picard = true;
                    neg_r.iter().zip(&self.diag).map(|(r, d)| r / d).collect()
                }
            };
            let mut alpha = 1.0;
            let mut halvings = 0;
            loop {
                let mut trial: Vec<Complex64> =
                    x.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
                symmetrize(&mut trial);
                let (rt, gt) = self.residual(&trial, &prev_grid, &rhs);
                let rtn = self.norm(&rt);
                if rtn < rnorm || halvings >= self.cfg.damping {
                    x = trial;
                    r = rt;
                    grid = gt;
                    rnorm = rtn;
                    break;
                }
                alpha *= 0.5;
                halvings += 1;
            }
        }
        symmetrize(&mut x);
        Ok(SpectralOutcome {
            next: SpectralField {
                space_id: self.space.id,
                coeffs: x,
            },
            newton_iters: iters,
            residual_norm: rnorm,
            residual_scale: scale,
            picard_fallback: picard,
        })
    }

    pub fn step(&self, prev: &SpectralField, dw: f64) -> Result<SpectralField> {
        Ok(self.solve(prev, dw)?.next)
    }
}

/// One step of the Galerkin-truncated time-discrete scheme.
pub fn spectral_step(
    space: &SpectralSpace,
    cfg: &SchemeConfig,
    prev: &SpectralField,
    dw: f64,
) -> Result<SpectralField> {
    SpectralStepper::new(space, *cfg)?.step(prev, dw)
}

/// `|LHS − RHS|` of the discrete energy identity in the truncated space,
/// with `w = −Δ X + P_N f(X, X_prev)`.
pub fn spectral_identity_residual(
    space: &SpectralSpace,
    prev: &SpectralField,
    next: &SpectralField,
    k: f64,
    dw: f64,
    sigma: &SigmaPreset,
) -> Result<f64> {
    space.check(prev)?;
    space.check(next)?;
    let pg = space.to_grid(prev);
    let ng = space.to_grid(next);
    let nl = space.project_pointwise(&[&ng, &pg], |v| f_mixed(v[0], v[1]));
    let w: Vec<Complex64> = (0..nl.len())
        .map(|i| space.lambda[i] * next.coeffs[i] + nl[i])
        .collect();
    let (_, grad_increment) = space.difference_norms_sq(next, prev);
    let square = space.integrate_pointwise(&[next, prev], |v| (v[0] * v[0] - v[1] * v[1]).powi(2));
    let lhs = space.energy(next).total - space.energy(prev).total
        + 0.5 * grad_increment
        + 0.25 * square
        + k * space.length * re_dot(&w, &w);
    let rhs = if sigma.is_zero() {
        0.0
    } else {
        let s = space.project_pointwise(&[&pg], |v| sigma.eval(v[0]));
        dw * space.length * re_dot(&s, &w)
    };
    Ok((lhs - rhs).abs())
}

/// Nodal values of the truncated series at the dofs of a 1D mesh.
pub fn evaluate_on_mesh(u: &SpectralField, spectral: &SpectralSpace, space: &FemSpace) -> Result<Field> {
    spectral.check(u)?;
    let mesh = space.mesh();
    if mesh.dim() != 1 {
        return Err(SacError::Structure(format!(
            "spectral fields live on d = 1 meshes (got d = {})",
            mesh.dim()
        )));
    }
    if (mesh.length() - spectral.length()).abs() > 1e-14 * spectral.length() {
        return Err(SacError::Structure(format!(
            "period mismatch: mesh R = {}, spectral R = {}",
            mesh.length(),
            spectral.length()
        )));
    }
    let coeffs = (0..space.num_dofs())
        .map(|i| spectral.eval(u, mesh.vertex(i)[0]))
        .collect();
    space.field(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cfg(steps: usize, horizon: f64) -> SchemeConfig {
        SchemeConfig {
            horizon,
            steps,
            ..SchemeConfig::default()
        }
    }

    #[test]
    fn grid_sizes_are_smooth_and_dealiased() {
        assert_eq!(smooth_size(513), 540);
        assert_eq!(smooth_size(7), 8);
        let s = SpectralSpace::new(1.0, 128, 2.0).unwrap();
        assert_eq!(s.grid_size(), 540);
        assert!(s.is_dealiased());
        let s = SpectralSpace::new(1.0, 16, 1.5).unwrap();
        assert!(!s.is_dealiased());
        assert!(SpectralSpace::new(1.0, 16, 1.0).is_err());
        assert!(SpectralSpace::new(0.0, 16, 2.0).is_err());
        assert!(SpectralSpace::new(1.0, 0, 2.0).is_err());
    }

    #[test]
    fn transforms_round_trip() {
        let s = SpectralSpace::new(2.0, 8, 2.0).unwrap();
        let u = s.from_function(|x| (PI * x).cos() + 0.25 * (3.0 * PI * x).sin());
        assert!((u.coeff(1).re - 0.5).abs() < 1e-14);
        assert!((u.coeff(3).im + 0.125).abs() < 1e-14);
        let back = s.from_grid(&s.to_grid(&u));
        for (a, b) in back.iter().zip(&u.coeffs) {
            assert!((a - b).norm() < 1e-15);
        }
        assert!((s.eval(&u, 0.3) - ((0.3 * PI).cos() + 0.25 * (0.9 * PI).sin())).abs() < 1e-14);
        assert!(u.symmetry_defect() < 1e-15);
    }

    #[test]
    fn parseval_norms() {
        let s = SpectralSpace::new(1.0, 8, 2.0).unwrap();
        let u = s.from_function(|x| (2.0 * PI * x).cos());
        assert!((s.l2_norm(&u).powi(2) - 0.5).abs() < 1e-14);
        assert!((s.grad_norm_sq(&u) - 2.0 * PI * PI).abs() < 1e-12);
        // Reference energy of cos(2πx) on [0, 1): π² + 3/32.
        assert!((s.energy(&u).total - (PI * PI + 3.0 / 32.0)).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_and_constant_step() {
        let s = SpectralSpace::new(1.0, 16, 2.0).unwrap();
        let one = s.constant(1.0);
        let next = spectral_step(&s, &cfg(10, 0.1), &one, 0.0).unwrap();
        assert_eq!(next, one);
        // c + 0.1 (c² − 1)(c + 2)/2 = 2 by bisection.
        let g = |c: f64| c - 2.0 + 0.1 * (c * c - 1.0) * (c + 2.0) / 2.0;
        let (mut lo, mut hi) = (1.0, 2.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        let next = spectral_step(&s, &cfg(10, 1.0), &s.constant(2.0), 0.0).unwrap();
        assert!((next.coeff(0).re - 0.5 * (lo + hi)).abs() < 1e-10);
        assert!(next.coeffs.iter().enumerate().all(|(i, c)| i == 16 || c.norm() < 1e-14));
    }

    #[test]
    fn linear_regime_decays_by_resolvent() {
        let s = SpectralSpace::new(1.0, 8, 2.0).unwrap();
        let u = s.from_function(|x| (6.0 * PI * x).cos() + 0.5 * (2.0 * PI * x).sin());
        let stepper = SpectralStepper::new(&s, cfg(10, 0.1)).unwrap().without_reaction();
        let next = stepper.step(&u, 0.0).unwrap();
        for m in [-3i64, -1, 1, 3] {
            let factor = 1.0 / (1.0 + 0.01 * (2.0 * PI * m as f64).powi(2));
            assert!((next.coeff(m) - u.coeff(m) * factor).norm() < 1e-15);
        }
    }

    #[test]
    fn reality_and_identity_are_preserved() {
        let s = SpectralSpace::new(1.0, 32, 2.0).unwrap();
        let mut c = cfg(64, 0.25);
        c.sigma = SigmaPreset::sine(0.5);
        let stepper = SpectralStepper::new(&s, c).unwrap();
        let mut u = s.from_function(|x| (2.0 * PI * x).cos() + 0.2 * (4.0 * PI * x).sin());
        let path = crate::stochastic::sample_path(3, 0, 0.25, 64).unwrap();
        for &dw in path.increments.iter().take(10) {
            let next = stepper.step(&u, dw).unwrap();
            assert!(next.symmetry_defect() < 1e-13);
            let res = spectral_identity_residual(&s, &u, &next, c.time_step(), dw, &c.sigma).unwrap();
            assert!(res < 1e-10, "identity residual {res}");
            u = next;
        }
    }

    #[test]
    fn deterministic_flow_dissipates() {
        let s = SpectralSpace::new(1.0, 16, 2.0).unwrap();
        let stepper = SpectralStepper::new(&s, cfg(40, 0.1)).unwrap();
        let mut u = s.from_function(|x| (2.0 * PI * x).cos());
        let mut e = s.energy(&u).total;
        for _ in 0..40 {
            u = stepper.step(&u, 0.0).unwrap();
            let en = s.energy(&u).total;
            assert!(en < e);
            e = en;
        }
    }

    #[test]
    fn mesh_evaluation() {
        let s = SpectralSpace::new(1.0, 8, 2.0).unwrap();
        let fem = FemSpace::periodic(1, 1.0, 32).unwrap();
        let c = evaluate_on_mesh(&s.constant(0.7), &s, &fem).unwrap();
        assert!(c.coeffs.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let u = s.from_function(|x| (2.0 * PI * x).cos());
        let f = evaluate_on_mesh(&u, &s, &fem).unwrap();
        for i in 0..32 {
            assert!((f.coeffs[i] - (2.0 * PI * i as f64 / 32.0).cos()).abs() < 1e-13);
        }
        let other = FemSpace::periodic(1, 2.0, 32).unwrap();
        assert!(evaluate_on_mesh(&u, &s, &other).is_err());
    }

    #[test]
    fn parseval_matches_mesh_norm_to_second_order() {
        let s = SpectralSpace::new(1.0, 8, 2.0).unwrap();
        let u = s.from_function(|x| (2.0 * PI * x).cos() + 0.5 * (4.0 * PI * x).sin());
        let exact = s.l2_norm(&u).powi(2);
        let err = |n: usize| {
            let fem = FemSpace::periodic(1, 1.0, n).unwrap();
            let f = evaluate_on_mesh(&u, &s, &fem).unwrap();
            (fem.norms(&f).unwrap().l2.powi(2) - exact).abs()
        };
        let (e1, e2) = (err(32), err(64));
        assert!(e1 < 1e-2);
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }
}
