//! Fully discrete structure-preserving scheme: one implicit Euler–Maruyama
//! step per time level with the mixed nonlinearity `f(Yʲ, Yʲ⁻¹)`.
//!
//! The step solves `F(Y) = M(Y − Y_prev) + k[A Y + N(Y, Y_prev)] − ΔW s(Y_prev) = 0`
//! with `N_i = (f(Y, Y_prev), φ_i)` and `s_i = (σ(Y_prev), φ_i)` by Newton's
//! method on the exact Jacobian `M + kA + k ∂N/∂Y`, using residual-halving
//! damping. If the Jacobian cannot be factored the step falls back to a
//! Picard iteration preconditioned by `M + kA`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SacError};
use crate::fem::{FemSpace, Field};
use crate::linalg::{dot, norm2, CsrMatrix, SymmetricSolver};
use crate::model::{
    energy, nonlinear_jacobian, nonlinear_load, nonlinear_load_with, sigma_load,
    sigma_load_with, EnergyBreakdown, SigmaPreset,
};

/// How the initial datum is transferred to the finite element space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitialTransfer {
    /// `Y⁰ = 𝒫_{L²} x`.
    #[default]
    Project,
    /// Nodal interpolation, for sensitivity studies.
    Interpolate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    /// Time horizon `T`.
    pub horizon: f64,
    /// Number of steps `J`, `k = T / J`.
    pub steps: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Maximum number of step halvings per Newton iteration.
    pub damping: usize,
    pub sigma: SigmaPreset,
    /// Keep every `record_stride`-th field in a trajectory (0 keeps none).
    pub record_stride: usize,
    pub y0: InitialTransfer,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            horizon: 0.25,
            steps: 256,
            newton_tol: 1e-12,
            newton_max_iter: 30,
            damping: 8,
            sigma: SigmaPreset::ZERO,
            record_stride: 0,
            y0: InitialTransfer::Project,
        }
    }
}

impl SchemeConfig {
    pub fn time_step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(SacError::Config(format!("T must be positive (got {})", self.horizon)));
        }
        if self.steps > 0 && !(self.time_step() < 1.0) {
            return Err(SacError::Config(format!(
                "time step k = T/J = {} must be below 1",
                self.time_step()
            )));
        }
        if !(self.newton_tol >= 1e-14) {
            return Err(SacError::Config(format!(
                "newton_tol must be at least 1e-14 (got {})",
                self.newton_tol
            )));
        }
        if self.newton_max_iter == 0 {
            return Err(SacError::Config("newton_max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub newton_iters: usize,
    pub residual_norm: f64,
    /// Newton residual scale `1 + ‖M Y_prev‖`.
    pub residual_scale: f64,
    pub picard_fallback: bool,
    pub energy: EnergyBreakdown,
    pub identity_residual: f64,
    pub increment_l2: f64,
}

/// The terms of the per-step discrete energy identity, all integrated
/// exactly. The identity states `lhs == rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityTerms {
    pub energy_next: f64,
    pub energy_prev: f64,
    pub grad_increment: f64,
    pub square_increment: f64,
    pub dissipation: f64,
    pub lhs: f64,
    pub rhs: f64,
}

impl IdentityTerms {
    pub fn residual(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }

    /// Acceptance threshold `max(1e-10, 1e-10 |lhs|)`.
    pub fn tolerance(&self) -> f64 {
        1e-10_f64.max(1e-10 * self.lhs.abs())
    }

    pub fn holds(&self) -> bool {
        self.residual() <= self.tolerance()
    }
}

/// Evaluates both sides of
/// `𝒥(Yʲ) − 𝒥(Yʲ⁻¹) + ½‖∇(Yʲ − Yʲ⁻¹)‖² + ¼‖|Yʲ|² − |Yʲ⁻¹|²‖² + k‖w‖² = ΔW (σ(Yʲ⁻¹), w)`
/// with `w = −Δ_h Yʲ + 𝒫_{L²} f(Yʲ, Yʲ⁻¹)`.
pub fn energy_identity_terms(
    space: &FemSpace,
    y_prev: &Field,
    y_next: &Field,
    k: f64,
    dw: f64,
    sigma: &SigmaPreset,
) -> Result<IdentityTerms> {
    space.check(y_prev)?;
    space.check(y_next)?;
    let rule = space.exact_rule();
    let mut rhs_w = nonlinear_load_with(space, rule, y_next, y_prev)?;
    let ay = space.stiffness().matvec(&y_next.coeffs);
    for (r, a) in rhs_w.iter_mut().zip(&ay) {
        *r += a;
    }
    let w = space.solve_mass(&rhs_w)?;
    let e: Vec<f64> = y_next
        .coeffs
        .iter()
        .zip(&y_prev.coeffs)
        .map(|(a, b)| a - b)
        .collect();
    let energy_next = energy(space, y_next)?.total;
    let energy_prev = energy(space, y_prev)?.total;
    let grad_increment = space.stiffness().bilinear(&e, &e);
    let square_increment = space.integrate_pointwise(&[y_next, y_prev], |v| {
        let d = v[0] * v[0] - v[1] * v[1];
        d * d
    });
    let dissipation = k * space.mass().bilinear(&w, &w);
    let lhs = energy_next - energy_prev + 0.5 * grad_increment + 0.25 * square_increment + dissipation;
    let rhs = if sigma.is_zero() || dw == 0.0 {
        0.0
    } else {
        dw * dot(&sigma_load_with(space, rule, sigma, y_prev)?, &w)
    };
    Ok(IdentityTerms {
        energy_next,
        energy_prev,
        grad_increment,
        square_increment,
        dissipation,
        lhs,
        rhs,
    })
}

/// `|LHS − RHS|` of the discrete energy identity.
pub fn energy_identity_residual(
    space: &FemSpace,
    y_prev: &Field,
    y_next: &Field,
    k: f64,
    dw: f64,
    sigma: &SigmaPreset,
) -> Result<f64> {
    Ok(energy_identity_terms(space, y_prev, y_next, k, dw, sigma)?.residual())
}

/// Reusable per-(space, config) state for stepping.
#[derive(Debug, Clone)]
pub struct FemStepper<'a> {
    space: &'a FemSpace,
    cfg: SchemeConfig,
    k: f64,
    /// `M + kA`.
    linear: CsrMatrix,
}

impl<'a> FemStepper<'a> {
    pub fn new(space: &'a FemSpace, cfg: SchemeConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.time_step();
        let linear = space.mass().add_scaled(k, space.stiffness());
        Ok(Self {
            space,
            cfg,
            k,
            linear,
        })
    }

    pub fn space(&self) -> &'a FemSpace {
        self.space
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.cfg
    }

    pub fn time_step(&self) -> f64 {
        self.k
    }

    fn residual(&self, y: &Field, y_prev: &Field, noise: &[f64], dw: f64) -> Result<Vec<f64>> {
        let mut r = self.linear.matvec(&y.coeffs);
        let m_prev = self.space.mass().matvec(&y_prev.coeffs);
        let nl = nonlinear_load(self.space, y, y_prev)?;
        for i in 0..r.len() {
            r[i] += self.k * nl[i] - m_prev[i] - dw * noise[i];
        }
        Ok(r)
    }

    /// Advances `y_prev` by one step with Brownian increment `dw`, without
    /// evaluating diagnostics.
    pub fn solve(&self, y_prev: &Field, dw: f64) -> Result<SolveOutcome> {
        self.space.check(y_prev)?;
        let noise = if self.cfg.sigma.is_zero() {
            vec![0.0; y_prev.len()]
        } else {
            sigma_load(self.space, &self.cfg.sigma, y_prev)?
        };
        let scale = 1.0 + norm2(&self.space.mass().matvec(&y_prev.coeffs));
        let target = self.cfg.newton_tol * scale;
        let mut y = y_prev.clone();
        let mut r = self.residual(&y, y_prev, &noise, dw)?;
        let mut rnorm = norm2(&r);
        let mut iters = 0;
        let mut picard: Option<SymmetricSolver> = None;
        while rnorm > target {
            if iters >= self.cfg.newton_max_iter {
                return Err(SacError::StepFailure {
                    iterations: iters,
                    residual: rnorm,
                });
            }
            iters += 1;
            let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
            let delta = if picard.is_none() {
                let jac = self
                    .linear
                    .add_scaled(self.k, &nonlinear_jacobian(self.space, &y, y_prev)?);
                match SymmetricSolver::new(jac, self.space.solver_kind(), self.space.ordering())
                    .and_then(|s| s.solve(&neg_r))
                {
                    Ok(d) => Some(d),
                    Err(SacError::Solver(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let delta = match delta {
                Some(d) => d,
                None => {
                    if picard.is_none() {
                        picard = Some(SymmetricSolver::new(
                            self.linear.clone(),
                            self.space.solver_kind(),
                            self.space.ordering(),
                        )?);
                    }
                    picard.as_ref().unwrap().solve(&neg_r)?
                }
            };
            let mut alpha = 1.0;
            let mut halvings = 0;
            loop {
                let trial = Field {
                    space_id: y.space_id,
                    coeffs: y.coeffs.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect(),
                };
                let rt = self.residual(&trial, y_prev, &noise, dw)?;
                let rtn = norm2(&rt);
                if rtn < rnorm || halvings >= self.cfg.damping {
                    y = trial;
                    r = rt;
                    rnorm = rtn;
                    break;
                }
                alpha *= 0.5;
                halvings += 1;
            }
        }
        Ok(SolveOutcome {
            next: y,
            newton_iters: iters,
            residual_norm: rnorm,
            residual_scale: scale,
            picard_fallback: picard.is_some(),
        })
    }

    /// One step with full diagnostics.
    pub fn step(&self, y_prev: &Field, dw: f64) -> Result<(Field, StepDiagnostics)> {
        let out = self.solve(y_prev, dw)?;
        let terms =
            energy_identity_terms(self.space, y_prev, &out.next, self.k, dw, &self.cfg.sigma)?;
        let e: Vec<f64> = out
            .next
            .coeffs
            .iter()
            .zip(&y_prev.coeffs)
            .map(|(a, b)| a - b)
            .collect();
        let diag = StepDiagnostics {
            newton_iters: out.newton_iters,
            residual_norm: out.residual_norm,
            residual_scale: out.residual_scale,
            picard_fallback: out.picard_fallback,
            energy: energy(self.space, &out.next)?,
            identity_residual: terms.residual(),
            increment_l2: self.space.mass().bilinear(&e, &e).max(0.0).sqrt(),
        };
        Ok((out.next, diag))
    }
}

/// Result of one nonlinear solve.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub next: Field,
    pub newton_iters: usize,
    pub residual_norm: f64,
    pub residual_scale: f64,
    pub picard_fallback: bool,
}

/// One step of the scheme from `y_prev` with increment `dw`.
pub fn step(
    space: &FemSpace,
    cfg: &SchemeConfig,
    y_prev: &Field,
    dw: f64,
) -> Result<(Field, StepDiagnostics)> {
    FemStepper::new(space, *cfg)?.step(y_prev, dw)
}

/// Initial datum for a trajectory.
#[derive(Clone, Copy)]
pub enum InitialData<'a> {
    Function(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
    /// A field on a nested refinement (or the same space).
    Field(&'a FemSpace, &'a Field),
}

/// `Y⁰` from the initial datum.
pub fn initial_field(
    space: &FemSpace,
    data: InitialData<'_>,
    transfer: InitialTransfer,
) -> Result<Field> {
    match (data, transfer) {
        (InitialData::Function(g), InitialTransfer::Project) => space.l2_project(g),
        (InitialData::Function(g), InitialTransfer::Interpolate) => Ok(space.interpolate(g)),
        (InitialData::Field(src, u), InitialTransfer::Project) => space.l2_project_field(src, u),
        (InitialData::Field(src, u), InitialTransfer::Interpolate) => {
            src.check(u)?;
            // Nodal values of the fine field at the coarse dofs.
            let ratio = src.mesh().subdivisions() / space.mesh().subdivisions();
            crate::fem::check_nested_spaces(space, src)?;
            let coeffs = (0..space.num_dofs())
                .map(|i| {
                    let idx: Vec<usize> =
                        space.mesh().grid_index(i).iter().map(|v| v * ratio).collect();
                    u.coeffs[src.mesh().dof_of(&idx)]
                })
                .collect();
            space.field(coeffs)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub config: SchemeConfig,
    pub initial: Field,
    pub initial_energy: EnergyBreakdown,
    /// `(step index, field)` for every `record_stride`-th step.
    pub retained: Vec<(usize, Field)>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub terminal: Field,
}

impl Trajectory {
    /// `𝒥(Y⁰), 𝒥(Y¹), …, 𝒥(Yᴶ)`.
    pub fn energies(&self) -> Vec<f64> {
        std::iter::once(self.initial_energy.total)
            .chain(self.diagnostics.iter().map(|d| d.energy.total))
            .collect()
    }
}

/// Runs the scheme over `increments.len() == cfg.steps` steps.
pub fn run_trajectory(
    space: &FemSpace,
    cfg: &SchemeConfig,
    x0: InitialData<'_>,
    increments: &[f64],
) -> Result<Trajectory> {
    if increments.len() != cfg.steps {
        return Err(SacError::Config(format!(
            "{} increments supplied for J = {} steps",
            increments.len(),
            cfg.steps
        )));
    }
    let initial = initial_field(space, x0, cfg.y0)?;
    let initial_energy = energy(space, &initial)?;
    if cfg.steps == 0 {
        return Ok(Trajectory {
            config: *cfg,
            terminal: initial.clone(),
            initial,
            initial_energy,
            retained: Vec::new(),
            diagnostics: Vec::new(),
        });
    }
    let stepper = FemStepper::new(space, *cfg)?;
    let mut y = initial.clone();
    let mut diagnostics = Vec::with_capacity(cfg.steps);
    let mut retained = Vec::new();
    for (j, &dw) in increments.iter().enumerate() {
        let (next, diag) = stepper.step(&y, dw).map_err(|e| SacError::Trajectory {
            step: j + 1,
            source: Box::new(e),
        })?;
        y = next;
        diagnostics.push(diag);
        if cfg.record_stride > 0 && (j + 1) % cfg.record_stride == 0 {
            retained.push((j + 1, y.clone()));
        }
    }
    Ok(Trajectory {
        config: *cfg,
        initial,
        initial_energy,
        retained,
        diagnostics,
        terminal: y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::sample_path;
    use std::f64::consts::PI;

    fn cfg(steps: usize, horizon: f64) -> SchemeConfig {
        SchemeConfig {
            horizon,
            steps,
            ..SchemeConfig::default()
        }
    }

    /// Root of `c − 2 + k (c² − 1)(c + 2)/2 = 0` in (1, 2) by bisection.
    fn bisection_constant_step(k: f64) -> f64 {
        let g = |c: f64| c - 2.0 + k * (c * c - 1.0) * (c + 2.0) / 2.0;
        let (mut lo, mut hi) = (1.0, 2.0);
        assert!(g(lo) < 0.0 && g(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let space = FemSpace::periodic(1, 1.0, 16).unwrap();
        for c in [1.0, -1.0, 0.0] {
            let (y, d) = step(&space, &cfg(10, 0.1), &space.constant(c), 0.0).unwrap();
            assert!(y.coeffs.iter().all(|v| (v - c).abs() < 1e-14));
            assert!(d.identity_residual < 1e-12);
        }
    }

    #[test]
    fn constant_step_matches_bisection() {
        let c1 = bisection_constant_step(0.1);
        for (d, n) in [(1, 8), (2, 4)] {
            let space = FemSpace::periodic(d, 1.0, n).unwrap();
            let (y, diag) = step(&space, &cfg(10, 1.0), &space.constant(2.0), 0.0).unwrap();
            assert!(y.coeffs.iter().all(|v| (v - c1).abs() < 1e-10), "{:?} vs {c1}", &y.coeffs[..2]);
            assert!(diag.newton_iters >= 2);
            assert!(c1 > 1.0 && c1 < 2.0);
        }
    }

    #[test]
    fn noisy_step_is_bit_reproducible() {
        let space = FemSpace::periodic(1, 1.0, 16).unwrap();
        let mut c = cfg(16, 0.25);
        c.sigma = SigmaPreset::sine(0.5);
        let y0 = space.l2_project(|x| (2.0 * PI * x[0]).cos()).unwrap();
        let a = step(&space, &c, &y0, 0.07).unwrap().0;
        let b = step(&space, &c, &y0, 0.07).unwrap().0;
        assert_eq!(
            a.coeffs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.coeffs.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn converged_step_satisfies_residual_contract() {
        let space = FemSpace::periodic(1, 1.0, 32).unwrap();
        let mut c = cfg(8, 0.25);
        c.sigma = SigmaPreset::rational(1.0);
        let y0 = space.l2_project(|x| 1.5 * (2.0 * PI * x[0]).sin()).unwrap();
        let (_, d) = step(&space, &c, &y0, -0.2).unwrap();
        assert!(d.residual_norm <= c.newton_tol * d.residual_scale);
    }

    #[test]
    fn identity_holds_for_converged_steps() {
        let space = FemSpace::periodic(1, 1.0, 64).unwrap();
        let g = |x: &[f64]| (2.0 * PI * x[0]).cos() + 0.3 * (6.0 * PI * x[0]).sin();
        let y0 = space.l2_project(g).unwrap();
        let c = cfg(25, 0.25);
        let (y1, d) = step(&space, &c, &y0, 0.0).unwrap();
        let t = energy_identity_terms(&space, &y0, &y1, 0.01, 0.0, &SigmaPreset::ZERO).unwrap();
        assert!(t.holds(), "residual {}", t.residual());
        assert_eq!(d.identity_residual, t.residual());
        assert!(t.energy_next < t.energy_prev);

        let mut c = cfg(25, 0.25);
        c.sigma = SigmaPreset::sine(0.5);
        let (y1, _) = step(&space, &c, &y0, 0.1).unwrap();
        let t = energy_identity_terms(&space, &y0, &y1, 0.01, 0.1, &c.sigma).unwrap();
        assert!(t.holds(), "residual {}", t.residual());
        assert!(t.rhs != 0.0);

        // Trivial case: nothing moves.
        let one = space.constant(1.0);
        assert!(energy_identity_residual(&space, &one, &one, 0.1, 0.3, &SigmaPreset::sine(1.0)).unwrap() < 1e-13);
    }

    #[test]
    fn truncated_newton_breaks_the_identity() {
        let space = FemSpace::periodic(1, 1.0, 64).unwrap();
        let y0 = space.l2_project(|x| (2.0 * PI * x[0]).cos()).unwrap();
        let mut c = cfg(25, 0.25);
        c.newton_tol = 1e-3;
        let (_, d) = step(&space, &c, &y0, 0.0).unwrap();
        assert!(d.identity_residual > 1e-8, "{}", d.identity_residual);
    }

    #[test]
    fn deterministic_trajectory_dissipates_energy() {
        let space = FemSpace::periodic(1, 1.0, 32).unwrap();
        let c = cfg(40, 0.1);
        let g = |x: &[f64]| (2.0 * PI * x[0]).cos();
        let traj = run_trajectory(&space, &c, InitialData::Function(&g), &vec![0.0; 40]).unwrap();
        let e = traj.energies();
        assert_eq!(traj.diagnostics.len(), 40);
        assert!(e.windows(2).all(|w| w[1] < w[0]));
        let one = |_: &[f64]| 1.0;
        let traj = run_trajectory(&space, &c, InitialData::Function(&one), &vec![0.0; 40]).unwrap();
        assert!(traj.energies().iter().all(|e| e.abs() < 1e-14));
        assert!(traj.diagnostics.iter().all(|d| d.increment_l2 < 1e-14));
    }

    #[test]
    fn wells_are_stable_under_perturbation() {
        let space = FemSpace::periodic(1, 1.0, 16).unwrap();
        let c = cfg(50, 3.0);
        for s in [1.0, -1.0] {
            let g = move |x: &[f64]| s + 1e-3 * (2.0 * PI * x[0]).sin() + 1e-3;
            let traj = run_trajectory(&space, &c, InitialData::Function(&g), &vec![0.0; 50]).unwrap();
            let e = traj.energies();
            assert!(e.last().unwrap() < &(e[0] * 1e-2));
            assert!(traj.terminal.coeffs.iter().all(|v| (v - s).abs() < 1e-4));
        }
    }

    #[test]
    fn constant_data_stays_in_unit_interval() {
        let space = FemSpace::periodic(1, 1.0, 8).unwrap();
        for c0 in [-1.0, -0.6, 0.2, 0.9, 1.0] {
            let g = move |_: &[f64]| c0;
            let traj = run_trajectory(&space, &cfg(30, 0.9), InitialData::Function(&g), &vec![0.0; 30]).unwrap();
            for d in traj.diagnostics.iter() {
                assert!(d.energy.total >= 0.0);
            }
            assert!(traj.terminal.coeffs.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn empty_trajectory_is_initial_field() {
        let space = FemSpace::periodic(1, 1.0, 8).unwrap();
        let g = |x: &[f64]| (2.0 * PI * x[0]).cos();
        let traj = run_trajectory(&space, &cfg(0, 0.1), InitialData::Function(&g), &[]).unwrap();
        assert_eq!(traj.terminal, traj.initial);
        assert!(traj.diagnostics.is_empty());
        assert!(run_trajectory(&space, &cfg(3, 0.1), InitialData::Function(&g), &[0.0]).is_err());
    }

    #[test]
    fn noisy_trajectory_records_strided_fields() {
        let space = FemSpace::periodic(1, 1.0, 16).unwrap();
        let mut c = cfg(32, 0.25);
        c.sigma = SigmaPreset::sine(0.5);
        c.record_stride = 8;
        let path = sample_path(1, 0, 0.25, 32).unwrap();
        let g = |x: &[f64]| (2.0 * PI * x[0]).cos();
        let traj = run_trajectory(&space, &c, InitialData::Function(&g), &path.increments).unwrap();
        assert_eq!(traj.retained.iter().map(|r| r.0).collect::<Vec<_>>(), vec![8, 16, 24, 32]);
        assert!(traj.diagnostics.iter().all(|d| d.identity_residual <= 1e-10_f64.max(1e-10 * d.energy.total)));
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1, 2.0).validate().is_err());
        let mut c = cfg(10, 1.0);
        c.newton_tol = 1e-16;
        assert!(c.validate().is_err());
        assert!(cfg(10, 1.0).validate().is_ok());
    }
}
