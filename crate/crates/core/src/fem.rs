//! P1 finite element space on a periodic mesh: mass and stiffness matrices,
//! the L²-projection, the discrete Laplacian, norms and prolongation.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::Serialize;

use crate::error::{Result, SacError};
use crate::linalg::{BandOrdering, CsrMatrix, SolverKind, SymmetricSolver};
use crate::mesh::{check_nested, MeshInfo, PeriodicMesh};
use crate::quadrature::{QuadRule, QuadratureChoice};

/// Identifier binding a [`Field`] to the space it lives in. Derived from the
/// space parameters, so equal spaces share an id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct SpaceId(pub u64);

/// Nodal coefficient vector bound to a space.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub space_id: SpaceId,
    pub coeffs: Vec<f64>,
}

impl Field {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Options for assembling a [`FemSpace`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceOptions {
    pub quadrature: QuadratureChoice,
    /// `None` picks direct factorization for `d ≤ 2` and CG for `d = 3`.
    pub solver: Option<SolverKind>,
}

impl Default for SpaceOptions {
    fn default() -> Self {
        Self {
            quadrature: QuadratureChoice::Exact,
            solver: None,
        }
    }
}

/// Serializable description of a space.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SpaceInfo {
    #[serde(flatten)]
    pub mesh: MeshInfo,
    pub quad_degree: usize,
    pub quadrature: QuadratureChoice,
    pub solver: SolverKind,
}

/// Lagrange P1 space with assembled matrices. Immutable after assembly.
#[derive(Debug, Clone)]
pub struct FemSpace {
    id: SpaceId,
    mesh: PeriodicMesh,
    mass: CsrMatrix,
    stiffness: CsrMatrix,
    /// Rule used for the identity, energy and projection integrals.
    exact_rule: QuadRule,
    /// Rule used for the scheme's nonlinear and noise loads.
    load_rule: QuadRule,
    quadrature: QuadratureChoice,
    solver_kind: SolverKind,
    ordering: BandOrdering,
    mass_solver: SymmetricSolver,
    /// Per element, positions of the `(a, b)` local entries in the CSR values.
    local_to_csr: Vec<usize>,
}

impl FemSpace {
    /// Assembles mass and stiffness matrices on `mesh`.
    pub fn assemble(mesh: PeriodicMesh, options: SpaceOptions) -> Result<Self> {
        let dim = mesh.dim();
        let nv = dim + 1;
        let ndofs = mesh.num_dofs();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); ndofs];
        for e in 0..mesh.num_elements() {
            let verts = mesh.element(e);
            for &a in verts {
                rows[a].extend_from_slice(verts);
            }
        }
        let mut mass = CsrMatrix::from_pattern(ndofs, &rows);
        let mut local_to_csr = Vec::with_capacity(mesh.num_elements() * nv * nv);
        for e in 0..mesh.num_elements() {
            let verts = mesh.element(e);
            for &a in verts {
                for &b in verts {
                    local_to_csr.push(mass.index_of(a, b).expect("pattern entry"));
                }
            }
        }
        let mut stiffness = mass.clone();
        // Closed-form P1 element matrices: M_ab = |K| (1 + δ_ab) / ((d+1)(d+2)),
        // A_ab = |K| ∇λ_a·∇λ_b.
        let denom = ((dim + 1) * (dim + 2)) as f64;
        for e in 0..mesh.num_elements() {
            let vol = mesh.element_volume(e);
            for a in 0..nv {
                for b in 0..nv {
                    let p = local_to_csr[(e * nv + a) * nv + b];
                    let m = if a == b { 2.0 } else { 1.0 } * vol / denom;
                    mass.values_mut()[p] += m;
                    let ga = mesh.grad(e, a);
                    let gb = mesh.grad(e, b);
                    let g: f64 = ga.iter().zip(gb).map(|(x, y)| x * y).sum();
                    stiffness.values_mut()[p] += vol * g;
                }
            }
        }
        // Symmetrize exactly so the factorization sees a symmetric matrix.
        for mat in [&mut mass, &mut stiffness] {
            let snapshot = mat.clone();
            for i in 0..ndofs {
                for (j, _) in snapshot.row(i) {
                    if j > i {
                        let avg = 0.5 * (snapshot.get(i, j) + snapshot.get(j, i));
                        let p = mat.index_of(i, j).unwrap();
                        let q = mat.index_of(j, i).unwrap();
                        mat.values_mut()[p] = avg;
                        mat.values_mut()[q] = avg;
                    }
                }
            }
        }
        let solver_kind = options
            .solver
            .unwrap_or(if dim <= 2 { SolverKind::Direct } else { SolverKind::Cg });
        let ordering = BandOrdering::new(&mass);
        let mass_solver = SymmetricSolver::new(mass.clone(), solver_kind, &ordering)?;
        let exact_rule = QuadRule::exact_for(dim, 4);
        let load_rule = QuadRule::for_choice(dim, options.quadrature);

        let mut hasher = DefaultHasher::new();
        (dim, mesh.length().to_bits(), mesh.subdivisions(), options.quadrature as u8)
            .hash(&mut hasher);
        Ok(Self {
            id: SpaceId(hasher.finish()),
            mesh,
            mass,
            stiffness,
            exact_rule,
            load_rule,
            quadrature: options.quadrature,
            solver_kind,
            ordering,
            mass_solver,
            local_to_csr,
        })
    }

    /// Convenience: build the mesh and assemble with default options.
    pub fn periodic(dim: usize, length: f64, n: usize) -> Result<Self> {
        Self::assemble(PeriodicMesh::build(dim, length, n)?, SpaceOptions::default())
    }

    pub fn id(&self) -> SpaceId {
        self.id
    }

    pub fn mesh(&self) -> &PeriodicMesh {
        &self.mesh
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn num_dofs(&self) -> usize {
        self.mesh.num_dofs()
    }

    pub fn exact_rule(&self) -> &QuadRule {
        &self.exact_rule
    }

    pub fn load_rule(&self) -> &QuadRule {
        &self.load_rule
    }

    pub fn quadrature(&self) -> QuadratureChoice {
        self.quadrature
    }

    pub fn solver_kind(&self) -> SolverKind {
        self.solver_kind
    }

    pub(crate) fn ordering(&self) -> &BandOrdering {
        &self.ordering
    }

    pub(crate) fn local_to_csr(&self, e: usize, a: usize, b: usize) -> usize {
        let nv = self.mesh.dim() + 1;
        self.local_to_csr[(e * nv + a) * nv + b]
    }

    /// Exactness degree of the load quadrature.
    pub fn quad_degree(&self) -> usize {
        self.load_rule.degree()
    }

    pub fn info(&self) -> SpaceInfo {
        SpaceInfo {
            mesh: self.mesh.info(),
            quad_degree: self.quad_degree(),
            quadrature: self.quadrature,
            solver: self.solver_kind,
        }
    }

    pub fn field(&self, coeffs: Vec<f64>) -> Result<Field> {
        if coeffs.len() != self.num_dofs() {
            return Err(SacError::Structure(format!(
                "field has {} coefficients, space has {} dofs",
                coeffs.len(),
                self.num_dofs()
            )));
        }
        Ok(Field {
            space_id: self.id,
            coeffs,
        })
    }

    pub fn constant(&self, c: f64) -> Field {
        Field {
            space_id: self.id,
            coeffs: vec![c; self.num_dofs()],
        }
    }

    /// Nodal interpolant of `g`.
    pub fn interpolate(&self, g: impl Fn(&[f64]) -> f64) -> Field {
        let coeffs = (0..self.num_dofs()).map(|i| g(self.mesh.vertex(i))).collect();
        Field {
            space_id: self.id,
            coeffs,
        }
    }

    pub fn check(&self, u: &Field) -> Result<()> {
        if u.space_id != self.id || u.coeffs.len() != self.num_dofs() {
            return Err(SacError::Structure(
                "field is not bound to this finite element space".into(),
            ));
        }
        Ok(())
    }

    /// Solves `M x = b`.
    pub fn solve_mass(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.mass_solver.solve(b)
    }

    /// Load vector `b_i = ∫ g φ_i` with the exact rule.
    pub fn load_function(&self, g: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let dim = self.mesh.dim();
        let mut b = vec![0.0; self.num_dofs()];
        let mut x = vec![0.0; dim];
        for e in 0..self.mesh.num_elements() {
            let coords = self.mesh.element_coords(e);
            let verts = self.mesh.element(e);
            let vol = self.mesh.element_volume(e);
            for (lambda, w) in self.exact_rule.iter() {
                for (c, xc) in x.iter_mut().enumerate() {
                    *xc = lambda.iter().zip(&coords).map(|(l, v)| l * v[c]).sum();
                }
                let gv = g(&x) * w * vol;
                for (a, &va) in verts.iter().enumerate() {
                    b[va] += gv * lambda[a];
                }
            }
        }
        b
    }

    /// L²-projection of a function onto the space.
    pub fn l2_project(&self, g: impl Fn(&[f64]) -> f64) -> Result<Field> {
        let b = self.load_function(g);
        self.field(self.solve_mass(&b)?)
    }

    /// L²-projection of a field living on a nested refinement of this mesh.
    pub fn l2_project_field(&self, fine: &FemSpace, g: &Field) -> Result<Field> {
        fine.check(g)?;
        let weights = self.mesh.interpolation_weights(&fine.mesh)?;
        // (g, φ_i) = Σ_f P_fi (M_fine g)_f since φ_i is P1 on the fine mesh.
        let mg = fine.mass.matvec(&g.coeffs);
        let mut b = vec![0.0; self.num_dofs()];
        for (f, ws) in weights.iter().enumerate() {
            for &(c, w) in ws {
                b[c] += w * mg[f];
            }
        }
        self.field(self.solve_mass(&b)?)
    }

    /// `Δ_h u`, the field `w` with `M w = -A u`.
    pub fn discrete_laplacian(&self, u: &Field) -> Result<Field> {
        self.check(u)?;
        let rhs: Vec<f64> = self.stiffness.matvec(&u.coeffs).iter().map(|v| -v).collect();
        self.field(self.solve_mass(&rhs)?)
    }

    pub fn norms(&self, u: &Field) -> Result<Norms> {
        self.check(u)?;
        Ok(Norms {
            l2: self.mass.bilinear(&u.coeffs, &u.coeffs).max(0.0).sqrt(),
            h1_semi: self.stiffness.bilinear(&u.coeffs, &u.coeffs).max(0.0).sqrt(),
        })
    }

    /// `(u, v)_{L²}`.
    pub fn inner(&self, u: &Field, v: &Field) -> Result<f64> {
        self.check(u)?;
        self.check(v)?;
        Ok(self.mass.bilinear(&u.coeffs, &v.coeffs))
    }

    /// Nodal interpolation of `u` (on this space) onto a nested refinement.
    pub fn prolongate(&self, u: &Field, fine: &FemSpace) -> Result<Field> {
        self.check(u)?;
        let weights = self.mesh.interpolation_weights(&fine.mesh)?;
        Ok(fine.prolongate_with(&weights, u))
    }

    pub(crate) fn prolongate_with(&self, weights: &[Vec<(usize, f64)>], u: &Field) -> Field {
        let coeffs = weights
            .iter()
            .map(|ws| ws.iter().map(|&(c, w)| w * u.coeffs[c]).sum())
            .collect();
        Field {
            space_id: self.id,
            coeffs,
        }
    }

    /// Integrates a pointwise function of the nodal interpolants of `fields`
    /// with the exact rule: `∫ g(u_1(x), …, u_m(x)) dx`.
    pub fn integrate_pointwise(&self, fields: &[&Field], g: impl Fn(&[f64]) -> f64) -> f64 {
        self.integrate_with(&self.exact_rule, fields, g)
    }

    pub(crate) fn integrate_with(
        &self,
        rule: &QuadRule,
        fields: &[&Field],
        g: impl Fn(&[f64]) -> f64,
    ) -> f64 {
        let mut vals = vec![0.0; fields.len()];
        let mut total = 0.0;
        for e in 0..self.mesh.num_elements() {
            let verts = self.mesh.element(e);
            let mut acc = 0.0;
            for (lambda, w) in rule.iter() {
                for (v, f) in vals.iter_mut().zip(fields) {
                    *v = verts.iter().zip(lambda).map(|(&i, l)| l * f.coeffs[i]).sum();
                }
                acc += w * g(&vals);
            }
            total += acc * self.mesh.element_volume(e);
        }
        total
    }

    /// Load vector `b_i = ∫ g(u_1, …, u_m) φ_i` under `rule`.
    pub(crate) fn load_pointwise_with(
        &self,
        rule: &QuadRule,
        fields: &[&Field],
        g: impl Fn(&[f64]) -> f64,
    ) -> Vec<f64> {
        let mut vals = vec![0.0; fields.len()];
        let mut b = vec![0.0; self.num_dofs()];
        for e in 0..self.mesh.num_elements() {
            let verts = self.mesh.element(e);
            let vol = self.mesh.element_volume(e);
            for (lambda, w) in rule.iter() {
                for (v, f) in vals.iter_mut().zip(fields) {
                    *v = verts.iter().zip(lambda).map(|(&i, l)| l * f.coeffs[i]).sum();
                }
                let gv = g(&vals) * w * vol;
                for (a, &va) in verts.iter().enumerate() {
                    b[va] += gv * lambda[a];
                }
            }
        }
        b
    }

    /// Weighted mass matrix `∫ g(u_1, …) φ_i φ_j` under `rule`, on the
    /// mass pattern.
    pub(crate) fn weighted_mass_with(
        &self,
        rule: &QuadRule,
        fields: &[&Field],
        g: impl Fn(&[f64]) -> f64,
    ) -> CsrMatrix {
        let nv = self.mesh.dim() + 1;
        let mut out = self.mass.clone();
        out.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut vals = vec![0.0; fields.len()];
        for e in 0..self.mesh.num_elements() {
            let verts = self.mesh.element(e);
            let vol = self.mesh.element_volume(e);
            for (lambda, w) in rule.iter() {
                for (v, f) in vals.iter_mut().zip(fields) {
                    *v = verts.iter().zip(lambda).map(|(&i, l)| l * f.coeffs[i]).sum();
                }
                let gv = g(&vals) * w * vol;
                for a in 0..nv {
                    for b in a..nv {
                        let val = gv * lambda[a] * lambda[b];
                        let p = self.local_to_csr(e, a, b);
                        out.values_mut()[p] += val;
                        if a != b {
                            let q = self.local_to_csr(e, b, a);
                            out.values_mut()[q] += val;
                        }
                    }
                }
            }
        }
        out
    }
}

/// `‖u‖_{L²}` and `‖∇u‖_{L²}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Norms {
    pub l2: f64,
    pub h1_semi: f64,
}

/// Checks that a coarse space nests inside a fine one.
pub fn check_nested_spaces(coarse: &FemSpace, fine: &FemSpace) -> Result<()> {
    check_nested(&coarse.mesh, &fine.mesh)
}
