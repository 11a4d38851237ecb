//! Uniform periodic simplicial meshes of the cube `(0, R)^d`.
//!
//! Every axis is cut into `n` cells and every cell into `d!` Kuhn simplices
//! (intervals in 1D, Friedrichs–Keller triangles in 2D, six tetrahedra in
//! 3D). Periodicity is realised in the dof numbering: grid index `i` along an
//! axis maps to dof coordinate `i mod n`, so opposite faces share dofs.

use serde::Serialize;

use crate::error::{Result, SacError};

/// Periodic Kuhn triangulation of `(0, R)^d`.
#[derive(Debug, Clone)]
pub struct PeriodicMesh {
    dim: usize,
    length: f64,
    n: usize,
    /// Dof coordinates, `dim` entries per dof.
    vertices: Vec<f64>,
    /// `dim + 1` dof indices per element.
    elements: Vec<usize>,
    /// Gradients of the barycentric coordinates, `(dim + 1) * dim` per element.
    grads: Vec<f64>,
    element_volume: Vec<f64>,
}

/// Metadata recorded in run reports.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MeshInfo {
    pub d: usize,
    #[serde(rename = "R")]
    pub r: f64,
    pub n: usize,
    pub h: f64,
    pub dofs: usize,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Inverts a small dense matrix in place by Gauss–Jordan elimination.
fn invert(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&x, &y| a[x * n + c].abs().total_cmp(&a[y * n + c].abs()))
            .unwrap();
        for j in 0..n {
            a.swap(c * n + j, piv * n + j);
            inv.swap(c * n + j, piv * n + j);
        }
        let p = a[c * n + c];
        for j in 0..n {
            a[c * n + j] /= p;
            inv[c * n + j] /= p;
        }
        for r in 0..n {
            if r != c {
                let f = a[r * n + c];
                for j in 0..n {
                    a[r * n + j] -= f * a[c * n + j];
                    inv[r * n + j] -= f * inv[c * n + j];
                }
            }
        }
    }
    inv
}

impl PeriodicMesh {
    /// Builds the periodic mesh with `n` subdivisions per axis.
    pub fn build(dim: usize, length: f64, n: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(SacError::Config(format!("d must be 1, 2 or 3 (got {dim})")));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(SacError::Config(format!("R must be positive (got {length})")));
        }
        if n < 2 {
            return Err(SacError::Config(format!("n must be at least 2 (got {n})")));
        }
        let h = length / n as f64;
        let dofs = n.pow(dim as u32);
        let mut vertices = Vec::with_capacity(dofs * dim);
        for idx in 0..dofs {
            let mut rest = idx;
            for _ in 0..dim {
                vertices.push((rest % n) as f64 * h);
                rest /= n;
            }
        }

        // Reference Kuhn simplices of the unit cube: walk the axes in the
        // order given by a permutation, one unit step each.
        let perms = permutations(dim);
        let mut ref_simplices: Vec<Vec<Vec<usize>>> = Vec::new();
        for p in &perms {
            let mut corner = vec![0usize; dim];
            let mut simplex = vec![corner.clone()];
            for &axis in p {
                corner[axis] += 1;
                simplex.push(corner.clone());
            }
            ref_simplices.push(simplex);
        }
        // Per reference simplex: barycentric gradients and volume.
        let nv = dim + 1;
        let mut ref_grads = Vec::new();
        let mut ref_volume = 0.0;
        for simplex in &ref_simplices {
            // Rows: edge vectors x_a - x_0, a = 1..dim.
            let mut jac = vec![0.0; dim * dim];
            for a in 1..nv {
                for c in 0..dim {
                    jac[(a - 1) * dim + c] =
                        (simplex[a][c] as f64 - simplex[0][c] as f64) * h;
                }
            }
            let inv = invert(jac.clone(), dim);
            // ∇λ_a for a ≥ 1 is column a-1 of J^{-1} (J has edges as rows).
            let mut g = vec![0.0; nv * dim];
            for a in 1..nv {
                for c in 0..dim {
                    g[a * dim + c] = inv[c * dim + (a - 1)];
                }
            }
            for c in 0..dim {
                g[c] = -(1..nv).map(|a| g[a * dim + c]).sum::<f64>();
            }
            ref_grads.push(g);
            ref_volume = h.powi(dim as i32) / (1..=dim).product::<usize>() as f64;
        }

        let cells = dofs;
        let mut elements = Vec::with_capacity(cells * perms.len() * nv);
        let mut grads = Vec::with_capacity(cells * perms.len() * nv * dim);
        let mut element_volume = Vec::with_capacity(cells * perms.len());
        for cell in 0..cells {
            let mut base = vec![0usize; dim];
            let mut rest = cell;
            for b in base.iter_mut() {
                *b = rest % n;
                rest /= n;
            }
            for (s, simplex) in ref_simplices.iter().enumerate() {
                for corner in simplex {
                    let mut dof = 0;
                    let mut stride = 1;
                    for c in 0..dim {
                        dof += ((base[c] + corner[c]) % n) * stride;
                        stride *= n;
                    }
                    elements.push(dof);
                }
                grads.extend_from_slice(&ref_grads[s]);
                element_volume.push(ref_volume);
            }
        }
        Ok(Self {
            dim,
            length,
            n,
            vertices,
            elements,
            grads,
            element_volume,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn subdivisions(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn num_dofs(&self) -> usize {
        self.vertices.len() / self.dim
    }

    pub fn num_elements(&self) -> usize {
        self.element_volume.len()
    }

    pub fn vertex(&self, i: usize) -> &[f64] {
        &self.vertices[i * self.dim..(i + 1) * self.dim]
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let nv = self.dim + 1;
        &self.elements[e * nv..(e + 1) * nv]
    }

    /// Gradient of the `a`-th barycentric coordinate on element `e`.
    pub fn grad(&self, e: usize, a: usize) -> &[f64] {
        let nv = self.dim + 1;
        let off = (e * nv + a) * self.dim;
        &self.grads[off..off + self.dim]
    }

    pub fn element_volume(&self, e: usize) -> f64 {
        self.element_volume[e]
    }

    pub fn element_volumes(&self) -> &[f64] {
        &self.element_volume
    }

    /// Unwrapped physical coordinates of the element vertices (the simplex as
    /// it sits inside its cell, not folded back by periodicity).
    pub fn element_coords(&self, e: usize) -> Vec<Vec<f64>> {
        let verts = self.element(e);
        let base = self.vertex(verts[0]).to_vec();
        let h = self.h();
        let mut out = vec![base.clone()];
        for a in 1..verts.len() {
            let v = self.vertex(verts[a]);
            out.push(
                v.iter()
                    .zip(&base)
                    .map(|(x, b)| {
                        // Periodic images differ from the base by at most one cell.
                        let mut x = *x;
                        while x < *b - 0.5 * h {
                            x += self.length;
                        }
                        x
                    })
                    .collect(),
            );
        }
        out
    }

    pub fn info(&self) -> MeshInfo {
        MeshInfo {
            d: self.dim,
            r: self.length,
            n: self.n,
            h: self.h(),
            dofs: self.num_dofs(),
        }
    }

    /// Multi-index of dof `i` on the periodic grid.
    pub fn grid_index(&self, i: usize) -> Vec<usize> {
        let mut rest = i;
        (0..self.dim)
            .map(|_| {
                let v = rest % self.n;
                rest /= self.n;
                v
            })
            .collect()
    }

    pub fn dof_of(&self, idx: &[usize]) -> usize {
        let mut dof = 0;
        let mut stride = 1;
        for &v in idx {
            dof += (v % self.n) * stride;
            stride *= self.n;
        }
        dof
    }

    /// Nodal interpolation weights of this (coarse) mesh's P1 basis at the
    /// dofs of `fine`: for each fine dof, `(coarse dof, weight)` pairs.
    pub fn interpolation_weights(&self, fine: &PeriodicMesh) -> Result<Vec<Vec<(usize, f64)>>> {
        check_nested(self, fine)?;
        let ratio = fine.n / self.n;
        let dim = self.dim;
        let mut out = Vec::with_capacity(fine.num_dofs());
        for i in 0..fine.num_dofs() {
            let idx = fine.grid_index(i);
            let cell: Vec<usize> = idx.iter().map(|v| v / ratio).collect();
            let local: Vec<f64> = idx
                .iter()
                .map(|v| (v % ratio) as f64 / ratio as f64)
                .collect();
            // Freudenthal: sort local coordinates descending.
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| local[b].total_cmp(&local[a]).then(a.cmp(&b)));
            let mut corner = cell.clone();
            let mut weights = Vec::with_capacity(dim + 1);
            let first = 1.0 - local[order[0]];
            weights.push((self.dof_of(&corner), first));
            for (pos, &axis) in order.iter().enumerate() {
                corner[axis] += 1;
                let next = if pos + 1 < dim { local[order[pos + 1]] } else { 0.0 };
                weights.push((self.dof_of(&corner), local[axis] - next));
            }
            weights.retain(|(_, w)| *w != 0.0);
            out.push(weights);
        }
        Ok(out)
    }
}

/// Checks that `fine` is a dyadic (or integer) refinement of `coarse`.
pub fn check_nested(coarse: &PeriodicMesh, fine: &PeriodicMesh) -> Result<()> {
    if coarse.dim != fine.dim
        || coarse.length != fine.length
        || fine.n < coarse.n
        || fine.n % coarse.n != 0
    {
        return Err(SacError::Structure(format!(
            "mesh (d={}, R={}, n={}) is not nested in (d={}, R={}, n={})",
            coarse.dim, coarse.length, coarse.n, fine.dim, fine.length, fine.n
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_mesh_identifies_endpoints() {
        let m = PeriodicMesh::build(1, 1.0, 4).unwrap();
        assert_eq!(m.num_dofs(), 4);
        assert_eq!(m.num_elements(), 4);
        assert!(m.element_volumes().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(m.element(3), &[3, 0]);
    }

    #[test]
    fn element_counts_and_volume_sums() {
        // Friedrichs–Keller: 2n² triangles; Kuhn: 6n³ tetrahedra.
        let m2 = PeriodicMesh::build(2, 1.0, 2).unwrap();
        assert_eq!((m2.num_dofs(), m2.num_elements()), (4, 8));
        assert!(m2.element_volumes().iter().all(|v| (v - 0.125).abs() < 1e-15));
        let m3 = PeriodicMesh::build(3, 2.0, 2).unwrap();
        assert_eq!((m3.num_dofs(), m3.num_elements()), (8, 48));
        let total: f64 = m3.element_volumes().iter().sum();
        assert!((total - 8.0).abs() < 1e-13 * 8.0);
    }

    #[test]
    fn volume_matches_unwrapped_geometry() {
        for (d, n) in [(1, 5), (2, 4), (3, 3)] {
            let m = PeriodicMesh::build(d, 1.5, n).unwrap();
            let mut total = 0.0;
            for e in 0..m.num_elements() {
                let x = m.element_coords(e);
                let mut jac = vec![0.0; d * d];
                for a in 1..=d {
                    for c in 0..d {
                        jac[(a - 1) * d + c] = x[a][c] - x[0][c];
                    }
                }
                let det = match d {
                    1 => jac[0],
                    2 => jac[0] * jac[3] - jac[1] * jac[2],
                    _ => {
                        jac[0] * (jac[4] * jac[8] - jac[5] * jac[7])
                            - jac[1] * (jac[3] * jac[8] - jac[5] * jac[6])
                            + jac[2] * (jac[3] * jac[7] - jac[4] * jac[6])
                    }
                };
                let fact = (1..=d).product::<usize>() as f64;
                assert!((det.abs() / fact - m.element_volume(e)).abs() < 1e-14);
                total += det.abs() / fact;
            }
            assert!((total - 1.5f64.powi(d as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn every_dof_is_referenced_enough() {
        for d in 1..=3 {
            let m = PeriodicMesh::build(d, 1.0, 3).unwrap();
            let mut count = vec![0usize; m.num_dofs()];
            for e in 0..m.num_elements() {
                for &v in m.element(e) {
                    assert!(v < m.num_dofs());
                    count[v] += 1;
                }
            }
            assert!(count.iter().all(|&c| c >= d + 1));
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(matches!(PeriodicMesh::build(4, 1.0, 4), Err(SacError::Config(_))));
        assert!(matches!(PeriodicMesh::build(1, 1.0, 1), Err(SacError::Config(_))));
        assert!(matches!(PeriodicMesh::build(2, -1.0, 4), Err(SacError::Config(_))));
    }

    #[test]
    fn interpolation_weights_form_partition_of_unity() {
        for d in 1..=3 {
            let c = PeriodicMesh::build(d, 1.0, 2).unwrap();
            let f = PeriodicMesh::build(d, 1.0, 8).unwrap();
            for w in c.interpolation_weights(&f).unwrap() {
                let s: f64 = w.iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-15);
                assert!(w.iter().all(|(_, w)| *w > 0.0));
            }
        }
        let c = PeriodicMesh::build(1, 1.0, 3).unwrap();
        let f = PeriodicMesh::build(1, 1.0, 4).unwrap();
        assert!(matches!(c.interpolation_weights(&f), Err(SacError::Structure(_))));
    }
}
