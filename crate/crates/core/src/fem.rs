//! P1 finite-element matrices: mass, stiffness and first moments.
//!
//! All element integrals are exact. With barycentric coordinates λ_a,
//! ∫λ_aλ_b = V(1+δ_ab)/20 and ∫λ_aλ_bλ_c = V/20, V/60 or V/120 when three,
//! two or none of the indices coincide; the moment matrices follow from
//! x = Σ_c x_c λ_c.

use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{Mesh, Point};
use crate::sparse::SparseSym;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("diffusivity must be positive and finite, got {0}")]
    InvalidDiffusivity(f64),
    #[error("element {0} is degenerate")]
    DegenerateElement(usize),
    #[error("node {0} is not referenced by any element; compact the mesh first")]
    DanglingNode(usize),
}

/// Assembled FEM matrices. Moments are taken about `origin`.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    pub mass: SparseSym,
    /// ∫ D₀ ∇φ_j·∇φ_k.
    pub stiffness: SparseSym,
    /// ∫ (x_i − origin_i) φ_j φ_k for i = x, y, z.
    pub moments: [SparseSym; 3],
    pub d0: f64,
    pub origin: Point,
}

impl FemMatrices {
    pub fn dim(&self) -> usize {
        self.mass.dim()
    }

    /// Σ_i g_i J^i.
    pub fn moment_combination(&self, g: [f64; 3]) -> SparseSym {
        let mut t = Vec::new();
        for (i, m) in self.moments.iter().enumerate() {
            if g[i] != 0.0 {
                t.extend(m.iter_upper().map(|(r, c, v)| (r, c, g[i] * v)));
            }
        }
        SparseSym::from_triplets(self.dim(), t)
    }
}

const CHUNK: usize = 4096;

struct Local {
    nodes: [usize; 4],
    mass: [[f64; 4]; 4],
    stiff: [[f64; 4]; 4],
    mom: [[[f64; 4]; 4]; 3],
}

/// Assembles with moments about the coordinate origin.
pub fn assemble(mesh: &Mesh, d0: f64) -> Result<FemMatrices, FemError> {
    assemble_about(mesh, d0, [0.0; 3])
}

/// Assembles with moments about the mesh centroid.
pub fn assemble_centered(mesh: &Mesh, d0: f64) -> Result<FemMatrices, FemError> {
    assemble_about(mesh, d0, mesh.centroid())
}

pub fn assemble_about(mesh: &Mesh, d0: f64, origin: Point) -> Result<FemMatrices, FemError> {
    if !(d0 > 0.0 && d0.is_finite()) {
        return Err(FemError::InvalidDiffusivity(d0));
    }
    let n = mesh.n_nodes();
    let mut used = vec![false; n];
    for el in mesh.elements() {
        for &v in el {
            used[v] = true;
        }
    }
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(FemError::DanglingNode(i));
    }

    let ne = mesh.n_elements();
    let chunks: Vec<Result<Vec<Local>, FemError>> = (0..ne.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            (c * CHUNK..((c + 1) * CHUNK).min(ne))
                .map(|e| local_matrices(mesh, e, d0, origin))
                .collect()
        })
        .collect();

    let mut tm = Vec::with_capacity(ne * 16);
    let mut ts = Vec::with_capacity(ne * 16);
    let mut tj: [Vec<(usize, usize, f64)>; 3] = Default::default();
    for chunk in chunks {
        for loc in chunk? {
            for a in 0..4 {
                for b in a..4 {
                    let (i, j) = (loc.nodes[a], loc.nodes[b]);
                    tm.push((i, j, loc.mass[a][b]));
                    ts.push((i, j, loc.stiff[a][b]));
                    for d in 0..3 {
                        tj[d].push((i, j, loc.mom[d][a][b]));
                    }
                }
            }
        }
    }
    let [jx, jy, jz] = tj;
    Ok(FemMatrices {
        mass: SparseSym::from_triplets(n, tm),
        stiffness: SparseSym::from_triplets(n, ts),
        moments: [
            SparseSym::from_triplets(n, jx),
            SparseSym::from_triplets(n, jy),
            SparseSym::from_triplets(n, jz),
        ],
        d0,
        origin,
    })
}

fn local_matrices(mesh: &Mesh, e: usize, d0: f64, origin: Point) -> Result<Local, FemError> {
    let nodes = mesh.elements()[e];
    let x = mesh.element_vertices(e).map(|p| [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]]);
    let vol = mesh.element_volume(e);
    if !(vol > 0.0) {
        return Err(FemError::DegenerateElement(e));
    }
    let grads = barycentric_gradients(&x, vol);

    let mut mass = [[0.0; 4]; 4];
    let mut stiff = [[0.0; 4]; 4];
    let mut mom = [[[0.0; 4]; 4]; 3];
    for a in 0..4 {
        for b in 0..4 {
            mass[a][b] = if a == b { vol / 10.0 } else { vol / 20.0 };
            stiff[a][b] = d0 * vol * dot(grads[a], grads[b]);
            for (c, xc) in x.iter().enumerate() {
                let w = triple_weight(a, b, c, vol);
                for d in 0..3 {
                    mom[d][a][b] += xc[d] * w;
                }
            }
        }
    }
    Ok(Local {
        nodes,
        mass,
        stiff,
        mom,
    })
}

/// ∫ λ_a λ_b λ_c over a tet of volume `vol`.
fn triple_weight(a: usize, b: usize, c: usize, vol: f64) -> f64 {
    if a == b && b == c {
        vol / 20.0
    } else if a == b || b == c || a == c {
        vol / 60.0
    } else {
        vol / 120.0
    }
}

/// Gradients of the four barycentric coordinates.
fn barycentric_gradients(x: &[[f64; 3]; 4], vol: f64) -> [[f64; 3]; 4] {
    let e = |i: usize| [x[i][0] - x[0][0], x[i][1] - x[0][1], x[i][2] - x[0][2]];
    let (e1, e2, e3) = (e(1), e(2), e(3));
    // Rows of the inverse Jacobian: ∇λ_1..3 = (e2×e3, e3×e1, e1×e2) / 6V.
    let s = 1.0 / (6.0 * vol);
    let g1 = cross(e2, e3).map(|v| v * s);
    let g2 = cross(e3, e1).map(|v| v * s);
    let g3 = cross(e1, e2).map(|v| v * s);
    let g0 = [
        -(g1[0] + g2[0] + g3[0]),
        -(g1[1] + g2[1] + g3[1]),
        -(g1[2] + g2[2] + g3[2]),
    ];
    [g0, g1, g2, g3]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_tet() -> Mesh {
        let nodes = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Mesh::from_parts(nodes, vec![[0, 1, 2, 3]]).unwrap().0
    }

    #[test]
    fn reference_tet_entries() {
        let f = assemble(&reference_tet(), 1.0).unwrap();
        assert!((f.mass.get(0, 0) - 1.0 / 60.0).abs() < 1e-17);
        assert!((f.mass.get(0, 1) - 1.0 / 120.0).abs() < 1e-17);
        assert!((f.stiffness.get(1, 1) - 1.0 / 6.0).abs() < 1e-16);
        assert!((f.moments[0].get(1, 1) - 1.0 / 120.0).abs() < 1e-17);
    }

    #[test]
    fn rejects_bad_diffusivity() {
        assert!(matches!(
            assemble(&reference_tet(), 0.0),
            Err(FemError::InvalidDiffusivity(_))
        ));
    }

    #[test]
    fn rejects_dangling_nodes() {
        let nodes = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [3.0, 3.0, 3.0],
        ];
        let m = Mesh::from_parts(nodes, vec![[0, 1, 2, 3]]).unwrap().0;
        assert!(matches!(assemble(&m, 1.0), Err(FemError::DanglingNode(4))));
    }

    #[test]
    fn centered_moments_integrate_to_zero() {
        let m = crate::mesh::generate_box_mesh([3.0, 2.0, 1.0], [3, 2, 2]).unwrap();
        let f = assemble_centered(&m, 2.0).unwrap();
        let ones = vec![1.0; f.dim()];
        for j in &f.moments {
            assert!(j.bilinear(&ones, &ones).abs() < 1e-13);
        }
    }
}
