//! Structured tetrahedral meshes of boxes and unions of box cells.

use super::{Mesh, MeshError};

// Kuhn decomposition: one tet per axis permutation, all sharing the cell
// diagonal (0,0,0)-(1,1,1). Neighbouring cells then have matching faces.
const PERMUTATIONS: [([usize; 3], bool); 6] = [
    ([0, 1, 2], true),
    ([1, 2, 0], true),
    ([2, 0, 1], true),
    ([0, 2, 1], false),
    ([1, 0, 2], false),
    ([2, 1, 0], false),
];

/// Conforming mesh of `[0,Lx]×[0,Ly]×[0,Lz]` with `cells[i]` hexahedra
/// along axis `i`, each split into 6 tetrahedra. Nodes are numbered with x
/// varying fastest.
pub fn generate_box_mesh(extent: [f64; 3], cells: [usize; 3]) -> Result<Mesh, MeshError> {
    generate_grid_mesh(extent, cells, |_| true)
}

/// Like [`generate_box_mesh`] but keeps only the cells for which `keep`
/// returns true. Unused grid nodes are dropped.
pub fn generate_grid_mesh(
    extent: [f64; 3],
    cells: [usize; 3],
    keep: impl Fn([usize; 3]) -> bool,
) -> Result<Mesh, MeshError> {
    if extent.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(MeshError::InvalidExtent(extent));
    }
    let [nx, ny, nz] = cells;
    let node_count = (nx + 1)
        .checked_mul(ny + 1)
        .and_then(|v| v.checked_mul(nz + 1));
    let elem_count = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .and_then(|v| v.checked_mul(6));
    if cells.contains(&0) || node_count.is_none() || elem_count.is_none() {
        return Err(MeshError::InvalidCounts(cells));
    }
    let node_count = node_count.unwrap();
    let id = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);

    let mut elements = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !keep([i, j, k]) {
                    continue;
                }
                for (perm, even) in PERMUTATIONS {
                    let mut corner = [i, j, k];
                    let mut tet = [id(i, j, k); 4];
                    for (s, &axis) in perm.iter().enumerate() {
                        corner[axis] += 1;
                        tet[s + 1] = id(corner[0], corner[1], corner[2]);
                    }
                    if !even {
                        tet.swap(2, 3);
                    }
                    elements.push(tet);
                }
            }
        }
    }
    if elements.is_empty() {
        return Err(MeshError::Empty);
    }

    let mut map = vec![usize::MAX; node_count];
    for el in &elements {
        for &v in el {
            map[v] = 0;
        }
    }
    let mut nodes = Vec::new();
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                let g = id(i, j, k);
                if map[g] == 0 {
                    map[g] = nodes.len();
                    nodes.push([
                        extent[0] * i as f64 / nx as f64,
                        extent[1] * j as f64 / ny as f64,
                        extent[2] * k as f64 / nz as f64,
                    ]);
                }
            }
        }
    }
    for el in &mut elements {
        *el = el.map(|v| map[v]);
    }
    Ok(Mesh::from_parts(nodes, elements)?.0)
}
