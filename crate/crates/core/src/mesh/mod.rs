//! Tetrahedral meshes: validation, geometric queries, ingestion and
//! structured generation.
//!
//! A [`Mesh`] is immutable once built. Construction orients every element
//! positively, extracts the boundary (faces owned by exactly one element)
//! with outward unit normals, and rejects meshes that are degenerate,
//! non-manifold or split into several pieces.

mod generate;
mod io;

use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::units::LengthUnit;

pub use generate::{generate_box_mesh, generate_grid_mesh};
pub use io::{canonical_ele_text, canonical_node_text, load_mesh, parse_mesh, save_mesh};

pub type Point = [f64; 3];

/// Elements with |volume| below this (μm³) are rejected.
pub const DEGENERATE_VOLUME: f64 = 1e-12;

/// Tolerance on ‖u‖ − 1 for direction arguments.
pub const UNIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("mesh has no elements")]
    Empty,
    #[error("element {element} references node {index}, valid range is {first}..={last}")]
    IndexOutOfRange {
        element: usize,
        index: i64,
        first: i64,
        last: i64,
    },
    #[error("element {element} is degenerate (volume {volume:e} μm³)")]
    DegenerateElement { element: usize, volume: f64 },
    #[error("face {face:?} is shared by {count} elements")]
    NonManifoldFace { face: [usize; 3], count: usize },
    #[error("mesh is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("extent must be positive and finite, got {0:?}")]
    InvalidExtent([f64; 3]),
    #[error("cell counts {0:?} are zero or overflow the index space")]
    InvalidCounts([usize; 3]),
    #[error("direction {0:?} is not a unit vector")]
    NonUnitDirection([f64; 3]),
}

/// A boundary triangle with its outward unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFace {
    pub nodes: [usize; 3],
    pub normal: [f64; 3],
    pub area: f64,
}

/// Diagnostics gathered while building a mesh.
#[derive(Debug, Clone, Default)]
pub struct MeshReport {
    /// Elements whose node order was swapped to make the volume positive.
    pub reoriented: usize,
    /// Nodes not referenced by any element. They are kept in the node list.
    pub dangling_nodes: Vec<usize>,
    /// Attribute or marker columns present in the input were dropped.
    pub discarded_markers: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<Point>,
    elements: Vec<[usize; 4]>,
    boundary: Vec<BoundaryFace>,
    unit: LengthUnit,
}

// Local faces of a positively oriented tet, ordered so the right-hand
// normal points away from the opposite vertex.
const LOCAL_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

impl Mesh {
    /// Validates `elements` against `nodes` and builds the mesh.
    pub fn from_parts(
        nodes: Vec<Point>,
        mut elements: Vec<[usize; 4]>,
    ) -> Result<(Mesh, MeshReport), MeshError> {
        if elements.is_empty() {
            return Err(MeshError::Empty);
        }
        let n = nodes.len();
        let mut report = MeshReport::default();

        for (e, el) in elements.iter_mut().enumerate() {
            if let Some(&bad) = el.iter().find(|&&v| v >= n) {
                return Err(MeshError::IndexOutOfRange {
                    element: e,
                    index: bad as i64,
                    first: 0,
                    last: n as i64 - 1,
                });
            }
            let vol = signed_volume(&nodes, el);
            if !(vol.abs() >= DEGENERATE_VOLUME) {
                return Err(MeshError::DegenerateElement { element: e, volume: vol });
            }
            if vol < 0.0 {
                el.swap(2, 3);
                report.reoriented += 1;
            }
        }
        if report.reoriented > 0 {
            report
                .warnings
                .push(format!("{} elements reoriented", report.reoriented));
        }

        let boundary = extract_boundary(&nodes, &elements)?;

        let mut referenced = vec![false; n];
        for el in &elements {
            for &v in el {
                referenced[v] = true;
            }
        }
        let components = count_components(n, &elements, &referenced);
        if components != 1 {
            return Err(MeshError::Disconnected { components });
        }
        report.dangling_nodes = (0..n).filter(|&i| !referenced[i]).collect();
        if !report.dangling_nodes.is_empty() {
            report.warnings.push(format!(
                "{} dangling nodes retained (not referenced by any element)",
                report.dangling_nodes.len()
            ));
        }

        let mesh = Mesh {
            nodes,
            elements,
            boundary,
            unit: LengthUnit::Micrometre,
        };
        Ok((mesh, report))
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary
    }

    pub fn unit(&self) -> LengthUnit {
        self.unit
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element_vertices(&self, e: usize) -> [Point; 4] {
        self.elements[e].map(|v| self.nodes[v])
    }

    pub fn element_volume(&self, e: usize) -> f64 {
        signed_volume(&self.nodes, &self.elements[e])
    }

    /// |Ω| in μm³.
    pub fn volume(&self) -> f64 {
        let vols: Vec<f64> = (0..self.elements.len())
            .map(|e| self.element_volume(e))
            .collect();
        pairwise_sum(&vols)
    }

    /// |∂Ω| in μm².
    pub fn surface_area(&self) -> f64 {
        let areas: Vec<f64> = self.boundary.iter().map(|f| f.area).collect();
        pairwise_sum(&areas)
    }

    /// ∫_{∂Ω} (u·n)² ds in μm².
    pub fn directional_area(&self, u: [f64; 3]) -> Result<f64, MeshError> {
        check_unit(u)?;
        let terms: Vec<f64> = self
            .boundary
            .iter()
            .map(|f| {
                let c = dot(u, f.normal);
                f.area * c * c
            })
            .collect();
        Ok(pairwise_sum(&terms))
    }

    /// Σ area·n over the boundary; zero for a closed surface.
    pub fn weighted_normal_sum(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for f in &self.boundary {
            for i in 0..3 {
                acc[i] += f.area * f.normal[i];
            }
        }
        acc
    }

    /// ∫_Ω x dx / |Ω|.
    pub fn centroid(&self) -> Point {
        let mut first = [Vec::new(), Vec::new(), Vec::new()];
        for e in 0..self.elements.len() {
            let vol = self.element_volume(e);
            let v = self.element_vertices(e);
            for i in 0..3 {
                first[i].push(vol * (v[0][i] + v[1][i] + v[2][i] + v[3][i]) / 4.0);
            }
        }
        let vol = self.volume();
        [
            pairwise_sum(&first[0]) / vol,
            pairwise_sum(&first[1]) / vol,
            pairwise_sum(&first[2]) / vol,
        ]
    }

    /// Exact ∫_Ω (x_i − c_i)(x_j − c_j) dx about the point `c`.
    pub fn second_moment(&self, c: Point) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for e in 0..self.elements.len() {
            let vol = self.element_volume(e);
            let v = self.element_vertices(e).map(|p| sub(p, c));
            for i in 0..3 {
                for j in 0..3 {
                    let mut sq = 0.0;
                    let (mut si, mut sj) = (0.0, 0.0);
                    for p in &v {
                        sq += p[i] * p[j];
                        si += p[i];
                        sj += p[j];
                    }
                    out[i][j] += vol / 20.0 * (sq + si * sj);
                }
            }
        }
        out
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.nodes {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }

    /// SHA-256 of the canonical node and element text.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(canonical_node_text(self).as_bytes());
        h.update(canonical_ele_text(self).as_bytes());
        h.finalize().into()
    }

    /// Copy of the mesh with every node shifted by `offset`.
    pub fn translated(&self, offset: [f64; 3]) -> Mesh {
        let nodes = self
            .nodes
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        let boundary = self.boundary.clone();
        Mesh {
            nodes,
            elements: self.elements.clone(),
            boundary,
            unit: self.unit,
        }
    }

    /// Drops unreferenced nodes. Returns the compacted mesh and, for each
    /// old node index, its new index if it was kept.
    pub fn compact(&self) -> (Mesh, Vec<Option<usize>>) {
        let mut map = vec![None; self.nodes.len()];
        for el in &self.elements {
            for &v in el {
                map[v] = Some(0);
            }
        }
        let mut nodes = Vec::new();
        for (i, slot) in map.iter_mut().enumerate() {
            if slot.is_some() {
                *slot = Some(nodes.len());
                nodes.push(self.nodes[i]);
            }
        }
        let remap = |v: usize| map[v].expect("referenced node");
        let elements = self.elements.iter().map(|el| el.map(remap)).collect();
        let boundary = self
            .boundary
            .iter()
            .map(|f| BoundaryFace {
                nodes: f.nodes.map(remap),
                ..*f
            })
            .collect();
        let mesh = Mesh {
            nodes,
            elements,
            boundary,
            unit: self.unit,
        };
        (mesh, map)
    }

    /// Node adjacency through element edges, sorted, without self loops.
    pub fn node_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for el in &self.elements {
            for a in 0..4 {
                for b in 0..4 {
                    if a != b {
                        adj[el[a]].push(el[b]);
                    }
                }
            }
        }
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
        }
        adj
    }
}

fn extract_boundary(
    nodes: &[Point],
    elements: &[[usize; 4]],
) -> Result<Vec<BoundaryFace>, MeshError> {
    let mut faces: Vec<([usize; 3], usize, usize)> = Vec::with_capacity(elements.len() * 4);
    for (e, el) in elements.iter().enumerate() {
        for (k, lf) in LOCAL_FACES.iter().enumerate() {
            let mut key = lf.map(|i| el[i]);
            key.sort_unstable();
            faces.push((key, e, k));
        }
    }
    faces.sort_unstable();

    let mut boundary = Vec::new();
    let mut i = 0;
    while i < faces.len() {
        let mut j = i + 1;
        while j < faces.len() && faces[j].0 == faces[i].0 {
            j += 1;
        }
        match j - i {
            1 => {
                let (_, e, k) = faces[i];
                let tri = LOCAL_FACES[k].map(|l| elements[e][l]);
                let (normal, area) = triangle_normal(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
                boundary.push(BoundaryFace {
                    nodes: tri,
                    normal,
                    area,
                });
            }
            2 => {}
            count => {
                return Err(MeshError::NonManifoldFace {
                    face: faces[i].0,
                    count,
                })
            }
        }
        i = j;
    }
    Ok(boundary)
}

fn count_components(n: usize, elements: &[[usize; 4]], referenced: &[bool]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for el in elements {
        let r0 = find(&mut parent, el[0]);
        for &v in &el[1..] {
            let r = find(&mut parent, v);
            if r != r0 {
                parent[r] = r0;
            }
        }
    }
    (0..n)
        .filter(|&i| referenced[i] && find(&mut parent, i) == i)
        .count()
}

pub(crate) fn signed_volume(nodes: &[Point], el: &[usize; 4]) -> f64 {
    let p0 = nodes[el[0]];
    let a = sub(nodes[el[1]], p0);
    let b = sub(nodes[el[2]], p0);
    let c = sub(nodes[el[3]], p0);
    dot(a, cross(b, c)) / 6.0
}

fn triangle_normal(a: Point, b: Point, c: Point) -> ([f64; 3], f64) {
    let n = cross(sub(b, a), sub(c, a));
    let len = norm(n);
    ([n[0] / len, n[1] / len, n[2] / len], 0.5 * len)
}

pub(crate) fn check_unit(u: [f64; 3]) -> Result<(), MeshError> {
    if (norm(u) - 1.0).abs() > UNIT_TOLERANCE {
        return Err(MeshError::NonUnitDirection(u));
    }
    Ok(())
}

/// Pairwise (tree) summation; the order is fixed by the slice layout.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_tet() -> Mesh {
        let nodes = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Mesh::from_parts(nodes, vec![[0, 1, 2, 3]]).unwrap().0
    }

    #[test]
    fn reference_tet_geometry() {
        let m = unit_tet();
        assert!((m.volume() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.boundary_faces().len(), 4);
        let c = m.centroid();
        for x in c {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_orientation_is_fixed() {
        let nodes = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (m, report) = Mesh::from_parts(nodes, vec![[0, 2, 1, 3]]).unwrap();
        assert_eq!(report.reoriented, 1);
        assert!(m.element_volume(0) > 0.0);
    }

    #[test]
    fn outward_normals_on_reference_tet() {
        let m = unit_tet();
        let inner = [0.25, 0.25, 0.25];
        for f in m.boundary_faces() {
            let p = m.nodes()[f.nodes[0]];
            assert!(dot(f.normal, sub(p, inner)) > 0.0);
        }
        let s = m.weighted_normal_sum();
        assert!(norm(s) < 1e-15);
    }

    #[test]
    fn degenerate_element_rejected() {
        let nodes = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        let err = Mesh::from_parts(nodes, vec![[0, 1, 2, 3]]).unwrap_err();
        assert!(matches!(err, MeshError::DegenerateElement { .. }));
    }

    #[test]
    fn disjoint_tets_rejected() {
        let mut nodes = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let far: Vec<Point> = nodes.iter().map(|p| [p[0] + 5.0, p[1], p[2]]).collect();
        nodes.extend(far);
        let err = Mesh::from_parts(nodes, vec![[0, 1, 2, 3], [4, 5, 6, 7]]).unwrap_err();
        assert!(matches!(err, MeshError::Disconnected { components: 2 }));
    }

    #[test]
    fn dangling_node_is_reported_and_kept() {
        let nodes = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [9.0, 9.0, 9.0],
        ];
        let (m, report) = Mesh::from_parts(nodes, vec![[0, 1, 2, 3]]).unwrap();
        assert_eq!(report.dangling_nodes, vec![4]);
        assert_eq!(m.n_nodes(), 5);
        let (c, map) = m.compact();
        assert_eq!(c.n_nodes(), 4);
        assert_eq!(map[4], None);
    }

    #[test]
    fn non_unit_direction_rejected() {
        let m = unit_tet();
        assert!(m.directional_area([1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn non_manifold_face_rejected() {
        let nodes = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
            [0.3, 0.3, 1.0],
        ];
        let err = Mesh::from_parts(nodes, vec![[0, 1, 2, 3], [0, 2, 1, 4], [0, 1, 2, 5]])
            .unwrap_err();
        assert!(matches!(err, MeshError::NonManifoldFace { count: 3, .. }));
    }
}
