use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;

use super::TriangleMesh;

/// Uniform-weight Laplacian smoothing with simultaneous updates.
///
/// Each iteration moves every vertex to the centroid of its 1-ring. Vertices
/// on a boundary edge average only their boundary neighbors so open borders
/// slide along themselves instead of collapsing inward across the surface.
pub fn smooth_laplacian(mesh: &TriangleMesh, iterations: usize) -> TriangleMesh {
    if iterations == 0 || mesh.triangles.is_empty() {
        return mesh.clone();
    }
    let n = mesh.vertices.len();
    let mut edge_faces: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *edge_faces.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut ring: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut boundary_ring: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (&(a, b), &count) in &edge_faces {
        ring[a].insert(b);
        ring[b].insert(a);
        if count == 1 {
            boundary_ring[a].insert(b);
            boundary_ring[b].insert(a);
        }
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let src = if boundary_ring[i].is_empty() {
                &ring[i]
            } else {
                &boundary_ring[i]
            };
            src.iter().copied().collect()
        })
        .collect();

    let mut pos = mesh.vertices.clone();
    for _ in 0..iterations {
        let next: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let nb = &neighbors[i];
                if nb.is_empty() {
                    pos[i]
                } else {
                    nb.iter().map(|&j| pos[j]).sum::<Vector3<f64>>() / nb.len() as f64
                }
            })
            .collect();
        pos = next;
    }
    TriangleMesh {
        vertices: pos,
        ..mesh.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes::{grid, icosphere};
    use crate::mesh::surface_area;

    #[test]
    fn zero_iterations_is_identity() {
        let m = icosphere(1.0, 1);
        assert_eq!(smooth_laplacian(&m, 0), m);
    }

    #[test]
    fn plane_stays_planar_and_connectivity_is_kept() {
        let m = grid(6, 2.5);
        let s = smooth_laplacian(&m, 3);
        assert_eq!(s.triangles, m.triangles);
        assert!(s.vertices.iter().all(|v| (v.z - 2.5).abs() < 1e-12));
    }

    #[test]
    fn lifted_center_returns_to_ring_centroid() {
        // Hexagonal fan: center lifted by h over a planar ring of radius 1.
        let h = 0.37;
        let mut v = vec![Vector3::new(0.0, 0.0, h)];
        for k in 0..6 {
            let a = k as f64 * std::f64::consts::PI / 3.0;
            v.push(Vector3::new(a.cos(), a.sin(), 0.0));
        }
        let t: Vec<[usize; 3]> = (0..6).map(|k| [0, 1 + k, 1 + (k + 1) % 6]).collect();
        let s = smooth_laplacian(&TriangleMesh::new(v, t), 1);
        assert!(s.vertices[0].norm() < 1e-12);
    }

    #[test]
    fn closed_convex_mesh_does_not_grow() {
        let m = icosphere(1.0, 3);
        let before = surface_area(&m);
        let after = surface_area(&smooth_laplacian(&m, 3));
        assert!(after <= before + 1e-12);
    }
}
