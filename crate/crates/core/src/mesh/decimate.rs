use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use super::{MeshError, TriangleMesh};

/// Weight of the boundary-preserving constraint planes relative to face planes.
const BOUNDARY_WEIGHT: f64 = 1000.0;
/// Minimum cosine between a face normal before and after a collapse.
const MIN_NORMAL_COS: f64 = 1e-3;

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
    stamp_a: u32,
    stamp_b: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Min-heap on cost, ties broken by vertex ids.
    fn cmp(&self, o: &Self) -> Ordering {
        o.cost
            .total_cmp(&self.cost)
            .then_with(|| (o.a, o.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn plane_quadric(n: &Vector3<f64>, p: &Vector3<f64>, w: f64) -> Matrix4<f64> {
    let q = Vector4::new(n.x, n.y, n.z, -n.dot(p));
    q * q.transpose() * w
}

fn quadric_cost(q: &Matrix4<f64>, p: &Vector3<f64>) -> f64 {
    let h = Vector4::new(p.x, p.y, p.z, 1.0);
    (h.transpose() * q * h)[0].max(0.0)
}

struct Decimator {
    pos: Vec<Vector3<f64>>,
    tris: Vec<[usize; 3]>,
    tri_alive: Vec<bool>,
    vert_tris: Vec<Vec<usize>>,
    quadric: Vec<Matrix4<f64>>,
    boundary: Vec<bool>,
    stamp: Vec<u32>,
    alive_tris: usize,
}

impl Decimator {
    fn new(mesh: &TriangleMesh) -> Self {
        let n = mesh.vertices.len();
        let mut vert_tris = vec![Vec::new(); n];
        let mut quadric = vec![Matrix4::zeros(); n];
        let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let [a, b, c] = t.map(|i| mesh.vertices[i]);
            let cr = (b - a).cross(&(c - a));
            let area = 0.5 * cr.norm();
            if area > 0.0 {
                let q = plane_quadric(&cr.normalize(), &a, area);
                for &i in t {
                    quadric[i] += q;
                }
            }
            for k in 0..3 {
                vert_tris[t[k]].push(ti);
                let (u, v) = (t[k], t[(k + 1) % 3]);
                edge_faces.entry((u.min(v), u.max(v))).or_default().push(ti);
            }
        }
        let mut boundary = vec![false; n];
        let mut keys: Vec<_> = edge_faces.iter().filter(|(_, f)| f.len() == 1).collect();
        keys.sort_by_key(|(k, _)| **k);
        for (&(u, v), faces) in keys {
            boundary[u] = true;
            boundary[v] = true;
            let t = mesh.triangles[faces[0]];
            let [a, b, c] = t.map(|i| mesh.vertices[i]);
            let fnorm = (b - a).cross(&(c - a));
            let e = mesh.vertices[v] - mesh.vertices[u];
            let n = e.cross(&fnorm);
            if n.norm() > 0.0 {
                let q = plane_quadric(
                    &n.normalize(),
                    &mesh.vertices[u],
                    BOUNDARY_WEIGHT * e.norm_squared(),
                );
                quadric[u] += q;
                quadric[v] += q;
            }
        }
        Self {
            pos: mesh.vertices.clone(),
            tris: mesh.triangles.clone(),
            tri_alive: vec![true; mesh.triangles.len()],
            vert_tris,
            quadric,
            boundary,
            stamp: vec![0; n],
            alive_tris: mesh.triangles.len(),
        }
    }

    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        let mut s = BTreeSet::new();
        for &t in &self.vert_tris[v] {
            if self.tri_alive[t] {
                s.extend(self.tris[t].iter().copied().filter(|&w| w != v));
            }
        }
        s
    }

    /// Faces containing both endpoints and their opposite vertices.
    fn edge_faces(&self, a: usize, b: usize) -> Vec<(usize, usize)> {
        self.vert_tris[a]
            .iter()
            .filter(|&&t| self.tri_alive[t] && self.tris[t].contains(&b))
            .map(|&t| {
                (
                    t,
                    *self.tris[t].iter().find(|&&w| w != a && w != b).unwrap(),
                )
            })
            .collect()
    }

    /// Chooses the surviving vertex and its new position, or `None` when the
    /// edge may not be collapsed on boundary grounds.
    fn plan(&self, a: usize, b: usize) -> Option<(usize, usize, Vector3<f64>, f64)> {
        let q = self.quadric[a] + self.quadric[b];
        let (ba, bb) = (self.boundary[a], self.boundary[b]);
        let faces = self.edge_faces(a, b).len();
        if ba && bb && faces != 1 {
            return None;
        }
        if ba != bb {
            let (keep, drop) = if ba { (a, b) } else { (b, a) };
            let p = self.pos[keep];
            return Some((keep, drop, p, quadric_cost(&q, &p)));
        }
        let mut cands = vec![self.pos[a], self.pos[b], (self.pos[a] + self.pos[b]) / 2.0];
        let m: Matrix3<f64> = q.fixed_view::<3, 3>(0, 0).into();
        let rhs = -Vector3::new(q[(0, 3)], q[(1, 3)], q[(2, 3)]);
        let scale = m.norm();
        if scale > 0.0 && m.determinant().abs() > 1e-10 * scale.powi(3) {
            if let Some(inv) = m.try_inverse() {
                let p = inv * rhs;
                let len = (self.pos[a] - self.pos[b]).norm();
                if (p - cands[2]).norm() <= 2.0 * len {
                    cands.insert(0, p);
                }
            }
        }
        let (p, cost) = cands
            .into_iter()
            .map(|p| (p, quadric_cost(&q, &p)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        Some((a.min(b), a.max(b), p, cost))
    }

    fn link_ok(&self, a: usize, b: usize) -> bool {
        let na = self.neighbors(a);
        let nb = self.neighbors(b);
        let common: BTreeSet<usize> = na.intersection(&nb).copied().collect();
        let opposite: BTreeSet<usize> = self.edge_faces(a, b).into_iter().map(|(_, w)| w).collect();
        common == opposite
    }

    fn geometry_ok(&self, keep: usize, drop: usize, p: &Vector3<f64>) -> bool {
        for v in [keep, drop] {
            for &t in &self.vert_tris[v] {
                if !self.tri_alive[t] {
                    continue;
                }
                let tri = self.tris[t];
                if tri.contains(&keep) && tri.contains(&drop) {
                    continue;
                }
                let old = tri.map(|i| self.pos[i]);
                let new = tri.map(|i| {
                    if i == keep || i == drop {
                        *p
                    } else {
                        self.pos[i]
                    }
                });
                let n0 = (old[1] - old[0]).cross(&(old[2] - old[0]));
                let n1 = (new[1] - new[0]).cross(&(new[2] - new[0]));
                let (l0, l1) = (n0.norm(), n1.norm());
                let scale = (new[1] - new[0])
                    .norm_squared()
                    .max((new[2] - new[0]).norm_squared());
                if l1 <= 1e-12 * scale || l0 == 0.0 || n0.dot(&n1) <= MIN_NORMAL_COS * l0 * l1 {
                    return false;
                }
            }
        }
        true
    }

    fn push_edges(&self, v: usize, heap: &mut BinaryHeap<Candidate>) {
        for w in self.neighbors(v) {
            if let Some((_, _, _, cost)) = self.plan(v, w) {
                let (a, b) = (v.min(w), v.max(w));
                heap.push(Candidate {
                    cost,
                    a,
                    b,
                    stamp_a: self.stamp[a],
                    stamp_b: self.stamp[b],
                });
            }
        }
    }

    fn collapse(&mut self, keep: usize, drop: usize, p: Vector3<f64>) {
        for (t, _) in self.edge_faces(keep, drop) {
            self.tri_alive[t] = false;
            self.alive_tris -= 1;
        }
        let moved: Vec<usize> = self.vert_tris[drop]
            .iter()
            .copied()
            .filter(|&t| self.tri_alive[t])
            .collect();
        for t in moved {
            for i in self.tris[t].iter_mut() {
                if *i == drop {
                    *i = keep;
                }
            }
            self.vert_tris[keep].push(t);
        }
        self.vert_tris[drop].clear();
        let tri_alive = &self.tri_alive;
        self.vert_tris[keep].retain(|&t| tri_alive[t]);
        self.vert_tris[keep].sort_unstable();
        self.vert_tris[keep].dedup();
        self.pos[keep] = p;
        let qd = self.quadric[drop];
        self.quadric[keep] += qd;
        self.boundary[keep] |= self.boundary[drop];
        self.stamp[keep] += 1;
        self.stamp[drop] += 1;
    }
}

/// Quadric-error edge-collapse simplification down to at most `target`
/// triangles. Boundary vertices carry extra constraint planes and interior
/// vertices merge into them, so open outlines are kept in place. Collapses
/// that break the link condition, flip a face or create a degenerate face
/// are rejected. Meshes already at or below `target` pass through unchanged.
pub fn decimate_quadric(mesh: &TriangleMesh, target: usize) -> Result<TriangleMesh, MeshError> {
    if mesh.triangles.len() <= target {
        return Ok(mesh.clone());
    }
    let target = target.max(4);
    let mut d = Decimator::new(mesh);
    let mut heap = BinaryHeap::new();
    for v in 0..mesh.vertices.len() {
        for w in d.neighbors(v) {
            if v < w {
                if let Some((_, _, _, cost)) = d.plan(v, w) {
                    heap.push(Candidate {
                        cost,
                        a: v,
                        b: w,
                        stamp_a: 0,
                        stamp_b: 0,
                    });
                }
            }
        }
    }
    while d.alive_tris > target {
        let Some(c) = heap.pop() else {
            return Err(MeshError::DecimationStalled {
                reached: d.alive_tris,
                target,
            });
        };
        if c.stamp_a != d.stamp[c.a] || c.stamp_b != d.stamp[c.b] {
            continue;
        }
        let Some((keep, drop, p, _)) = d.plan(c.a, c.b) else {
            continue;
        };
        if !d.link_ok(keep, drop) || !d.geometry_ok(keep, drop, &p) {
            continue;
        }
        let ring = d.neighbors(drop);
        d.collapse(keep, drop, p);
        d.push_edges(keep, &mut heap);
        // Neighbors' face geometry changed, which can unblock their edges.
        for w in ring {
            if w != keep {
                d.stamp[w] += 1;
                d.push_edges(w, &mut heap);
            }
        }
    }

    let triangles: Vec<[usize; 3]> = d
        .tris
        .iter()
        .zip(&d.tri_alive)
        .filter(|(_, &alive)| alive)
        .map(|(t, _)| *t)
        .collect();
    let out = TriangleMesh {
        vertices: d.pos,
        triangles,
        densities: mesh.densities.clone(),
    };
    Ok(out.compact())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes::{grid, icosphere};
    use crate::mesh::surface_area;

    #[test]
    fn small_mesh_passes_through() {
        let m = grid(5, 0.0);
        assert_eq!(m.triangles.len(), 50);
        assert_eq!(decimate_quadric(&m, 100).unwrap(), m);
    }

    #[test]
    fn icosphere_to_hundred() {
        let m = icosphere(1.0, 3);
        assert_eq!(m.triangles.len(), 1280);
        let d = decimate_quadric(&m, 100).unwrap();
        let n = d.triangles.len();
        assert!((98..=100).contains(&n), "{n}");
        assert!(d.is_valid());
        let (a0, a1) = (surface_area(&m), surface_area(&d));
        assert!((a1 - a0).abs() / a0 < 0.15, "{a0} {a1}");
        // Closed 2-manifold stays closed: every edge has two faces.
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &d.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
    }

    #[test]
    fn planar_grid_keeps_outline_area() {
        let m = grid(30, 1.0);
        let d = decimate_quadric(&m, 100).unwrap();
        assert!(d.triangles.len() <= 100 && d.triangles.len() >= 98);
        assert!((surface_area(&d) - 900.0).abs() < 1e-6);
        for t in &d.triangles {
            let [a, b, c] = t.map(|i| d.vertices[i]);
            assert!((b - a).cross(&(c - a)).z > 0.0);
        }
    }

    #[test]
    fn never_increases_triangle_count() {
        let m = icosphere(0.5, 2);
        for target in [10, 50, 200, 400] {
            let d = decimate_quadric(&m, target).unwrap();
            let n = d.triangles.len();
            assert!(n <= m.triangles.len());
            assert!(
                n <= target && n + 2 >= target.min(m.triangles.len()),
                "{target} {n}"
            );
        }
    }
}
