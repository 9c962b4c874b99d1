//! Triangle meshes of the leaf surface: reconstruction, cleanup,
//! simplification, smoothing and area.

mod decimate;
mod heightfield;
mod io;
mod poisson;
mod smooth;

pub use decimate::decimate_quadric;
pub use heightfield::heightfield_mesh;
pub use io::{write_obj, write_ply};
pub use poisson::{screened_poisson, PoissonParams};
pub use smooth::smooth_laplacian;

use std::collections::HashSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("insufficient points for meshing: {got} < {needed}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("point cloud has no normals")]
    NormalsMissing,
    #[error("heightfield meshing needs source pixels and camera intrinsics on the cloud")]
    PixelsMissing,
    #[error("poisson solver did not converge (relative residual {residual:e} after {iterations} iterations)")]
    SolverNonConvergence { residual: f64, iterations: usize },
    #[error("degenerate point cloud: zero bounding-box extent")]
    DegenerateExtent,
    #[error("mesh has no densities")]
    DensitiesMissing,
    #[error("invalid meshing config: {0}")]
    BadConfig(String),
    #[error("decimation stalled at {reached} triangles (target {target}): no valid collapse left")]
    DecimationStalled { reached: usize, target: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Indexed triangle mesh, vertex positions in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    /// Per-vertex sample density from reconstruction.
    pub densities: Option<Vec<f64>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            densities: None,
        }
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Checks index range and that no triangle repeats a vertex.
    pub fn is_valid(&self) -> bool {
        let n = self.vertices.len();
        self.triangles
            .iter()
            .all(|t| t.iter().all(|&i| i < n) && t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
    }

    /// Drops unreferenced vertices and renumbers the rest in order of first
    /// use by vertex index.
    pub fn compact(&self) -> TriangleMesh {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i] = true;
            }
        }
        self.keep_vertices(&used)
    }

    fn keep_vertices(&self, keep: &[bool]) -> TriangleMesh {
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut densities = self.densities.as_ref().map(|_| Vec::new());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                remap[i] = vertices.len();
                vertices.push(self.vertices[i]);
                if let (Some(out), Some(d)) = (densities.as_mut(), self.densities.as_ref()) {
                    out.push(d[i]);
                }
            }
        }
        let triangles = self
            .triangles
            .iter()
            .filter(|t| t.iter().all(|&i| keep[i]))
            .map(|t| t.map(|i| remap[i]))
            .collect();
        TriangleMesh {
            vertices,
            triangles,
            densities,
        }
    }

    /// Removes triangles with repeated indices or zero area, duplicate
    /// triangles, triangles on edges shared by more than two faces, and
    /// unreferenced vertices.
    pub fn cleaned(&self) -> TriangleMesh {
        let mut m = self.clone();
        m.triangles.retain(|t| {
            t[0] != t[1] && t[1] != t[2] && t[0] != t[2] && self.triangle_area(t) > 0.0
        });
        let mut m = remove_duplicate_triangles(&m);
        let mut edge_count: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        m.triangles.retain(|t| {
            (0..3).all(|k| {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edge_count[&(a.min(b), a.max(b))] <= 2
            })
        });
        m.compact()
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| v + offset).collect(),
            ..self.clone()
        }
    }
}

/// Σ ‖(b−a)×(c−a)‖/2 over triangles, m².
pub fn surface_area(mesh: &TriangleMesh) -> f64 {
    mesh.triangles.iter().map(|t| mesh.triangle_area(t)).sum()
}

pub const M2_TO_CM2: f64 = 1.0e4;

/// Drops every vertex whose density is strictly below the mean density,
/// together with its incident triangles.
pub fn trim_low_density(mesh: &TriangleMesh) -> Result<TriangleMesh, MeshError> {
    let dens = mesh.densities.as_ref().ok_or(MeshError::DensitiesMissing)?;
    if dens.is_empty() {
        return Ok(mesh.clone());
    }
    let mean = dens.iter().sum::<f64>() / dens.len() as f64;
    let keep: Vec<bool> = dens.iter().map(|&d| !(d < mean)).collect();
    Ok(mesh.keep_vertices(&keep))
}

/// Collapses triangles that are equal as unordered vertex sets; the first
/// occurrence is kept and the vertex list is untouched.
pub fn remove_duplicate_triangles(mesh: &TriangleMesh) -> TriangleMesh {
    let mut seen = HashSet::new();
    let triangles = mesh
        .triangles
        .iter()
        .filter(|t| {
            let mut key = **t;
            key.sort_unstable();
            seen.insert(key)
        })
        .copied()
        .collect();
    TriangleMesh {
        triangles,
        ..mesh.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshingBackend {
    Poisson,
    Heightfield,
}

impl std::str::FromStr for MeshingBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "poisson" => Ok(Self::Poisson),
            "heightfield" => Ok(Self::Heightfield),
            other => Err(format!(
                "unknown meshing backend {other:?} (expected poisson or heightfield)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshingConfig {
    pub backend: MeshingBackend,
    pub octree_depth: usize,
    pub target_triangles: usize,
    pub laplacian_iterations: usize,
}

impl Default for MeshingConfig {
    fn default() -> Self {
        Self {
            backend: MeshingBackend::Poisson,
            octree_depth: 9,
            target_triangles: 100,
            laplacian_iterations: 3,
        }
    }
}

impl MeshingConfig {
    pub fn validate(&self) -> Result<(), MeshError> {
        if !(4..=10).contains(&self.octree_depth) {
            return Err(MeshError::BadConfig(format!(
                "octree_depth {} outside [4, 10]",
                self.octree_depth
            )));
        }
        if self.target_triangles < 4 {
            return Err(MeshError::BadConfig(format!(
                "target_triangles {} < 4",
                self.target_triangles
            )));
        }
        Ok(())
    }
}

pub const MIN_MESHING_POINTS: usize = 50;

/// Meshes an oriented cloud with the configured backend and returns a
/// cleaned mesh with densities.
pub fn reconstruct_surface(
    cloud: &PointCloud,
    config: &MeshingConfig,
) -> Result<TriangleMesh, MeshError> {
    config.validate()?;
    if cloud.len() < MIN_MESHING_POINTS {
        return Err(MeshError::InsufficientPoints {
            needed: MIN_MESHING_POINTS,
            got: cloud.len(),
        });
    }
    if cloud.normals.is_none() {
        return Err(MeshError::NormalsMissing);
    }
    let mesh = match config.backend {
        MeshingBackend::Poisson => screened_poisson(
            cloud,
            &PoissonParams {
                depth: config.octree_depth,
                ..Default::default()
            },
        )?,
        MeshingBackend::Heightfield => heightfield_mesh(cloud)?,
    };
    Ok(mesh.cleaned())
}

/// Reference meshes for tests and benchmarks.
pub mod shapes {
    use super::*;

    pub fn unit_cube() -> TriangleMesh {
        let v: Vec<Vector3<f64>> = (0..8)
            .map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let quads = [
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let mut t = Vec::new();
        for q in quads {
            t.push([q[0], q[1], q[2]]);
            t.push([q[0], q[2], q[3]]);
        }
        TriangleMesh::new(v, t)
    }

    /// Icosphere of radius `r` after `subdiv` 4-way splits (20·4^subdiv faces).
    pub fn icosphere(r: f64, subdiv: usize) -> TriangleMesh {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut v: Vec<Vector3<f64>> = [
            (-1.0, phi, 0.0),
            (1.0, phi, 0.0),
            (-1.0, -phi, 0.0),
            (1.0, -phi, 0.0),
            (0.0, -1.0, phi),
            (0.0, 1.0, phi),
            (0.0, -1.0, -phi),
            (0.0, 1.0, -phi),
            (phi, 0.0, -1.0),
            (phi, 0.0, 1.0),
            (-phi, 0.0, -1.0),
            (-phi, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
        .collect();
        let mut f: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdiv {
            let mut cache = std::collections::HashMap::new();
            let mut mid = |a: usize, b: usize, v: &mut Vec<Vector3<f64>>| -> usize {
                *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    v.push(((v[a] + v[b]) / 2.0).normalize());
                    v.len() - 1
                })
            };
            let mut nf = Vec::with_capacity(f.len() * 4);
            for t in &f {
                let ab = mid(t[0], t[1], &mut v);
                let bc = mid(t[1], t[2], &mut v);
                let ca = mid(t[2], t[0], &mut v);
                nf.push([t[0], ab, ca]);
                nf.push([t[1], bc, ab]);
                nf.push([t[2], ca, bc]);
                nf.push([ab, bc, ca]);
            }
            f = nf;
        }
        TriangleMesh::new(v.into_iter().map(|p| p * r).collect(), f)
    }

    /// Regular n×n grid of unit squares in the z = `z` plane, two triangles each.
    pub fn grid(n: usize, z: f64) -> TriangleMesh {
        let mut v = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                v.push(Vector3::new(i as f64, j as f64, z));
            }
        }
        let id = |i: usize, j: usize| j * (n + 1) + i;
        let mut t = Vec::new();
        for j in 0..n {
            for i in 0..n {
                t.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                t.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        TriangleMesh::new(v, t)
    }
}

#[cfg(test)]
mod tests {
    use super::shapes::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn area_examples() {
        let tri = TriangleMesh::new(
            vec![
                Vector3::zeros(),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        );
        assert_eq!(surface_area(&tri), 0.5);
        assert!((surface_area(&unit_cube()) - 6.0).abs() < 1e-12);
        assert_eq!(surface_area(&TriangleMesh::default()), 0.0);
    }

    fn heron(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> f64 {
        let (x, y, z) = ((b - a).norm(), (c - b).norm(), (a - c).norm());
        // Kahan's numerically stable arrangement, sides sorted descending.
        let mut s = [x, y, z];
        s.sort_by(|p, q| q.total_cmp(p));
        let [p, q, r] = s;
        0.25 * ((p + (q + r)) * (r - (p - q)) * (r + (p - q)) * (p + (q - r)))
            .max(0.0)
            .sqrt()
    }

    #[test]
    fn cross_product_area_matches_heron() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v = Vec::new();
        let mut t = Vec::new();
        for i in 0..100 {
            for _ in 0..3 {
                v.push(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ));
            }
            t.push([3 * i, 3 * i + 1, 3 * i + 2]);
        }
        let m = TriangleMesh::new(v.clone(), t);
        let want: f64 = (0..100)
            .map(|i| heron(v[3 * i], v[3 * i + 1], v[3 * i + 2]))
            .sum();
        assert!((surface_area(&m) - want).abs() / want < 1e-9);
    }

    #[test]
    fn area_is_translation_invariant() {
        let m = icosphere(0.3, 2);
        let a = surface_area(&m);
        let b = surface_area(&m.translated(&Vector3::new(5.0, -3.0, 10.0)));
        assert!((a - b).abs() < 1e-12 * a.max(1.0) * 100.0);
    }

    #[test]
    fn trim_uniform_is_noop_and_half_split_removes_low() {
        let mut m = grid(4, 0.0);
        m.densities = Some(vec![2.0; m.vertices.len()]);
        let t = trim_low_density(&m).unwrap();
        assert_eq!(
            (t.vertices.len(), t.triangles.len()),
            (m.vertices.len(), m.triangles.len())
        );

        let n = m.vertices.len();
        let dens: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 3.0 }).collect();
        // Even vertex count so the mean is exactly 2.0.
        let mut m2 = TriangleMesh::new(m.vertices[..n - 1].to_vec(), vec![[0, 1, 2], [1, 2, 3]]);
        m2.densities = Some(dens[..n - 1].to_vec());
        let t2 = trim_low_density(&m2).unwrap();
        assert!(t2.densities.unwrap().iter().all(|&d| d == 3.0));
        assert!(t2.triangles.is_empty());

        assert!(matches!(
            trim_low_density(&grid(1, 0.0)),
            Err(MeshError::DensitiesMissing)
        ));
    }

    #[test]
    fn duplicate_triangles() {
        let v = vec![
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let twice = TriangleMesh::new(v.clone(), vec![[0, 1, 2], [0, 1, 2]]);
        let once = remove_duplicate_triangles(&twice);
        assert_eq!(once.triangles.len(), 1);
        assert_eq!(surface_area(&once), surface_area(&twice) / 2.0);

        let permuted = TriangleMesh::new(v, vec![[0, 1, 2], [2, 0, 1], [1, 0, 2]]);
        assert_eq!(
            remove_duplicate_triangles(&permuted).triangles,
            vec![[0, 1, 2]]
        );

        let cube = unit_cube();
        assert_eq!(remove_duplicate_triangles(&cube), cube);
    }

    #[test]
    fn cleaned_drops_degenerate_and_unreferenced() {
        let v = vec![
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(9.0, 9.0, 9.0),
        ];
        let m = TriangleMesh::new(v, vec![[0, 1, 2], [0, 1, 3], [1, 1, 2]]);
        let c = m.cleaned();
        assert_eq!(c.triangles.len(), 1);
        assert_eq!(c.vertices.len(), 3);
        assert!(c.is_valid());
    }

    #[test]
    fn config_validation() {
        assert!(MeshingConfig::default().validate().is_ok());
        assert_eq!(MeshingConfig::default().octree_depth, 9);
        let bad = MeshingConfig {
            octree_depth: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            "heightfield".parse::<MeshingBackend>(),
            Ok(MeshingBackend::Heightfield)
        );
    }
}
