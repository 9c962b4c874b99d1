//! Screened Poisson surface reconstruction on a nested sequence of regular
//! grids.
//!
//! The indicator function χ (≈1 inside, ≈0 outside) minimises
//!
//! ```text
//!   Σ_edges (χ_b − χ_a − g_e)²  +  α Σ_p w_p χ(p)²
//! ```
//!
//! where `g_e` is the finite-difference target obtained by splatting the
//! area-weighted normals onto the edge midpoints, `χ(p)` is trilinear
//! interpolation at a sample and `w_p = a_p / h²`. The coarsest level is a
//! full grid with zero Dirichlet boundary. Each finer level is solved only in
//! a narrow band of cells around the samples, with the band rim fixed to
//! values interpolated from the level below. The iso-surface is extracted
//! from the finest band by marching tetrahedra.

use std::collections::HashMap;

use nalgebra::Vector3;

use super::{MeshError, TriangleMesh};
use crate::cloud::PointCloud;
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonParams {
    /// Maximum grid depth; level `l` has `2^l` cells per side.
    pub depth: usize,
    /// Screening weight α.
    pub screening: f64,
    /// Ratio of the reconstruction cube to the largest bounding-box side.
    pub scale: f64,
    pub cg_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PoissonParams {
    fn default() -> Self {
        Self {
            depth: 9,
            screening: 4.0,
            scale: 1.25,
            cg_tolerance: 1e-7,
            max_iterations: 4000,
        }
    }
}

const BASE_LEVEL: usize = 5;
const MIN_LEVEL: usize = 4;
/// Cells around each sample's cell included in a fine band.
const BAND_CELLS: i64 = 2;
/// Neighbours used for the local sample-area estimate.
const AREA_NEIGHBORS: usize = 16;
/// Coverage at which the vertex density saturates to 1.
const DENSITY_SATURATION: f64 = 0.25;
/// Relative residual accepted when the iteration budget runs out.
const ACCEPT_RESIDUAL: f64 = 1e-3;

type Key = u64;

fn key(i: i64, j: i64, k: i64) -> Key {
    (i as u64) | ((j as u64) << 21) | ((k as u64) << 42)
}

fn unkey(k: Key) -> [i64; 3] {
    let m = (1u64 << 21) - 1;
    [
        (k & m) as i64,
        ((k >> 21) & m) as i64,
        ((k >> 42) & m) as i64,
    ]
}

struct Grid {
    origin: Vector3<f64>,
    side: f64,
}

impl Grid {
    fn h(&self, level: usize) -> f64 {
        self.side / (1u64 << level) as f64
    }

    fn node_pos(&self, level: usize, n: [i64; 3]) -> Vector3<f64> {
        self.origin + Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64) * self.h(level)
    }

    /// Continuous grid coordinates of `p` at `level`.
    fn coords(&self, level: usize, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.origin) / self.h(level)
    }
}

/// Trilinear stencil: base index and 8 (offset, weight) pairs.
fn trilinear(c: &Vector3<f64>, res: i64) -> Vec<([i64; 3], f64)> {
    let mut base = [0i64; 3];
    let mut frac = [0f64; 3];
    for d in 0..3 {
        let b = (c[d].floor() as i64).clamp(0, res - 1);
        base[d] = b;
        frac[d] = (c[d] - b as f64).clamp(0.0, 1.0);
    }
    let mut out = Vec::with_capacity(8);
    for corner in 0..8 {
        let mut idx = base;
        let mut w = 1.0;
        for d in 0..3 {
            if corner >> d & 1 == 1 {
                idx[d] += 1;
                w *= frac[d];
            } else {
                w *= 1.0 - frac[d];
            }
        }
        out.push((idx, w));
    }
    out
}

struct Level {
    level: usize,
    /// Node values, for lookups only.
    values: HashMap<Key, f64>,
    /// Sorted node keys of this level.
    nodes: Vec<Key>,
}

impl Level {
    fn eval(&self, grid: &Grid, p: &Vector3<f64>) -> Option<f64> {
        let res = 1i64 << self.level;
        let mut v = 0.0;
        for (n, w) in trilinear(&grid.coords(self.level, p), res) {
            v += w * self.values.get(&key(n[0], n[1], n[2]))?;
        }
        Some(v)
    }
}

fn eval_levels(levels: &[Level], grid: &Grid, p: &Vector3<f64>) -> f64 {
    levels
        .iter()
        .rev()
        .find_map(|l| l.eval(grid, p))
        .unwrap_or(0.0)
}

/// Compressed sparse rows, symmetric positive definite.
struct Csr {
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_by_key(|a| (a.0, a.1));
        let mut row_start = vec![0; n + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_start[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_start[r + 1] += row_start[r];
        }
        Self {
            row_start,
            cols,
            vals,
        }
    }

    fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in self.row_start[r]..self.row_start[r + 1] {
                s += self.vals[i] * x[self.cols[i]];
            }
            *out = s;
        }
    }

    fn diag(&self) -> Vec<f64> {
        (0..self.row_start.len() - 1)
            .map(|r| {
                (self.row_start[r]..self.row_start[r + 1])
                    .find(|&i| self.cols[i] == r)
                    .map_or(1.0, |i| self.vals[i])
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients starting from `x`.
fn solve_cg(a: &Csr, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<(), MeshError> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if n == 0 || bnorm == 0.0 {
        if bnorm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
        }
        return Ok(());
    }
    let inv_diag: Vec<f64> = a
        .diag()
        .iter()
        .map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = vec![0.0; n];
    a.mul(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    for _ in 0..max_iter {
        if rel <= tol {
            return Ok(());
        }
        a.mul(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if rel <= ACCEPT_RESIDUAL {
        Ok(())
    } else {
        Err(MeshError::SolverNonConvergence {
            residual: rel,
            iterations: max_iter,
        })
    }
}

struct Samples<'a> {
    points: &'a [Vector3<f64>],
    normals: &'a [Vector3<f64>],
    areas: Vec<f64>,
}

fn solve_level(
    grid: &Grid,
    level: usize,
    nodes: Vec<Key>,
    coarser: &[Level],
    samples: &Samples,
    params: &PoissonParams,
) -> Result<Level, MeshError> {
    let res = 1i64 << level;
    let h = grid.h(level);
    let present: HashMap<Key, usize> = nodes.iter().enumerate().map(|(i, &k)| (k, i)).collect();

    // Fixed nodes: the domain boundary (0) and the rim of the band.
    let mut fixed: Vec<Option<f64>> = vec![None; nodes.len()];
    for (i, &k) in nodes.iter().enumerate() {
        let n = unkey(k);
        if n.iter().any(|&c| c == 0 || c == res) {
            fixed[i] = Some(0.0);
            continue;
        }
        let rim = (0..3).any(|d| {
            [-1, 1].iter().any(|&s| {
                let mut m = n;
                m[d] += s;
                !present.contains_key(&key(m[0], m[1], m[2]))
            })
        });
        if rim {
            fixed[i] = Some(eval_levels(coarser, grid, &grid.node_pos(level, n)));
        }
    }
    let mut unknown = vec![usize::MAX; nodes.len()];
    let mut n_unknown = 0;
    for i in 0..nodes.len() {
        if fixed[i].is_none() {
            unknown[i] = n_unknown;
            n_unknown += 1;
        }
    }

    // Edge targets from staggered trilinear splats of −a_p n_p / h².
    let mut targets: [HashMap<Key, f64>; 3] = Default::default();
    for ((p, n), &a) in samples
        .points
        .iter()
        .zip(samples.normals)
        .zip(&samples.areas)
    {
        let c = grid.coords(level, p);
        for d in 0..3 {
            let mut cs = c;
            cs[d] -= 0.5;
            let mut res_d = [res; 3];
            res_d[d] = res - 1;
            let mut base = [0i64; 3];
            let mut frac = [0f64; 3];
            for e in 0..3 {
                let b = (cs[e].floor() as i64).clamp(0, (res_d[e] - 1).max(0));
                base[e] = b;
                frac[e] = (cs[e] - b as f64).clamp(0.0, 1.0);
            }
            let g = -a * n[d] / (h * h);
            for corner in 0..8 {
                let mut idx = base;
                let mut w = 1.0;
                for e in 0..3 {
                    if corner >> e & 1 == 1 {
                        idx[e] += 1;
                        w *= frac[e];
                    } else {
                        w *= 1.0 - frac[e];
                    }
                }
                if w > 0.0 {
                    *targets[d].entry(key(idx[0], idx[1], idx[2])).or_default() += w * g;
                }
            }
        }
    }

    let mut trip = Vec::new();
    let mut rhs = vec![0.0; n_unknown];
    for (ia, &ka) in nodes.iter().enumerate() {
        let na = unkey(ka);
        for d in 0..3 {
            let mut nb = na;
            nb[d] += 1;
            let Some(&ib) = present.get(&key(nb[0], nb[1], nb[2])) else {
                continue;
            };
            let g = targets[d].get(&ka).copied().unwrap_or(0.0);
            match (fixed[ia], fixed[ib]) {
                (None, None) => {
                    let (ua, ub) = (unknown[ia], unknown[ib]);
                    trip.extend([(ua, ua, 1.0), (ub, ub, 1.0), (ua, ub, -1.0), (ub, ua, -1.0)]);
                    rhs[ua] -= g;
                    rhs[ub] += g;
                }
                (None, Some(xb)) => {
                    let ua = unknown[ia];
                    trip.push((ua, ua, 1.0));
                    rhs[ua] += xb - g;
                }
                (Some(xa), None) => {
                    let ub = unknown[ib];
                    trip.push((ub, ub, 1.0));
                    rhs[ub] += xa + g;
                }
                (Some(_), Some(_)) => {}
            }
        }
    }

    for (p, &a) in samples.points.iter().zip(&samples.areas) {
        let w = params.screening * a / (h * h);
        let stencil: Vec<(Option<usize>, f64)> = trilinear(&grid.coords(level, p), res)
            .into_iter()
            .filter_map(|(n, phi)| present.get(&key(n[0], n[1], n[2])).map(|&i| (i, phi)))
            .map(|(i, phi)| (fixed[i].map_or(Some(unknown[i]), |_| None), phi))
            .collect();
        if stencil.len() < 8 {
            continue;
        }
        let fixed_part: f64 = trilinear(&grid.coords(level, p), res)
            .into_iter()
            .map(|(n, phi)| {
                let i = present[&key(n[0], n[1], n[2])];
                fixed[i].map_or(0.0, |x| phi * x)
            })
            .sum();
        for &(ui, pi) in &stencil {
            let Some(ui) = ui else { continue };
            rhs[ui] -= w * pi * fixed_part;
            for &(uj, pj) in &stencil {
                if let Some(uj) = uj {
                    trip.push((ui, uj, w * pi * pj));
                }
            }
        }
    }

    let a = Csr::from_triplets(n_unknown, trip);
    let mut x: Vec<f64> = nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| fixed[*i].is_none())
        .map(|(_, &k)| {
            if coarser.is_empty() {
                0.0
            } else {
                eval_levels(coarser, grid, &grid.node_pos(level, unkey(k)))
            }
        })
        .collect();
    solve_cg(&a, &rhs, &mut x, params.cg_tolerance, params.max_iterations)?;

    let values = nodes
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, fixed[i].unwrap_or_else(|| x[unknown[i]])))
        .collect();
    Ok(Level {
        level,
        values,
        nodes,
    })
}

fn band_nodes(grid: &Grid, level: usize, points: &[Vector3<f64>]) -> Vec<Key> {
    let res = 1i64 << level;
    let mut keys = Vec::new();
    for p in points {
        let c = grid.coords(level, p);
        let cell = [0, 1, 2].map(|d| (c[d].floor() as i64).clamp(0, res - 1));
        for k in (cell[2] - BAND_CELLS).max(0)..=(cell[2] + BAND_CELLS + 1).min(res) {
            for j in (cell[1] - BAND_CELLS).max(0)..=(cell[1] + BAND_CELLS + 1).min(res) {
                for i in (cell[0] - BAND_CELLS).max(0)..=(cell[0] + BAND_CELLS + 1).min(res) {
                    keys.push(key(i, j, k));
                }
            }
        }
    }
    keys.sort_unstable();
    keys.dedup();
    keys
}

fn full_nodes(level: usize) -> Vec<Key> {
    let res = 1i64 << level;
    let mut keys = Vec::with_capacity(((res + 1) * (res + 1) * (res + 1)) as usize);
    for k in 0..=res {
        for j in 0..=res {
            for i in 0..=res {
                keys.push(key(i, j, k));
            }
        }
    }
    keys.sort_unstable();
    keys
}

/// Kuhn subdivision of a cube into six tetrahedra sharing the 0–7 diagonal;
/// corner `c` sits at offset `(c&1, c>>1&1, c>>2&1)`.
const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

fn extract(finest: &Level, grid: &Grid, iso: f64) -> TriangleMesh {
    let mut vertex_of: HashMap<(Key, Key), usize> = HashMap::new();
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut triangles = Vec::new();
    let level = finest.level;

    for &k0 in &finest.nodes {
        let n0 = unkey(k0);
        let mut corners = [(0 as Key, 0.0, Vector3::zeros()); 8];
        let mut complete = true;
        for (c, slot) in corners.iter_mut().enumerate() {
            let n = [
                n0[0] + (c & 1) as i64,
                n0[1] + (c >> 1 & 1) as i64,
                n0[2] + (c >> 2 & 1) as i64,
            ];
            let k = key(n[0], n[1], n[2]);
            match finest.values.get(&k) {
                Some(&v) => *slot = (k, v - iso, grid.node_pos(level, n)),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            continue;
        }
        for tet in KUHN {
            let t = tet.map(|c| corners[c]);
            let inside: Vec<usize> = (0..4).filter(|&i| t[i].1 > 0.0).collect();
            let outside: Vec<usize> = (0..4).filter(|&i| t[i].1 <= 0.0).collect();
            if inside.is_empty() || outside.is_empty() {
                continue;
            }
            let mut edge_vertex = |a: usize, b: usize| -> usize {
                let (ka, kb) = (t[a].0, t[b].0);
                let ek = (ka.min(kb), ka.max(kb));
                *vertex_of.entry(ek).or_insert_with(|| {
                    let s = t[a].1 / (t[a].1 - t[b].1);
                    vertices.push(t[a].2 + (t[b].2 - t[a].2) * s);
                    vertices.len() - 1
                })
            };
            let polys: Vec<[usize; 3]> = match (inside.len(), outside.len()) {
                (1, 3) => {
                    let i = inside[0];
                    vec![[
                        edge_vertex(i, outside[0]),
                        edge_vertex(i, outside[1]),
                        edge_vertex(i, outside[2]),
                    ]]
                }
                (3, 1) => {
                    let o = outside[0];
                    vec![[
                        edge_vertex(inside[0], o),
                        edge_vertex(inside[1], o),
                        edge_vertex(inside[2], o),
                    ]]
                }
                _ => {
                    let (i1, i2, o1, o2) = (inside[0], inside[1], outside[0], outside[1]);
                    let q = [
                        edge_vertex(i1, o1),
                        edge_vertex(i1, o2),
                        edge_vertex(i2, o2),
                        edge_vertex(i2, o1),
                    ];
                    vec![[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
                }
            };
            let inside_ref =
                inside.iter().map(|&i| t[i].2).sum::<Vector3<f64>>() / inside.len() as f64;
            for mut tri in polys {
                let [a, b, c] = tri.map(|i| vertices[i]);
                let n = (b - a).cross(&(c - a));
                if n.dot(&((a + b + c) / 3.0 - inside_ref)) < 0.0 {
                    tri.swap(1, 2);
                }
                triangles.push(tri);
            }
        }
    }
    TriangleMesh::new(vertices, triangles)
}

/// Saturating sample coverage around each vertex: Σ a_p K(|v − p|) with a
/// Gaussian normalised over the plane, scaled so that any vertex within
/// about one kernel width of the sampled region reaches 1.
fn coverage_densities(mesh: &TriangleMesh, tree: &KdTree, areas: &[f64], sigma: f64) -> Vec<f64> {
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let inv = 1.0 / (2.0 * sigma * sigma);
    mesh.vertices
        .iter()
        .map(|v| {
            let mut s = 0.0;
            tree.for_each_within(v, 3.0 * sigma, |i, d2| {
                s += areas[i] * norm * (-d2 * inv).exp()
            });
            (s / DENSITY_SATURATION).min(1.0)
        })
        .collect()
}

/// Reconstructs a surface from an oriented cloud. Returns the raw iso-surface
/// with per-vertex densities in `[0, 1]`.
pub fn screened_poisson(
    cloud: &PointCloud,
    params: &PoissonParams,
) -> Result<TriangleMesh, MeshError> {
    let normals = cloud.normals.as_ref().ok_or(MeshError::NormalsMissing)?;
    if !(1..=10).contains(&params.depth) || params.scale < 1.0 || params.screening < 0.0 {
        return Err(MeshError::BadConfig(format!("{params:?}")));
    }
    let points = &cloud.points;
    if points.len() < AREA_NEIGHBORS + 1 {
        return Err(MeshError::InsufficientPoints {
            needed: AREA_NEIGHBORS + 1,
            got: points.len(),
        });
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(MeshError::DegenerateExtent);
    }
    let side = extent * params.scale;
    let grid = Grid {
        origin: (lo + hi) / 2.0 - Vector3::repeat(side / 2.0),
        side,
    };

    let tree = KdTree::build(points);
    let mut nn = Vec::with_capacity(points.len());
    let mut areas = Vec::with_capacity(points.len());
    for p in points {
        let knn = tree.knn(p, AREA_NEIGHBORS + 1);
        nn.push(knn[1].1.sqrt());
        let rk2 = knn.last().unwrap().1;
        areas.push(std::f64::consts::PI * rk2 / AREA_NEIGHBORS as f64);
    }
    nn.sort_by(f64::total_cmp);
    let spacing = nn[nn.len() / 2];
    let mut finest = MIN_LEVEL;
    while finest < params.depth && grid.h(finest + 1) >= spacing {
        finest += 1;
    }
    let finest = finest.min(params.depth.max(MIN_LEVEL));
    let base = BASE_LEVEL.min(finest);

    let normals: Vec<Vector3<f64>> = normals.iter().map(|n| n.normalize()).collect();
    let samples = Samples {
        points,
        normals: &normals,
        areas,
    };
    let mut levels: Vec<Level> = Vec::new();
    for level in base..=finest {
        let nodes = if level == base {
            full_nodes(level)
        } else {
            band_nodes(&grid, level, points)
        };
        let l = solve_level(&grid, level, nodes, &levels, &samples, params)?;
        levels.push(l);
    }

    let weights: Vec<f64> = samples
        .areas
        .iter()
        .map(|a| 1.0 / a.max(f64::MIN_POSITIVE))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let iso = points
        .iter()
        .zip(&weights)
        .map(|(p, w)| w * eval_levels(&levels, &grid, p))
        .sum::<f64>()
        / wsum;

    let mut mesh = extract(levels.last().unwrap(), &grid, iso);
    let densities = coverage_densities(&mesh, &tree, &samples.areas, grid.h(finest));
    mesh.densities = Some(densities);
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::surface_area;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere_cloud(n: usize, r: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::with_capacity(n);
        let mut nrm = Vec::with_capacity(n);
        while pts.len() < n {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let l = v.norm();
            if l > 1e-3 && l <= 1.0 {
                let u = v / l;
                pts.push(u * r);
                nrm.push(u);
            }
        }
        let mut c = PointCloud::from_points(pts);
        c.normals = Some(nrm);
        c
    }

    fn edge_counts(m: &TriangleMesh) -> HashMap<(usize, usize), usize> {
        let mut e = HashMap::new();
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *e.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        e
    }

    #[test]
    fn sphere_depth6_is_closed_with_analytic_area() {
        let cloud = sphere_cloud(20_000, 0.1, 3);
        let params = PoissonParams {
            depth: 6,
            ..Default::default()
        };
        let m = screened_poisson(&cloud, &params).unwrap().cleaned();
        let want = 4.0 * std::f64::consts::PI * 0.01;
        let got = surface_area(&m);
        assert!((got - want).abs() / want < 0.10, "{got} vs {want}");
        assert!(edge_counts(&m).values().all(|&c| c == 2));
        // Outward orientation: signed volume positive.
        let vol: f64 = m
            .triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| m.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum();
        assert!(vol > 0.0);
        assert!(m.densities.as_ref().unwrap().iter().all(|&d| d > 0.9));
    }

    #[test]
    fn sphere_vertices_lie_near_the_surface() {
        let cloud = sphere_cloud(5_000, 0.05, 9);
        let m = screened_poisson(
            &cloud,
            &PoissonParams {
                depth: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let h = 0.05 * 2.0 * 1.25 / 32.0;
        for v in &m.vertices {
            assert!((v.norm() - 0.05).abs() < h, "{}", v.norm());
        }
    }

    #[test]
    fn missing_normals_and_flat_extent() {
        let c = PointCloud::from_points(vec![Vector3::zeros(); 40]);
        assert!(matches!(
            screened_poisson(&c, &PoissonParams::default()),
            Err(MeshError::NormalsMissing)
        ));
        let mut c = c;
        c.normals = Some(vec![Vector3::z(); 40]);
        assert!(matches!(
            screened_poisson(&c, &PoissonParams::default()),
            Err(MeshError::DegenerateExtent)
        ));
    }

    #[test]
    fn cg_solves_small_system() {
        let a = Csr::from_triplets(2, vec![(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)]);
        let mut x = vec![0.0; 2];
        solve_cg(&a, &[1.0, 2.0], &mut x, 1e-12, 10).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12 && (x[1] - 7.0 / 11.0).abs() < 1e-12);
    }
}
