use std::collections::HashMap;

use super::{MeshError, TriangleMesh};
use crate::cloud::PointCloud;

/// Triangulates the pixel footprints of a single-view cloud.
///
/// Every source pixel becomes a quad over its footprint `[u−½, u+½] ×
/// [v−½, v+½]`, split into two triangles. A quad corner sits at the mean
/// depth of the valid pixels sharing it, back-projected through the corner's
/// image position, so a fronto-parallel patch of N pixels has exactly the
/// pinhole footprint area `N · (z/fx) · (z/fy)`. Outline corners are then
/// moved to the midpoint of their two outline neighbors in the image, which
/// turns the pixel staircase into a contour through the edge midpoints
/// (a closed convex outline loses 2 pixels of area). Densities are uniform 1.0.
pub fn heightfield_mesh(cloud: &PointCloud) -> Result<TriangleMesh, MeshError> {
    let (pixels, camera) = match (&cloud.pixels, &cloud.camera) {
        (Some(p), Some(c)) => (p, c),
        _ => return Err(MeshError::PixelsMissing),
    };
    let mut depth_at: HashMap<(u32, u32), f64> = HashMap::with_capacity(pixels.len());
    for (p, &px) in cloud.points.iter().zip(pixels) {
        depth_at.insert(px, p.z);
    }

    let mut corner_index: HashMap<(u32, u32), usize> = HashMap::new();
    // Image position and depth of every corner.
    let mut corners: Vec<(f64, f64, f64)> = Vec::new();
    let mut corner = |cu: u32, cv: u32| -> usize {
        *corner_index.entry((cu, cv)).or_insert_with(|| {
            // Corner (cu, cv) is shared by pixels (cu-1..=cu, cv-1..=cv).
            let mut sum = 0.0;
            let mut n = 0;
            for pv in [cv.checked_sub(1), Some(cv)].into_iter().flatten() {
                for pu in [cu.checked_sub(1), Some(cu)].into_iter().flatten() {
                    if let Some(&z) = depth_at.get(&(pu, pv)) {
                        sum += z;
                        n += 1;
                    }
                }
            }
            corners.push((cu as f64 - 0.5, cv as f64 - 0.5, sum / n as f64));
            corners.len() - 1
        })
    };

    let quads: Vec<[usize; 4]> = pixels
        .iter()
        .map(|&(u, v)| {
            [
                corner(u, v),
                corner(u + 1, v),
                corner(u + 1, v + 1),
                corner(u, v + 1),
            ]
        })
        .collect();

    let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
    for q in &quads {
        for k in 0..4 {
            let (a, b) = (q[k], q[(k + 1) % 4]);
            *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut outline_nbrs: Vec<Vec<usize>> = vec![Vec::new(); corners.len()];
    for (&(a, b), &c) in &edge_count {
        if c == 1 {
            outline_nbrs[a].push(b);
            outline_nbrs[b].push(a);
        }
    }
    let image_pos: Vec<(f64, f64)> = corners
        .iter()
        .zip(&outline_nbrs)
        .map(|(&(u, v, _), nb)| match nb[..] {
            [a, b] => (
                (corners[a].0 + corners[b].0) / 2.0,
                (corners[a].1 + corners[b].1) / 2.0,
            ),
            _ => (u, v),
        })
        .collect();
    // Twice the signed image-space area; negative for (a, d, c) order since
    // image y points down.
    let orient = |i: usize, j: usize, k: usize| {
        let (p, q, r) = (image_pos[i], image_pos[j], image_pos[k]);
        (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
    };

    let mut triangles = Vec::with_capacity(2 * quads.len());
    for &[a, b, c, d] in &quads {
        // (a, d, c) winds counter-clockwise as seen from the camera, so
        // normals face the viewer. Moved outline corners can make the quad
        // non-convex or flat; use the diagonal that keeps both halves proper.
        let split_ac = [[a, d, c], [a, c, b]];
        let split_bd = [[a, d, b], [b, d, c]];
        let folded = |s: &[[usize; 3]; 2]| s.iter().any(|t| orient(t[0], t[1], t[2]) > -1e-9);
        let chosen = if folded(&split_ac) && !folded(&split_bd) {
            split_bd
        } else {
            split_ac
        };
        triangles.extend(chosen);
    }

    let vertices: Vec<_> = image_pos
        .iter()
        .zip(&corners)
        .map(|(&(u, v), &(_, _, z))| camera.backproject(u, v, z))
        .collect();
    let n = vertices.len();
    Ok(TriangleMesh {
        vertices,
        triangles,
        densities: Some(vec![1.0; n]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::cloud::backproject_raster;
    use crate::mesh::surface_area;
    use crate::raster::{Bitmask, DepthRaster};

    #[test]
    fn full_plane_matches_pinhole_footprint() {
        let k = CameraIntrinsics::new(600.0, 610.0, 40.0, 40.0, 80, 80).unwrap();
        let depth = DepthRaster::filled(80, 80, 1000.0);
        let mask = Bitmask::from_fn(80, 80, |x, y| {
            (15..65).contains(&x) && (15..65).contains(&y)
        });
        let cloud = backproject_raster(&depth, None, 0.001, &k, &mask).unwrap();
        let mesh = heightfield_mesh(&cloud).unwrap();
        let want = (50.0 * 1.0 / 600.0) * (50.0 * 1.0 / 610.0);
        assert!((surface_area(&mesh) - want).abs() / want < 0.005);
        assert_eq!(mesh.triangles.len(), 2 * 2500);
        assert!(mesh.is_valid());
        // Triangles face the camera.
        for t in &mesh.triangles {
            let [a, b, c] = t.map(|i| mesh.vertices[i]);
            assert!((b - a).cross(&(c - a)).dot(&a) < 0.0);
        }
    }

    #[test]
    fn requires_pixels() {
        let c = PointCloud::from_points(vec![nalgebra::Vector3::new(0.0, 0.0, 1.0)]);
        assert!(matches!(
            heightfield_mesh(&c),
            Err(MeshError::PixelsMissing)
        ));
    }
}
