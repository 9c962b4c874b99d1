use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use super::{CloudError, PointCloud};
use crate::spatial::KdTree;

pub const DEFAULT_NORMAL_NEIGHBORS: usize = 30;

/// Per-point normals from the k-NN covariance (eigenvector of the smallest
/// eigenvalue), each flipped to face the camera at the origin so that
/// `dot(n, p) <= 0`.
pub fn estimate_oriented_normals(
    cloud: &PointCloud,
    k_neighbors: usize,
) -> Result<PointCloud, CloudError> {
    if k_neighbors < 3 || cloud.len() < k_neighbors {
        return Err(CloudError::InsufficientPoints {
            needed: k_neighbors.max(3),
            got: cloud.len(),
        });
    }
    let tree = KdTree::build(&cloud.points);
    let normals: Result<Vec<Vector3<f64>>, CloudError> = cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nbrs = tree.knn(p, k_neighbors);
            let mean = nbrs
                .iter()
                .map(|&(j, _)| cloud.points[j])
                .sum::<Vector3<f64>>()
                / nbrs.len() as f64;
            let mut cov = Matrix3::zeros();
            for &(j, _) in &nbrs {
                let d = cloud.points[j] - mean;
                cov += d * d.transpose();
            }
            // Squared spread below 1e-24 m² only arises from coincident points.
            if cov.trace() <= 1e-24 {
                return Err(CloudError::DegenerateNeighborhood(i));
            }
            let eig = SymmetricEigen::new(cov);
            let smallest = eig.eigenvalues.imin();
            let mut n: Vector3<f64> = eig.eigenvectors.column(smallest).into_owned();
            n.normalize_mut();
            if n.dot(p) > 0.0 {
                n = -n;
            }
            Ok(n)
        })
        .collect();
    Ok(PointCloud {
        normals: Some(normals?),
        ..cloud.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_normals_face_camera() {
        let pts: Vec<_> = (0..500)
            .map(|i| {
                Vector3::new(
                    (i % 25) as f64 * 0.002 - 0.02,
                    (i / 25) as f64 * 0.002 - 0.02,
                    1.0,
                )
            })
            .collect();
        let c = estimate_oriented_normals(&PointCloud::from_points(pts), 30).unwrap();
        for n in c.normals.unwrap() {
            assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-3);
        }
    }

    #[test]
    fn sphere_normals_are_radial_on_visible_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let center = Vector3::new(0.0, 0.0, 1.0);
        let pts: Vec<_> = (0..4000)
            .map(|_| {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                center + v.normalize() * 0.1
            })
            .collect();
        let c = estimate_oriented_normals(&PointCloud::from_points(pts.clone()), 30).unwrap();
        let cos5 = 5f64.to_radians().cos();
        for (p, n) in pts.iter().zip(c.normals.as_ref().unwrap()) {
            assert!((n.norm() - 1.0).abs() < 1e-6);
            assert!(n.dot(p) <= 0.0);
            let radial = (p - center).normalize();
            // Visible hemisphere: the outward radial direction faces the camera.
            if radial.dot(p) < -0.2 * p.norm() {
                assert!(
                    n.dot(&radial) > cos5,
                    "normal off radial by more than 5 degrees"
                );
            }
        }
    }

    #[test]
    fn degenerate_and_small_inputs() {
        let same = PointCloud::from_points(vec![Vector3::new(0.0, 0.0, 1.0); 40]);
        assert!(matches!(
            estimate_oriented_normals(&same, 30),
            Err(CloudError::DegenerateNeighborhood(_))
        ));
        let few = PointCloud::from_points(vec![Vector3::new(0.0, 0.0, 1.0); 5]);
        assert!(matches!(
            estimate_oriented_normals(&few, 30),
            Err(CloudError::InsufficientPoints { .. })
        ));
        assert!(estimate_oriented_normals(&few, 2).is_err());
    }
}
