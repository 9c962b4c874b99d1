use std::collections::{HashMap, VecDeque};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CloudError, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    /// Neighborhood radius, meters.
    pub eps: f64,
    /// Neighborhood size (self included) that makes a point a core point.
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: 0.01,
            min_pts: 30,
        }
    }
}

impl DbscanParams {
    fn validate(&self) -> Result<(), CloudError> {
        if !(self.eps > 0.0) || self.min_pts == 0 {
            return Err(CloudError::BadDbscanParams {
                eps: self.eps,
                min_pts: self.min_pts,
            });
        }
        Ok(())
    }
}

/// Uniform hash grid with cell size eps: every eps-neighbor of a point lies
/// in one of the 27 cells around it.
struct Grid<'a> {
    points: &'a [Vector3<f64>],
    eps2: f64,
    inv_cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vector3<f64>], eps: f64) -> Self {
        let inv_cell = 1.0 / eps;
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, inv_cell)).or_default().push(i);
        }
        Self {
            points,
            eps2: eps * eps,
            inv_cell,
            cells,
        }
    }

    fn key(p: &Vector3<f64>, inv_cell: f64) -> [i64; 3] {
        [
            (p.x * inv_cell).floor() as i64,
            (p.y * inv_cell).floor() as i64,
            (p.z * inv_cell).floor() as i64,
        ]
    }

    fn for_each_neighbor(&self, i: usize, mut f: impl FnMut(usize) -> bool) {
        let p = &self.points[i];
        let k = Self::key(p, self.inv_cell);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(bucket) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &j in bucket {
                            if (self.points[j] - p).norm_squared() <= self.eps2 && !f(j) {
                                return;
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_core(&self, i: usize, min_pts: usize) -> bool {
        let mut count = 0;
        self.for_each_neighbor(i, |_| {
            count += 1;
            count < min_pts
        });
        count >= min_pts
    }
}

/// DBSCAN labels: `Some(cluster)` with clusters numbered in discovery order
/// (scanning points by index), `None` for noise.
///
/// A border point reachable from several clusters belongs to the first one
/// discovered, so labels depend only on point order, never on the order of
/// neighbors inside a grid cell.
pub fn dbscan_labels(
    points: &[Vector3<f64>],
    params: &DbscanParams,
) -> Result<Vec<Option<usize>>, CloudError> {
    params.validate()?;
    let grid = Grid::new(points, params.eps);
    Ok(run_dbscan(&grid, params).1)
}

fn run_dbscan(grid: &Grid, params: &DbscanParams) -> (Vec<bool>, Vec<Option<usize>>) {
    let points = grid.points;
    let core: Vec<bool> = (0..points.len())
        .into_par_iter()
        .map(|i| grid.is_core(i, params.min_pts))
        .collect();

    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for seed in 0..points.len() {
        if labels[seed].is_some() || !core[seed] {
            continue;
        }
        let cluster = next;
        next += 1;
        labels[seed] = Some(cluster);
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            grid.for_each_neighbor(i, |j| {
                if labels[j].is_none() {
                    labels[j] = Some(cluster);
                    if core[j] {
                        queue.push_back(j);
                    }
                }
                true
            });
        }
    }
    (core, labels)
}

/// Keeps the largest DBSCAN cluster.
///
/// A cluster here is its core points plus every border point within eps of
/// one of them, so a border point shared by two clusters counts for both.
/// Equal sizes resolve to the cluster whose points, sorted by coordinates,
/// compare lexicographically smallest. Both rules make the kept point set
/// independent of input order.
pub fn cluster_filter(cloud: &PointCloud, params: &DbscanParams) -> Result<PointCloud, CloudError> {
    if cloud.is_empty() {
        return Err(CloudError::Empty);
    }
    params.validate()?;
    let grid = Grid::new(&cloud.points, params.eps);
    let (core, labels) = run_dbscan(&grid, params);
    let n_clusters = labels.iter().flatten().max().map_or(0, |&m| m + 1);
    if n_clusters == 0 {
        return Err(CloudError::NoCluster);
    }
    // Clusters each non-core labeled point borders.
    let touches: Vec<Vec<usize>> = (0..cloud.len())
        .map(|i| {
            if core[i] || labels[i].is_none() {
                return labels[i].into_iter().collect();
            }
            let mut cs = Vec::new();
            grid.for_each_neighbor(i, |j| {
                if let (true, Some(c)) = (core[j], labels[j]) {
                    if !cs.contains(&c) {
                        cs.push(c);
                    }
                }
                true
            });
            cs
        })
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, cs) in touches.iter().enumerate() {
        for &c in cs {
            members[c].push(i);
        }
    }
    let lex = |a: &usize, b: &usize| {
        let (p, q) = (&cloud.points[*a], &cloud.points[*b]);
        p.x.total_cmp(&q.x)
            .then(p.y.total_cmp(&q.y))
            .then(p.z.total_cmp(&q.z))
    };
    let largest = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut tied: Vec<Vec<usize>> = members.into_iter().filter(|m| m.len() == largest).collect();
    for m in &mut tied {
        m.sort_by(lex);
    }
    let keep_sorted = tied
        .into_iter()
        .min_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| lex(x, y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("at least one cluster");
    let mut keep = keep_sorted;
    keep.sort_unstable();
    Ok(cloud.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadratic-time reference DBSCAN.
    pub(crate) fn brute_dbscan(
        points: &[Vector3<f64>],
        eps: f64,
        min_pts: usize,
    ) -> Vec<Option<usize>> {
        let n = points.len();
        let nbrs: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| (points[i] - points[j]).norm_squared() <= eps * eps)
                    .collect()
            })
            .collect();
        let mut labels = vec![None; n];
        let mut c = 0;
        for i in 0..n {
            if labels[i].is_some() || nbrs[i].len() < min_pts {
                continue;
            }
            labels[i] = Some(c);
            let mut stack = vec![i];
            while let Some(p) = stack.pop() {
                for &q in &nbrs[p] {
                    if labels[q].is_none() {
                        labels[q] = Some(c);
                        if nbrs[q].len() >= min_pts {
                            stack.push(q);
                        }
                    }
                }
            }
            c += 1;
        }
        labels
    }

    fn blob(
        rng: &mut ChaCha8Rng,
        center: Vector3<f64>,
        n: usize,
        spread: f64,
    ) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                center
                    + Vector3::new(
                        rng.gen_range(-spread..spread),
                        rng.gen_range(-spread..spread),
                        rng.gen_range(-spread..spread),
                    )
            })
            .collect()
    }

    #[test]
    fn two_blobs_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pts = blob(&mut rng, Vector3::new(0.0, 0.0, 1.0), 200, 0.004);
        pts.extend(blob(&mut rng, Vector3::new(1.0, 0.0, 1.0), 200, 0.004));
        let p = DbscanParams::default();
        let labels = dbscan_labels(&pts, &p).unwrap();
        assert_eq!(labels, brute_dbscan(&pts, p.eps, p.min_pts));
        assert_eq!(labels.iter().flatten().max(), Some(&1));
        let kept = cluster_filter(&PointCloud::from_points(pts.clone()), &p).unwrap();
        // Equal sizes: the first-discovered blob wins.
        assert_eq!(kept.points, pts[..200].to_vec());
    }

    #[test]
    fn tight_ball_is_one_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = blob(&mut rng, Vector3::new(0.1, 0.2, 0.9), 50, 0.002);
        let kept = cluster_filter(&PointCloud::from_points(pts), &DbscanParams::default()).unwrap();
        assert_eq!(kept.len(), 50);
    }

    #[test]
    fn isolated_point_is_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = blob(&mut rng, Vector3::new(0.0, 0.0, 1.0), 100, 0.003);
        pts.push(Vector3::new(0.0, 0.0, 2.0));
        let labels = dbscan_labels(&pts, &DbscanParams::default()).unwrap();
        assert_eq!(labels[100], None);
        let kept = cluster_filter(&PointCloud::from_points(pts), &DbscanParams::default()).unwrap();
        assert_eq!(kept.len(), 100);
    }

    #[test]
    fn all_noise_is_an_error() {
        let pts: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect();
        assert!(matches!(
            cluster_filter(&PointCloud::from_points(pts), &DbscanParams::default()),
            Err(CloudError::NoCluster)
        ));
        assert!(matches!(
            cluster_filter(&PointCloud::default(), &DbscanParams::default()),
            Err(CloudError::Empty)
        ));
    }

    #[test]
    fn rejects_bad_params() {
        let pts = vec![Vector3::zeros()];
        assert!(dbscan_labels(
            &pts,
            &DbscanParams {
                eps: 0.0,
                min_pts: 3
            }
        )
        .is_err());
        assert!(dbscan_labels(
            &pts,
            &DbscanParams {
                eps: 1.0,
                min_pts: 0
            }
        )
        .is_err());
    }

    #[test]
    fn random_configurations_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..30 {
            let n = rng.gen_range(1..200);
            let pts: Vec<_> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(0.0..0.02),
                    )
                })
                .collect();
            let p = DbscanParams {
                eps: rng.gen_range(0.003..0.02),
                min_pts: rng.gen_range(1..12),
            };
            assert_eq!(
                dbscan_labels(&pts, &p).unwrap(),
                brute_dbscan(&pts, p.eps, p.min_pts)
            );
        }
    }
}
