//! The image-processing area estimate: depth filtering, back-projection,
//! clustering, normals, meshing and mesh post-processing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::RgbdFrame;
use crate::cloud::{
    backproject_raster, cluster_filter, estimate_oriented_normals, CloudError, DbscanParams,
    DEFAULT_NORMAL_NEIGHBORS,
};
use crate::depth_filter::{bilateral_filter, median_filter, BilateralParams, FilterError};
use crate::mesh::{
    decimate_quadric, reconstruct_surface, remove_duplicate_triangles, smooth_laplacian,
    surface_area, trim_low_density, MeshError, MeshingConfig, TriangleMesh, M2_TO_CM2,
};
use crate::raster::Bitmask;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("bilateral_filter: {0}")]
    Bilateral(#[source] FilterError),
    #[error("median_filter: {0}")]
    Median(#[source] FilterError),
    #[error("backproject_masked: {0}")]
    Backproject(#[source] CloudError),
    #[error("cluster_filter: {0}")]
    Cluster(#[source] CloudError),
    #[error("estimate_oriented_normals: {0}")]
    Normals(#[source] CloudError),
    #[error("reconstruct_surface: {0}")]
    Reconstruct(#[source] MeshError),
    #[error("trim_low_density: {0}")]
    Trim(#[source] MeshError),
    #[error("decimate_quadric: {0}")]
    Decimate(#[source] MeshError),
    #[error("surface_area: mesh is empty after post-processing")]
    EmptyMesh,
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Bilateral(_) => "bilateral_filter",
            Self::Median(_) => "median_filter",
            Self::Backproject(_) => "backproject_masked",
            Self::Cluster(_) => "cluster_filter",
            Self::Normals(_) => "estimate_oriented_normals",
            Self::Reconstruct(_) => "reconstruct_surface",
            Self::Trim(_) => "trim_low_density",
            Self::Decimate(_) => "decimate_quadric",
            Self::EmptyMesh => "surface_area",
        }
    }
}

/// Parameters of every stage. Defaults follow the reference workflow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub bilateral: BilateralParams,
    pub median_kernel: usize,
    pub dbscan: DbscanParams,
    pub normal_neighbors: usize,
    pub meshing: MeshingConfig,
    /// Zero depth outside the mask before filtering so background depth
    /// never bleeds into the leaf.
    pub filter_inside_mask: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bilateral: BilateralParams::default(),
            median_kernel: 5,
            dbscan: DbscanParams::default(),
            normal_neighbors: DEFAULT_NORMAL_NEIGHBORS,
            meshing: MeshingConfig::default(),
            filter_inside_mask: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineDiagnostics {
    pub masked_pixels: usize,
    pub backprojected_points: usize,
    pub clustered_points: usize,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub trimmed_triangles: usize,
    pub deduplicated_triangles: usize,
    pub decimated_triangles: usize,
    /// Median z of the clustered leaf points, meters.
    pub median_distance_m: f64,
    pub area_m2: f64,
}

#[derive(Debug, Clone)]
pub struct LeafEstimate {
    pub area_cm2: f64,
    pub diagnostics: PipelineDiagnostics,
    pub mesh: TriangleMesh,
}

/// Full estimate for one masked leaf in one frame.
pub fn estimate_leaf_area_ip(
    frame: &RgbdFrame,
    mask: &Bitmask,
    config: &PipelineConfig,
) -> Result<LeafEstimate, PipelineError> {
    config
        .meshing
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut diag = PipelineDiagnostics {
        masked_pixels: mask.count(),
        ..Default::default()
    };
    let same_dims = (mask.width(), mask.height()) == (frame.width(), frame.height());
    let source = if config.filter_inside_mask && same_dims {
        frame.depth.masked(mask)
    } else {
        frame.depth.clone()
    };
    let depth = bilateral_filter(&source, &config.bilateral).map_err(PipelineError::Bilateral)?;
    let depth = median_filter(&depth, config.median_kernel).map_err(PipelineError::Median)?;

    let cloud = backproject_raster(
        &depth,
        Some(&frame.color),
        frame.depth_scale,
        &frame.intrinsics,
        mask,
    )
    .map_err(PipelineError::Backproject)?;
    diag.backprojected_points = cloud.len();
    let cloud = cluster_filter(&cloud, &config.dbscan).map_err(PipelineError::Cluster)?;
    diag.clustered_points = cloud.len();
    diag.median_distance_m = cloud.median_depth().unwrap_or(0.0);
    let cloud = estimate_oriented_normals(&cloud, config.normal_neighbors)
        .map_err(PipelineError::Normals)?;

    let mesh = reconstruct_surface(&cloud, &config.meshing).map_err(PipelineError::Reconstruct)?;
    diag.mesh_vertices = mesh.vertices.len();
    diag.mesh_triangles = mesh.triangles.len();
    let mesh = trim_low_density(&mesh).map_err(PipelineError::Trim)?;
    diag.trimmed_triangles = mesh.triangles.len();
    let mesh = remove_duplicate_triangles(&mesh);
    diag.deduplicated_triangles = mesh.triangles.len();
    let mesh = decimate_quadric(&mesh, config.meshing.target_triangles)
        .map_err(PipelineError::Decimate)?;
    diag.decimated_triangles = mesh.triangles.len();
    let mesh = smooth_laplacian(&mesh, config.meshing.laplacian_iterations);
    if mesh.triangles.is_empty() {
        return Err(PipelineError::EmptyMesh);
    }
    let area = surface_area(&mesh);
    diag.area_m2 = area;
    Ok(LeafEstimate {
        area_cm2: area * M2_TO_CM2,
        diagnostics: diag,
        mesh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::mesh::MeshingBackend;
    use crate::synthetic::{make_leaf_surface, render_rgbd, LeafShape, NoiseSpec, Pose};

    fn heightfield() -> PipelineConfig {
        PipelineConfig {
            meshing: MeshingConfig {
                backend: MeshingBackend::Heightfield,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn ellipse_at_1m() -> crate::synthetic::RenderedLeaf {
        let s = make_leaf_surface(
            LeafShape::PlanarEllipse {
                a_cm: 6.0,
                b_cm: 3.0,
            },
            Pose::default(),
        )
        .unwrap();
        render_rgbd(
            &s,
            &CameraIntrinsics::d415_1280x720(),
            1.0,
            &NoiseSpec::none(),
        )
        .unwrap()
    }

    #[test]
    fn planar_ellipse_heightfield_within_three_percent() {
        let leaf = ellipse_at_1m();
        let est = estimate_leaf_area_ip(&leaf.frame, &leaf.mask, &heightfield()).unwrap();
        let ape = 100.0 * (est.area_cm2 - 56.549).abs() / 56.549;
        assert!(ape <= 3.0, "{} cm² ({ape}%)", est.area_cm2);
        let d = &est.diagnostics;
        assert!(d.decimated_triangles <= 100);
        assert!((d.median_distance_m - 1.0).abs() < 1e-3);
    }

    #[test]
    fn empty_mask_fails_in_backprojection() {
        let leaf = ellipse_at_1m();
        let empty = Bitmask::new(leaf.mask.width(), leaf.mask.height());
        let err = estimate_leaf_area_ip(&leaf.frame, &empty, &heightfield()).unwrap_err();
        assert_eq!(err.stage(), "backproject_masked");
        assert!(err.to_string().contains("no valid masked pixels"));
    }

    #[test]
    fn stray_points_are_clustered_away() {
        let mut leaf = ellipse_at_1m();
        // Ten adjacent masked pixels pushed 0.5 m behind the leaf.
        let strays: Vec<(usize, usize)> = (0..10).map(|i| (600 + i, 360)).collect();
        for &(u, v) in &strays {
            leaf.frame.depth.set(u, v, 1500.0);
        }
        let config = PipelineConfig {
            bilateral: BilateralParams {
                d: 1,
                ..Default::default()
            },
            median_kernel: 1,
            ..heightfield()
        };
        let est = estimate_leaf_area_ip(&leaf.frame, &leaf.mask, &config).unwrap();
        let d = &est.diagnostics;
        assert_eq!(d.backprojected_points, leaf.mask.count());
        assert_eq!(d.clustered_points, d.backprojected_points - 10);
    }
}
