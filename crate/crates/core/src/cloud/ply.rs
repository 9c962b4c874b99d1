use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{CloudError, PointCloud};

/// ASCII PLY with `x y z`, then `nx ny nz` and `red green blue` when present.
pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), CloudError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply_to(cloud, &mut w)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn write_ply_to(cloud: &PointCloud, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    if cloud.normals.is_some() {
        writeln!(
            w,
            "property double nx\nproperty double ny\nproperty double nz"
        )?;
    }
    if cloud.colors.is_some() {
        writeln!(
            w,
            "property uchar red\nproperty uchar green\nproperty uchar blue"
        )?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        write!(w, "{} {} {}", p.x, p.y, p.z)?;
        if let Some(n) = &cloud.normals {
            write!(w, " {} {} {}", n[i].x, n[i].y, n[i].z)?;
        }
        if let Some(c) = &cloud.colors {
            write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn header_and_rows() {
        let c = PointCloud {
            points: vec![Vector3::new(0.5, -1.0, 2.0)],
            normals: Some(vec![Vector3::new(0.0, 0.0, -1.0)]),
            colors: Some(vec![[1, 2, 3]]),
            pixels: None,
            camera: None,
        };
        let mut buf = Vec::new();
        write_ply_to(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 1\n"));
        assert!(text.contains("property uchar red"));
        assert!(text.ends_with("end_header\n0.5 -1 2 0 0 -1 1 2 3\n"));
    }
}
