use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{MeshError, TriangleMesh};

/// ASCII PLY; densities are written as a `density` vertex property.
pub fn write_ply(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply_to(mesh, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_obj_to(mesh, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_ply_to(mesh: &TriangleMesh, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}",
        mesh.vertices.len()
    )?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    if mesh.densities.is_some() {
        writeln!(w, "property double density")?;
    }
    writeln!(
        w,
        "element face {}\nproperty list uchar int vertex_indices\nend_header",
        mesh.triangles.len()
    )?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        write!(w, "{} {} {}", v.x, v.y, v.z)?;
        if let Some(d) = &mesh.densities {
            write!(w, " {}", d[i])?;
        }
        writeln!(w)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}

fn write_obj_to(mesh: &TriangleMesh, w: &mut impl Write) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn tri() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vector3::zeros(),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
    }

    #[test]
    fn obj_is_one_based() {
        let mut buf = Vec::new();
        write_obj_to(&tri(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"
        );
    }

    #[test]
    fn ply_declares_faces() {
        let mut m = tri();
        m.densities = Some(vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        write_ply_to(&m, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("element face 1\n"));
        assert!(s.contains("0 1 0 3\n3 0 1 2\n"));
    }
}
