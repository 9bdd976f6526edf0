//! Legacy ASCII VTK writers for cell fields and boundary profiles.
//!
//! Plain text output keeps snapshots diffable and reproducible; every
//! mainstream viewer reads the legacy format.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::mesh::Mesh;
use crate::scalar::{Scalar, Vec2};

/// Write the mesh with cell-centered scalar and vector fields.
pub fn write_cell_fields<S: Scalar>(
    path: &Path,
    mesh: &Mesh<S>,
    scalars: &[(&str, &[S])],
    vectors: &[(&str, &[Vec2<S>])],
) -> io::Result<()> {
    let mut out = String::new();
    header(&mut out, "cell fields");
    let _ = writeln!(out, "POINTS {} double", mesh.n_vertices());
    for p in &mesh.vertices {
        let _ = writeln!(out, "{} {} 0", p.x, p.y);
    }
    let nc = mesh.n_cells();
    let _ = writeln!(out, "CELLS {} {}", nc, 4 * nc);
    for c in &mesh.cells {
        let _ = writeln!(out, "3 {} {} {}", c[0], c[1], c[2]);
    }
    let _ = writeln!(out, "CELL_TYPES {nc}");
    for _ in 0..nc {
        out.push_str("5\n");
    }
    if !scalars.is_empty() || !vectors.is_empty() {
        let _ = writeln!(out, "CELL_DATA {nc}");
    }
    for (name, values) in scalars {
        assert_eq!(values.len(), nc, "scalar field '{name}' length");
        let _ = writeln!(out, "SCALARS {name} double 1");
        out.push_str("LOOKUP_TABLE default\n");
        for v in *values {
            let _ = writeln!(out, "{v}");
        }
    }
    for (name, values) in vectors {
        assert_eq!(values.len(), nc, "vector field '{name}' length");
        let _ = writeln!(out, "VECTORS {name} double");
        for v in *values {
            let _ = writeln!(out, "{} {} 0", v.x, v.y);
        }
    }
    std::fs::write(path, out)
}

/// Write a set of boundary faces as line cells carrying one scalar per face,
/// e.g. the shape-sensitivity density along the obstacle.
pub fn write_boundary_profile<S: Scalar>(
    path: &Path,
    mesh: &Mesh<S>,
    faces: &[usize],
    name: &str,
    values: &[S],
) -> io::Result<()> {
    assert_eq!(faces.len(), values.len(), "profile '{name}' length");
    let mut out = String::new();
    header(&mut out, "boundary profile");
    let _ = writeln!(out, "POINTS {} double", 2 * faces.len());
    for &fid in faces {
        let f = &mesh.faces[fid];
        for vid in [f.a, f.b] {
            let p = mesh.vertices[vid];
            let _ = writeln!(out, "{} {} 0", p.x, p.y);
        }
    }
    let _ = writeln!(out, "CELLS {} {}", faces.len(), 3 * faces.len());
    for i in 0..faces.len() {
        let _ = writeln!(out, "2 {} {}", 2 * i, 2 * i + 1);
    }
    let _ = writeln!(out, "CELL_TYPES {}", faces.len());
    for _ in 0..faces.len() {
        out.push_str("3\n");
    }
    let _ = writeln!(out, "CELL_DATA {}", faces.len());
    let _ = writeln!(out, "SCALARS {name} double 1");
    out.push_str("LOOKUP_TABLE default\n");
    for v in values {
        let _ = writeln!(out, "{v}");
    }
    std::fs::write(path, out)
}

fn header(out: &mut String, title: &str) {
    out.push_str("# vtk DataFile Version 3.0\n");
    out.push_str(title);
    out.push('\n');
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshgen::unit_square;

    #[test]
    fn writes_parseable_cell_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vtk");
        let mesh: Mesh<f64> = unit_square();
        let p = vec![1.0, 2.0];
        let v = vec![Vec2::new(0.5, -0.5); 2];
        write_cell_fields(&path, &mesh, &[("pressure", &p)], &[("velocity", &v)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 3.0"));
        assert!(text.contains("POINTS 4 double"));
        assert!(text.contains("CELLS 2 8"));
        assert!(text.contains("SCALARS pressure double 1"));
        assert!(text.contains("VECTORS velocity double"));
        // Exactly one zero z component per point and vector entry.
        assert_eq!(text.matches(" 0\n").count(), 4 + 2);
    }

    #[test]
    fn writes_boundary_profile() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vtk");
        let mesh: Mesh<f64> = unit_square();
        let faces: Vec<usize> = mesh.boundary_faces().collect();
        let vals: Vec<f64> = (0..faces.len()).map(|i| i as f64).collect();
        write_boundary_profile(&path, &mesh, &faces, "sensitivity", &vals).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("CELL_TYPES 4"));
        assert!(text.contains("SCALARS sensitivity double 1"));
    }
}
