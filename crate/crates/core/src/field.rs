//! Cell-centered fields with boundary-face values.
//!
//! `cell[i]` lives at the centroid of cell `i`; `bface[b]` at the centroid of
//! boundary face `mesh.boundary_face_id(b)`. Boundary values hold Dirichlet
//! data where prescribed and extrapolated values elsewhere, so gradient and
//! flux loops never special-case the boundary.

use crate::mesh::Mesh;
use crate::scalar::{Scalar, Vec2};

#[derive(Clone, Debug)]
pub struct ScalarField<S> {
    pub cell: Vec<S>,
    pub bface: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct VectorField<S> {
    pub cell: Vec<Vec2<S>>,
    pub bface: Vec<Vec2<S>>,
}

impl<S: Scalar> ScalarField<S> {
    pub fn zeros(mesh: &Mesh<S>) -> Self {
        Self {
            cell: vec![S::zero(); mesh.n_cells()],
            bface: vec![S::zero(); mesh.n_boundary_faces()],
        }
    }

    pub fn constant(mesh: &Mesh<S>, v: S) -> Self {
        Self {
            cell: vec![v; mesh.n_cells()],
            bface: vec![v; mesh.n_boundary_faces()],
        }
    }

    /// Evaluate a pointwise function at cell and boundary-face centroids.
    pub fn from_fn(mesh: &Mesh<S>, f: impl Fn(Vec2<S>) -> S) -> Self {
        let geom = mesh.geometry();
        Self {
            cell: geom.cell_centroid.iter().map(|&x| f(x)).collect(),
            bface: mesh
                .boundary_faces()
                .map(|fid| f(geom.face_centroid[fid]))
                .collect(),
        }
    }

    pub fn linf(&self) -> S {
        self.cell
            .iter()
            .fold(S::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }
}

impl<S: Scalar> VectorField<S> {
    pub fn zeros(mesh: &Mesh<S>) -> Self {
        Self {
            cell: vec![Vec2::zero(); mesh.n_cells()],
            bface: vec![Vec2::zero(); mesh.n_boundary_faces()],
        }
    }

    pub fn constant(mesh: &Mesh<S>, v: Vec2<S>) -> Self {
        Self {
            cell: vec![v; mesh.n_cells()],
            bface: vec![v; mesh.n_boundary_faces()],
        }
    }

    pub fn from_fn(mesh: &Mesh<S>, f: impl Fn(Vec2<S>) -> Vec2<S>) -> Self {
        let geom = mesh.geometry();
        Self {
            cell: geom.cell_centroid.iter().map(|&x| f(x)).collect(),
            bface: mesh
                .boundary_faces()
                .map(|fid| f(geom.face_centroid[fid]))
                .collect(),
        }
    }

    pub fn linf(&self) -> S {
        self.cell.iter().fold(S::zero(), |m, v| {
            let n = v.norm();
            if n > m {
                n
            } else {
                m
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshgen::unit_square;

    #[test]
    fn from_fn_evaluates_centroids() {
        let mesh: Mesh<f64> = unit_square();
        let f = ScalarField::from_fn(&mesh, |x| x.x + 2.0 * x.y);
        let geom = mesh.geometry();
        for c in 0..mesh.n_cells() {
            let x = geom.cell_centroid[c];
            assert!((f.cell[c] - (x.x + 2.0 * x.y)).abs() < 1e-15);
        }
        assert_eq!(f.bface.len(), 4);
    }
}
