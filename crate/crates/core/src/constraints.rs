//! Displacement and center-of-buoyancy constraints.
//!
//! The water region is weighted by (1 - c) where c is the air concentration.
//! Three scalar constraints (in 2D) are tracked as deviations from their
//! values on the initial domain: the two first moments of the wetted flow
//! volume and the wetted flow volume itself. Keeping these at zero preserves
//! the displacement and the center of buoyancy of the hull.
//!
//! All integrals use midpoint quadrature: cell centroids for volume terms,
//! face midpoints for the boundary pairings.

use crate::field::ScalarField;
use crate::mesh::{Mesh, PatchKind};
use crate::scalar::{Scalar, Vec2};

/// Number of geometric constraints in 2D: x-moment, y-moment, volume.
pub const N_CONSTRAINTS: usize = 3;

/// Constraint deviations together with the reference they are measured from.
#[derive(Clone, Copy, Debug)]
pub struct ConstraintState<S> {
    /// Current deviation from the reference; zero on the initial domain.
    pub g: [S; N_CONSTRAINTS],
    /// Integrals captured on the initial domain.
    pub reference: [S; N_CONSTRAINTS],
}

impl<S: Scalar> ConstraintState<S> {
    /// Capture the reference on the initial domain; `g` starts at zero.
    pub fn capture(mesh: &Mesh<S>, c: &ScalarField<S>) -> Self {
        Self {
            g: [S::zero(); N_CONSTRAINTS],
            reference: capture_reference(mesh, c),
        }
    }

    pub fn update(&mut self, mesh: &Mesh<S>, c: &ScalarField<S>) {
        self.g = evaluate_constraints(mesh, c, &self.reference);
    }
}

/// Wetted-volume integrals on the current domain:
/// (∫ (1-c) x dx, ∫ (1-c) y dx, ∫ (1-c) dx).
pub fn capture_reference<S: Scalar>(mesh: &Mesh<S>, c: &ScalarField<S>) -> [S; N_CONSTRAINTS] {
    let geom = mesh.geometry();
    let mut r = [S::zero(); N_CONSTRAINTS];
    for i in 0..mesh.n_cells() {
        let w = (S::one() - c.cell[i]) * geom.cell_volume[i];
        let x = geom.cell_centroid[i];
        r[0] += w * x.x;
        r[1] += w * x.y;
        r[2] += w;
    }
    r
}

/// Deviation of the current wetted-volume integrals from the reference.
pub fn evaluate_constraints<S: Scalar>(
    mesh: &Mesh<S>,
    c: &ScalarField<S>,
    reference: &[S; N_CONSTRAINTS],
) -> [S; N_CONSTRAINTS] {
    let now = capture_reference(mesh, c);
    [
        now[0] - reference[0],
        now[1] - reference[1],
        now[2] - reference[2],
    ]
}

/// Shape-derivative pairing of the constraints with a vertex displacement
/// field (one entry per mesh vertex): component i is the first-order change
/// of constraint i under the deformation id + eps V, divided by eps.
///
/// Only the deformable obstacle faces contribute; `n` is the flow-domain
/// outward normal there (pointing into the obstacle), so moving the obstacle
/// boundary outward (V . n < 0) removes wetted volume:
/// g(eps) = g(0) + eps <g_u, V> + O(eps^2).
pub fn constraint_pairing<S: Scalar>(
    mesh: &Mesh<S>,
    c: &ScalarField<S>,
    v: &[Vec2<S>],
) -> [S; N_CONSTRAINTS] {
    let geom = mesh.geometry();
    let half = S::one() / (S::one() + S::one());
    let mut p = [S::zero(); N_CONSTRAINTS];
    for &fid in &mesh.patch_faces(PatchKind::ObsN) {
        let face = &mesh.faces[fid];
        let vn = (v[face.a] + v[face.b]).dot(geom.face_normal[fid]) * half;
        let b = mesh.boundary_index(fid).expect("obsN face is boundary");
        let w = (S::one() - c.bface[b]) * vn * geom.face_area[fid];
        let x = geom.face_centroid[fid];
        p[0] += w * x.x;
        p[1] += w * x.y;
        p[2] += w;
    }
    p
}
