//! Surface assembly of the shape sensitivity and the directional derivative
//! J'(Omega)V it induces on boundary deformation fields.
//!
//! The reduced objective differentiated in the direction of a deformation
//! field V concentrates, for sufficiently smooth states, on the deformable
//! obstacle boundary:
//!
//!   J'(Omega)V = Int_{obsN} G (V.n) ds,
//!   G = -mu_eff dw/dn . dv/dn
//!       + sum_i (lambda_i - tau g_i) (1-c) x_i         (barycenter terms)
//!       + (lambda_{d+1} - tau g_{d+1}) (1-c)            (volume term)
//!
//! with v, w the primal and adjoint velocities, mu_eff the concentration-
//! blended viscosity at the face, and (lambda, tau, g) the augmented-Lagrange
//! multiplier state of the geometric constraints. Normal derivatives are
//! taken one-sided from the wall-adjacent cell's least-squares gradient; the
//! pairing with V uses face-midpoint quadrature, the same rule as
//! [`constraints::constraint_pairing`](crate::constraints::constraint_pairing),
//! so the constraint part of the form reproduces the pairing identically.

use std::path::Path;

use crate::adjoint::AdjointState;
use crate::constraints::N_CONSTRAINTS;
use crate::error::FlowError;
use crate::field::ScalarField;
use crate::flow::{FluidProps, PrimalState};
use crate::fv::Gradients;
use crate::mesh::{Mesh, PatchKind};
use crate::scalar::{num, Scalar, Vec2};
use crate::vtk;

/// The shape derivative as a per-face density over the deformable obstacle
/// boundary, split into its drag and constraint contributions.
///
/// All arrays are aligned with `faces`; the density is implicitly zero on
/// every other boundary face, and `evaluate_form` is linear in V.
#[derive(Clone, Debug)]
pub struct SensitivityForm<S> {
    /// Deformable-obstacle (obsN) face ids, in `mesh.patch_faces` order.
    pub faces: Vec<usize>,
    /// -mu_eff dw/dn . dv/dn per face.
    pub drag_density: Vec<S>,
    /// Constraint integrand factors per face: (1-c) x, (1-c) y, (1-c).
    pub constraint_densities: Vec<[S; N_CONSTRAINTS]>,
    /// Augmented-Lagrange multipliers at assembly time.
    pub lambda: [S; N_CONSTRAINTS],
    /// Penalty parameter at assembly time.
    pub tau: S,
    /// Constraint deviations at assembly time.
    pub g: [S; N_CONSTRAINTS],
}

impl<S: Scalar> SensitivityForm<S> {
    /// Total density G at local face index `k` (position within `faces`).
    pub fn total_density(&self, k: usize) -> S {
        let mut total = self.drag_density[k];
        for i in 0..N_CONSTRAINTS {
            total += (self.lambda[i] - self.tau * self.g[i]) * self.constraint_densities[k][i];
        }
        total
    }

    /// Total density per face, aligned with `faces`.
    pub fn total_densities(&self) -> Vec<S> {
        (0..self.faces.len()).map(|k| self.total_density(k)).collect()
    }
}

/// Assemble the sensitivity density from converged primal and adjoint states.
///
/// `lambda`, `tau` and `g` enter only as the scalar weights of the constraint
/// densities; passing zeros yields the pure drag sensitivity. Fails only if a
/// least-squares gradient cannot be formed (degenerate cell neighborhood).
#[allow(clippy::too_many_arguments)]
pub fn assemble_sensitivity<S: Scalar>(
    primal: &PrimalState<S>,
    adjoint: &AdjointState<S>,
    mesh: &Mesh<S>,
    c: &ScalarField<S>,
    lambda: [S; N_CONSTRAINTS],
    tau: S,
    g: [S; N_CONSTRAINTS],
    props: &FluidProps,
) -> Result<SensitivityForm<S>, FlowError> {
    let geom = mesh.geometry();
    let grads = Gradients::new(mesh);
    let grad_v = grads.vector(mesh, &primal.v)?;
    let grad_w = grads.vector(mesh, &adjoint.w)?;

    let faces = mesh.patch_faces(PatchKind::ObsN);
    let mut drag_density = Vec::with_capacity(faces.len());
    let mut constraint_densities = Vec::with_capacity(faces.len());
    for &fid in &faces {
        let face = &mesh.faces[fid];
        let b = mesh.boundary_index(fid).expect("obsN face is boundary");
        let n = geom.face_normal[fid];
        let dvdn = grad_v[face.owner].mul_vec(n);
        let dwdn = grad_w[face.owner].mul_vec(n);
        let mu = num::<S>(props.mu(c.bface[b].to_f64().unwrap()));
        drag_density.push(-mu * dwdn.dot(dvdn));
        let wet = S::one() - c.bface[b];
        let x = geom.face_centroid[fid];
        constraint_densities.push([wet * x.x, wet * x.y, wet]);
    }
    Ok(SensitivityForm {
        faces,
        drag_density,
        constraint_densities,
        lambda,
        tau,
        g,
    })
}

/// Evaluate the linear form at a vertex deformation field:
/// J'(Omega)V = sum over obsN faces of G_f ((V_a + V_b)/2 . n_f) A_f.
///
/// `v` holds one vector per mesh vertex; only the vertices of deformable
/// faces are read, so the caller's values elsewhere (normally zero on the
/// non-deformable boundary) do not enter.
pub fn evaluate_form<S: Scalar>(form: &SensitivityForm<S>, v: &[Vec2<S>], mesh: &Mesh<S>) -> S {
    assert_eq!(v.len(), mesh.n_vertices(), "vertex field length");
    let geom = mesh.geometry();
    let half = S::one() / (S::one() + S::one());
    let mut total = S::zero();
    for (k, &fid) in form.faces.iter().enumerate() {
        let face = &mesh.faces[fid];
        let vn = (v[face.a] + v[face.b]).dot(geom.face_normal[fid]) * half;
        total += form.total_density(k) * vn * geom.face_area[fid];
    }
    total
}

/// Export the per-face densities along the deformable boundary as VTK line
/// data for inspection (total G plus its drag part).
pub fn write_sensitivity_profile<S: Scalar>(
    path: &Path,
    mesh: &Mesh<S>,
    form: &SensitivityForm<S>,
) -> std::io::Result<()> {
    vtk::write_boundary_profile(path, mesh, &form.faces, "sensitivity", &form.total_densities())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::constraint_pairing;
    use crate::field::VectorField;
    use crate::flow::Concentration;
    use crate::meshgen::{annulus, rect_grid, RectSides};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rectangle whose bottom side is the deformable obstacle: every obsN
    /// face there has the uniform outward normal (0, -1), which makes exact
    /// synthetic-field predictions possible.
    fn flat_bottom() -> Mesh<f64> {
        let sides = RectSides {
            left: PatchKind::Inlet,
            right: PatchKind::Outlet,
            bottom: PatchKind::ObsN,
            top: PatchKind::Wall,
        };
        rect_grid(8, 6, (0.0, 2.0), (0.0, 1.0), sides)
    }

    /// Synthetic states with linear velocity fields; least-squares gradients
    /// reproduce them exactly, so normal derivatives are known in closed form.
    fn synthetic_states(
        mesh: &Mesh<f64>,
        v: impl Fn(Vec2<f64>) -> Vec2<f64>,
        w: impl Fn(Vec2<f64>) -> Vec2<f64>,
    ) -> (PrimalState<f64>, AdjointState<f64>) {
        let primal = PrimalState {
            v: VectorField::from_fn(mesh, &v),
            p: ScalarField::zeros(mesh),
            c: ScalarField::zeros(mesh),
            flux: vec![0.0; mesh.n_faces()],
            residual_history: Vec::new(),
        };
        let adjoint = AdjointState {
            w: VectorField::from_fn(mesh, &w),
            q: ScalarField::zeros(mesh),
            gamma: vec![Vec2::zero(); mesh.obstacle_faces().len()],
            residual_history: Vec::new(),
        };
        (primal, adjoint)
    }

    fn props() -> FluidProps {
        FluidProps::default()
    }

    #[test]
    fn multiplier_free_form_is_pure_drag() {
        let mesh = flat_bottom();
        let c = ScalarField::zeros(&mesh);
        let (primal, adjoint) = synthetic_states(&mesh, |x| Vec2::new(x.y, 0.0), |x| {
            Vec2::new(0.3 * x.y, 0.1 * x.x)
        });
        let form =
            assemble_sensitivity(&primal, &adjoint, &mesh, &c, [0.0; 3], 0.0, [0.0; 3], &props())
                .unwrap();
        assert_eq!(form.faces, mesh.patch_faces(PatchKind::ObsN));
        assert!(!form.faces.is_empty());
        for k in 0..form.faces.len() {
            assert_eq!(form.total_density(k), form.drag_density[k]);
        }
    }

    #[test]
    fn perpendicular_normal_derivatives_zero_the_drag_density() {
        // On the bottom n = (0,-1): v = (y, 0) has dv/dn = (-1, 0) while
        // w = (0, y) has dw/dn = (0, -1); the densities must vanish exactly.
        let mesh = flat_bottom();
        let c = ScalarField::zeros(&mesh);
        let (primal, adjoint) =
            synthetic_states(&mesh, |x| Vec2::new(x.y, 0.0), |x| Vec2::new(0.0, x.y));
        let form =
            assemble_sensitivity(&primal, &adjoint, &mesh, &c, [0.0; 3], 0.0, [0.0; 3], &props())
                .unwrap();
        for (k, &d) in form.drag_density.iter().enumerate() {
            assert!(d.abs() < 1e-13, "face {k}: drag density {d}");
        }
    }

    #[test]
    fn evaluation_is_linear_in_the_deformation() {
        let mesh: Mesh<f64> = annulus(0.5, 1.5, 32, 6, PatchKind::Wall, None);
        let c = ScalarField::from_fn(&mesh, |x| Concentration {
            waterline: Some(0.1),
            delta: 0.3,
        }
        .at(x.y));
        let (primal, adjoint) = synthetic_states(
            &mesh,
            |x| Vec2::new(x.y, -0.2 * x.x),
            |x| Vec2::new(0.4 * x.x, x.y),
        );
        let form = assemble_sensitivity(
            &primal,
            &adjoint,
            &mesh,
            &c,
            [0.7, -0.3, 1.1],
            10.0,
            [0.01, 0.02, -0.05],
            &props(),
        )
        .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut sample = || {
            (0..mesh.n_vertices())
                .map(|_| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect::<Vec<_>>()
        };
        let v1 = sample();
        let v2 = sample();
        let (a, b) = (1.7, -0.6);
        let combined: Vec<Vec2<f64>> = v1
            .iter()
            .zip(&v2)
            .map(|(&u, &w)| u * a + w * b)
            .collect();
        let e1 = evaluate_form(&form, &v1, &mesh);
        let e2 = evaluate_form(&form, &v2, &mesh);
        let ec = evaluate_form(&form, &combined, &mesh);
        let expect = a * e1 + b * e2;
        assert!(
            (ec - expect).abs() <= 1e-12 * expect.abs().max(1.0),
            "combined {ec} vs {expect}"
        );
    }

    #[test]
    fn constraint_terms_reproduce_the_pairing_quadrature() {
        // With zero states the drag density vanishes identically and the form
        // must equal (lambda - tau g) . constraint_pairing(V) exactly: both
        // use the same face-midpoint rule.
        let mesh: Mesh<f64> = annulus(0.5, 1.5, 24, 5, PatchKind::Wall, None);
        let c = ScalarField::from_fn(&mesh, |x| Concentration {
            waterline: Some(0.0),
            delta: 0.4,
        }
        .at(x.y));
        let (primal, adjoint) = synthetic_states(&mesh, |_| Vec2::zero(), |_| Vec2::zero());
        let lambda = [0.9, -1.4, 0.25];
        let tau = 10.0;
        let g = [0.003, -0.001, 0.02];
        let form =
            assemble_sensitivity(&primal, &adjoint, &mesh, &c, lambda, tau, g, &props()).unwrap();
        assert!(form.drag_density.iter().all(|&d| d == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<Vec2<f64>> = (0..mesh.n_vertices())
            .map(|_| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let lhs = evaluate_form(&form, &v, &mesh);
        let pairing = constraint_pairing(&mesh, &c, &v);
        let rhs: f64 = (0..N_CONSTRAINTS)
            .map(|i| (lambda[i] - tau * g[i]) * pairing[i])
            .sum();
        assert!(
            (lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0),
            "form {lhs} vs pairing {rhs}"
        );
    }

    #[test]
    fn zero_and_tangential_fields_evaluate_to_zero() {
        let mesh = flat_bottom();
        let c = ScalarField::zeros(&mesh);
        let (primal, adjoint) = synthetic_states(
            &mesh,
            |x| Vec2::new(x.y * x.y, 0.2 * x.x),
            |x| Vec2::new(x.x + x.y, 0.0),
        );
        let form =
            assemble_sensitivity(&primal, &adjoint, &mesh, &c, [1.0; 3], 5.0, [0.1; 3], &props())
                .unwrap();
        let zero = vec![Vec2::zero(); mesh.n_vertices()];
        assert_eq!(evaluate_form(&form, &zero, &mesh), 0.0);
        // The bottom normal is (0,-1) everywhere, so any purely horizontal
        // field is tangential to the deformable boundary.
        let tangential: Vec<Vec2<f64>> = mesh
            .vertices
            .iter()
            .map(|p| Vec2::new(1.0 + p.x * p.y, 0.0))
            .collect();
        assert_eq!(evaluate_form(&form, &tangential, &mesh), 0.0);
    }

    #[test]
    fn steepest_descent_direction_gives_negative_square() {
        // v = w = (y, 0) on the flat bottom: dv/dn . dw/dn = 1, so the drag
        // density is the constant -mu and V = -G n yields exactly
        // -G^2 * |bottom|.
        let mesh = flat_bottom();
        let c = ScalarField::zeros(&mesh);
        let (primal, adjoint) =
            synthetic_states(&mesh, |x| Vec2::new(x.y, 0.0), |x| Vec2::new(x.y, 0.0));
        let form =
            assemble_sensitivity(&primal, &adjoint, &mesh, &c, [0.0; 3], 0.0, [0.0; 3], &props())
                .unwrap();
        let gval = -props().mu(0.0);
        for &d in &form.drag_density {
            assert!((d - gval).abs() < 1e-12, "density {d} vs {gval}");
        }
        let v: Vec<Vec2<f64>> = mesh
            .vertices
            .iter()
            .map(|_| Vec2::new(0.0, -1.0) * -gval)
            .collect();
        let value = evaluate_form(&form, &v, &mesh);
        let expect = -gval * gval * 2.0;
        assert!(value < 0.0);
        assert!(
            (value - expect).abs() < 1e-12,
            "value {value} vs {expect}"
        );
    }

    #[test]
    fn profile_export_writes_one_value_per_face() {
        let mesh: Mesh<f64> = annulus(0.5, 1.5, 16, 4, PatchKind::Wall, None);
        let c = ScalarField::zeros(&mesh);
        let (primal, adjoint) = synthetic_states(&mesh, |x| x, |x| x);
        let form =
            assemble_sensitivity(&primal, &adjoint, &mesh, &c, [0.0; 3], 0.0, [0.0; 3], &props())
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sensitivity.vtk");
        write_sensitivity_profile(&path, &mesh, &form).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("SCALARS sensitivity double 1"));
        assert!(text.contains(&format!("CELL_DATA {}", form.faces.len())));
    }

    #[test]
    fn blended_viscosity_scales_the_drag_density() {
        // A face sitting fully in air must be weighted by mu_air, fully in
        // water by mu_water; check via two single-phase assemblies.
        let mesh = flat_bottom();
        let (primal, adjoint) =
            synthetic_states(&mesh, |x| Vec2::new(x.y, 0.0), |x| Vec2::new(x.y, 0.0));
        let water = ScalarField::zeros(&mesh);
        let air = ScalarField::constant(&mesh, 1.0);
        let p = props();
        let fw =
            assemble_sensitivity(&primal, &adjoint, &mesh, &water, [0.0; 3], 0.0, [0.0; 3], &p)
                .unwrap();
        let fa = assemble_sensitivity(&primal, &adjoint, &mesh, &air, [0.0; 3], 0.0, [0.0; 3], &p)
            .unwrap();
        for (dw, da) in fw.drag_density.iter().zip(&fa.drag_density) {
            assert!((dw - -p.mu_water).abs() < 1e-12);
            assert!((da - -p.mu_air).abs() < 1e-12);
        }
    }

}
