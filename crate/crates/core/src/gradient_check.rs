//! Finite-difference validation of the assembled boundary sensitivity.
//!
//! The directional value of the sensitivity form is compared against a
//! central difference of the re-solved objective under the perturbation of
//! identity x -> x + eps V, for seeded smooth deformation fields supported
//! near the deformable boundary and vanishing on every other boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::FlowError;
use crate::flow::{
    build_extension_eta, compute_objective, solve_primal, solve_primal_from, FlowConfig,
    FluidProps,
};
use crate::mesh::{Mesh, PatchKind};
use crate::scalar::{num, Scalar, Vec2};
use crate::shape_gradient::{assemble_sensitivity, evaluate_form};

/// One perturbation field's comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradientSample<S> {
    /// Directional value of the assembled form, integral of G (V . n).
    pub adjoint_value: S,
    /// Central difference (J(+eps) - J(-eps)) / (2 eps).
    pub fd_value: S,
    /// |adjoint - fd| / max(|fd|, 1e-300).
    pub rel_error: S,
}

/// Radial C^2 cutoff: 1 on the obstacle, exactly 0 from 70% of the way to
/// the nearest fixed boundary outward.
struct Cutoff<S> {
    center: Vec2<S>,
    r_full: S,
    r_zero: S,
}

impl<S: Scalar> Cutoff<S> {
    fn at(&self, x: Vec2<S>) -> S {
        let d = (x - self.center).norm();
        if d <= self.r_full {
            return S::one();
        }
        if d >= self.r_zero {
            return S::zero();
        }
        let t = (d - self.r_full) / (self.r_zero - self.r_full);
        let s = S::one() - t * t;
        s * s * s
    }
}

fn obstacle_cutoff<S: Scalar>(mesh: &Mesh<S>) -> Cutoff<S> {
    let mut obs: Vec<Vec2<S>> = Vec::new();
    let mut center = Vec2::zero();
    for &fid in &mesh.patch_faces(PatchKind::ObsN) {
        let f = &mesh.faces[fid];
        for vtx in [f.a, f.b] {
            let p = mesh.vertices[vtx];
            obs.push(p);
            center += p;
        }
    }
    assert!(!obs.is_empty(), "no deformable boundary faces");
    center = center * (S::one() / num::<S>(obs.len() as f64));
    let mut r_full = S::zero();
    for p in &obs {
        r_full = r_full.max((*p - center).norm());
    }
    let mut r_outer = S::infinity();
    for fid in mesh.boundary_faces() {
        let f = &mesh.faces[fid];
        if f.patch == Some(PatchKind::ObsN) {
            continue;
        }
        for vtx in [f.a, f.b] {
            r_outer = r_outer.min((mesh.vertices[vtx] - center).norm());
        }
    }
    assert!(
        r_outer > r_full,
        "deformable boundary is not interior to the fixed boundary"
    );
    Cutoff {
        center,
        r_full,
        r_zero: r_full + num::<S>(0.7) * (r_outer - r_full),
    }
}

/// Seeded smooth vertex deformation fields: a three-mode trigonometric
/// polynomial per component, multiplied by a radial cutoff so the field is 1
/// near the deformable boundary and exactly zero on all fixed boundaries,
/// then normalized to unit maximum displacement over the deformable faces.
pub fn smooth_boundary_fields<S: Scalar>(
    mesh: &Mesh<S>,
    n_fields: usize,
    seed: u64,
) -> Vec<Vec<Vec2<S>>> {
    let cutoff = obstacle_cutoff(mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kappa_base = std::f64::consts::PI / cutoff.r_full.to_f64().unwrap();
    let mut fields = Vec::with_capacity(n_fields);
    for _ in 0..n_fields {
        // Shared modes, independent component amplitudes.
        let modes: Vec<(Vec2<S>, S, [S; 2])> = (0..3)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let kappa: f64 = rng.random_range(0.3..1.2) * kappa_base;
                let k = Vec2::new(num::<S>(kappa * theta.cos()), num::<S>(kappa * theta.sin()));
                let phase = num::<S>(rng.random_range(0.0..std::f64::consts::TAU));
                let amps = [
                    num::<S>(rng.random_range(-1.0..1.0)),
                    num::<S>(rng.random_range(-1.0..1.0)),
                ];
                (k, phase, amps)
            })
            .collect();
        let mut field: Vec<Vec2<S>> = mesh
            .vertices
            .iter()
            .map(|&p| {
                let q = cutoff.at(p);
                if q == S::zero() {
                    return Vec2::zero();
                }
                let rel = p - cutoff.center;
                let mut v = Vec2::zero();
                for (k, phase, amps) in &modes {
                    let s = (k.dot(rel) + *phase).sin();
                    v.x += amps[0] * s;
                    v.y += amps[1] * s;
                }
                v * q
            })
            .collect();
        let mut peak = S::zero();
        for &fid in &mesh.patch_faces(PatchKind::ObsN) {
            let f = &mesh.faces[fid];
            peak = peak.max(field[f.a].norm()).max(field[f.b].norm());
        }
        if peak > S::zero() {
            let inv = S::one() / peak;
            for v in &mut field {
                *v = *v * inv;
            }
        }
        fields.push(field);
    }
    fields
}

/// Compare the assembled sensitivity against central differences of the
/// re-solved objective for `n_fields` seeded perturbations. `eps_fd` is the
/// physical half-step (the fields have unit maximum displacement).
pub fn gradient_check<S: Scalar>(
    mesh: &Mesh<S>,
    props: &FluidProps,
    flow_cfg: &FlowConfig,
    n_fields: usize,
    eps_fd: f64,
    seed: u64,
) -> Result<Vec<GradientSample<S>>, FlowError> {
    if !(eps_fd > 0.0) {
        return Err(FlowError::InvalidConfig(
            "finite-difference step must be positive".into(),
        ));
    }
    if n_fields == 0 {
        return Ok(Vec::new());
    }
    let base = solve_primal(mesh, props, flow_cfg)?;
    let eta = build_extension_eta(mesh)?;
    let adjoint = crate::adjoint::solve_adjoint(&base, &eta, props, mesh, flow_cfg)?;
    let zero = [S::zero(); crate::constraints::N_CONSTRAINTS];
    let form = assemble_sensitivity(&base, &adjoint, mesh, &base.c, zero, S::zero(), zero, props)?;

    let eps = num::<S>(eps_fd);
    let mut out = Vec::with_capacity(n_fields);
    for field in smooth_boundary_fields(mesh, n_fields, seed) {
        let adjoint_value = evaluate_form(&form, &field, mesh);
        let mut j_side = [S::zero(); 2];
        for (slot, sign) in [(0usize, S::one()), (1, -S::one())] {
            let moved = mesh.apply_deformation(&field, eps * sign);
            let state = solve_primal_from(&moved, props, flow_cfg, &base)?;
            let eta_m = build_extension_eta(&moved)?;
            j_side[slot] = compute_objective(&state, &eta_m, props, &moved)?;
        }
        let fd_value = (j_side[0] - j_side[1]) / (eps + eps);
        let rel_error = (adjoint_value - fd_value).abs() / fd_value.abs().max(num(1e-300));
        out.push(GradientSample {
            adjoint_value,
            fd_value,
            rel_error,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshgen::CylinderChannel;

    fn case() -> Mesh<f64> {
        CylinderChannel {
            x_min: -0.6,
            x_max: 1.0,
            y_min: -0.4,
            y_max: 0.4,
            center: (0.0, 0.0),
            radius: 0.1,
            n_theta: 24,
            n_r: 8,
            grading: 1.3,
            waterline: None,
        }
        .build()
    }

    #[test]
    fn fields_are_deterministic_per_seed() {
        let mesh = case();
        let a = smooth_boundary_fields(&mesh, 2, 7);
        let b = smooth_boundary_fields(&mesh, 2, 7);
        assert_eq!(a, b);
        let c = smooth_boundary_fields(&mesh, 2, 8);
        assert_ne!(a, c);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn fields_vanish_on_fixed_boundaries_and_peak_on_the_obstacle() {
        let mesh = case();
        for field in smooth_boundary_fields(&mesh, 3, 42) {
            let mut peak: f64 = 0.0;
            for fid in mesh.boundary_faces() {
                let f = &mesh.faces[fid];
                for vtx in [f.a, f.b] {
                    if f.patch == Some(PatchKind::ObsN) {
                        peak = peak.max(field[vtx].norm());
                    } else {
                        assert_eq!(field[vtx], Vec2::zero());
                    }
                }
            }
            assert!((peak - 1.0).abs() <= 1e-12, "peak {peak}");
        }
    }

    #[test]
    fn cutoff_is_one_on_the_obstacle_and_decays_smoothly() {
        let mesh = case();
        let cut = obstacle_cutoff(&mesh);
        for &fid in &mesh.patch_faces(PatchKind::ObsN) {
            let f = &mesh.faces[fid];
            assert_eq!(cut.at(mesh.vertices[f.a]), 1.0);
        }
        // Monotone decay along a ray.
        let mut prev = 1.0;
        for i in 0..50 {
            let d = cut.r_full + (cut.r_zero - cut.r_full) * (i as f64) / 49.0;
            let v = cut.at(cut.center + Vec2::new(d, 0.0));
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn zero_fields_and_zero_eps_are_rejected_or_empty() {
        let mesh = case();
        let props = FluidProps::default();
        let cfg = FlowConfig::default();
        assert!(gradient_check::<f64>(&mesh, &props, &cfg, 1, 0.0, 1).is_err());
        let empty = gradient_check::<f64>(&mesh, &props, &cfg, 0, 1e-3, 1).unwrap();
        assert!(empty.is_empty());
    }
}
