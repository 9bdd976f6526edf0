//! Constrained descent directions from the assembled sensitivity: Picard
//! iteration for the augmented p-Laplacian problem with p-continuation.
//!
//! The deformation field minimizes (1/p) Int (DV:DV)^{p/2} dx + J'(Omega)V
//! over vertex fields vanishing on the inlet, outlet, walls and the fixed
//! part of the obstacle. Each Picard step freezes the cell-wise weight
//! w = (grad V : grad V + eps_reg)^{(p-2)/2} at the previous iterate and
//! solves the resulting linear vector-elliptic problem with a P1 finite
//! element stiffness on the triangulation; the constraint multipliers are
//! advanced by the penalty-scaled pairing of the new iterate and feed back
//! into the right-hand side, so the converged direction is first-order
//! neutral with respect to the displacement and barycenter constraints.
//! Ascending values of p reuse the previous solution as the initial guess;
//! the relaxation follows V^k = V^{k-1} + omega (Vtilde^k - V^{k-1}).

use std::io;
use std::path::Path;

use crate::constraints::N_CONSTRAINTS;
use crate::error::DescentError;
use crate::linalg::{cg, Csr};
use crate::mesh::{Mesh, PatchKind};
use crate::scalar::{num, Scalar, Vec2};
use crate::shape_gradient::SensitivityForm;

#[derive(Clone, Debug)]
pub struct DescentConfig {
    /// Exponent continuation schedule; must start at 2 and increase.
    pub p_sequence: Vec<f64>,
    /// Relaxation factor omega in (0, 2).
    pub relax: f64,
    /// Convergence threshold for the combined residual R^k.
    pub tol: f64,
    /// Augmentation penalty scaling the multiplier updates.
    pub tau: f64,
    /// Weight regularization; keeps the linearized operator elliptic where
    /// the previous iterate is flat.
    pub eps_reg: f64,
    /// Iteration cap per exponent stage.
    pub max_picard_iters: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            p_sequence: vec![2.0, 2.3, 2.6],
            relax: 1.0,
            tol: 1e-9,
            tau: 10.0,
            eps_reg: 1e-10,
            max_picard_iters: 500,
        }
    }
}

impl DescentConfig {
    // `!(x > 0)` rather than `x <= 0` so NaN input fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), DescentError> {
        let bad = |msg: &str| Err(DescentError::InvalidConfig(msg.into()));
        match self.p_sequence.first() {
            None => return bad("p sequence must not be empty"),
            Some(&first) if first != 2.0 => return bad("p sequence must start at 2"),
            _ => {}
        }
        if self.p_sequence.windows(2).any(|w| w[1] <= w[0]) {
            return bad("p sequence must be strictly increasing");
        }
        if !(self.relax > 0.0 && self.relax < 2.0) {
            return bad("relaxation factor must lie in (0, 2)");
        }
        if !(self.tol > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("penalty factor must be positive");
        }
        if !(self.eps_reg > 0.0) {
            return bad("weight regularization must be positive");
        }
        if self.max_picard_iters == 0 {
            return bad("iteration cap must be at least 1");
        }
        Ok(())
    }
}

/// One Picard iteration's convergence record; the total is the sum of the
/// three components.
#[derive(Clone, Copy, Debug)]
pub struct DescentResidual<S> {
    /// Lumped-mass L2 norm squared of V^k - V^{k-1}.
    pub res_v: S,
    /// Squared Euclidean change of the barycenter multipliers.
    pub res_lambda_bc: S,
    /// Squared change of the displacement multiplier.
    pub res_lambda_v: S,
    pub total: S,
}

#[derive(Clone, Debug)]
pub struct DescentResult<S> {
    /// Deformation direction per mesh vertex; exactly zero on every boundary
    /// vertex outside the deformable obstacle patch.
    pub v: Vec<Vec2<S>>,
    /// Converged constraint multipliers (barycenter x, y, displacement).
    pub lambda: [S; N_CONSTRAINTS],
    pub residual_history: Vec<DescentResidual<S>>,
    /// Exponent used by each iteration, aligned with `residual_history`.
    pub p_trace: Vec<f64>,
    /// False when some exponent stage hit the iteration cap before reaching
    /// the tolerance; `v` and `lambda` then hold the last iterate.
    pub converged: bool,
}

/// lambda' = lambda + tau * pairing.
pub fn update_multipliers<S: Scalar>(
    lambda: [S; N_CONSTRAINTS],
    tau: S,
    pairing: [S; N_CONSTRAINTS],
) -> [S; N_CONSTRAINTS] {
    let mut out = lambda;
    for i in 0..N_CONSTRAINTS {
        out[i] += tau * pairing[i];
    }
    out
}

/// P1 stiffness machinery on the triangulation: barycentric gradients,
/// lumped masses, the Dirichlet vertex mask and the shared matrix pattern.
struct VertexPoisson<S> {
    mat: Csr<S>,
    /// Vertices pinned to zero: every boundary vertex touched by a face that
    /// is not part of the deformable obstacle patch.
    dirichlet: Vec<bool>,
    /// Per-cell gradients of the three barycentric basis functions.
    basis_grad: Vec<[Vec2<S>; 3]>,
    /// Lumped P1 mass per vertex, for discrete L2 norms.
    mass: Vec<S>,
}

impl<S: Scalar> VertexPoisson<S> {
    fn new(mesh: &Mesh<S>) -> Self {
        let geom = mesh.geometry();
        let nv = mesh.n_vertices();
        let mut dirichlet = vec![false; nv];
        for fid in mesh.boundary_faces() {
            let face = &mesh.faces[fid];
            if face.patch != Some(PatchKind::ObsN) {
                dirichlet[face.a] = true;
                dirichlet[face.b] = true;
            }
        }
        let mut nbrs = vec![Vec::new(); nv];
        let mut basis_grad = Vec::with_capacity(mesh.n_cells() * 3);
        let mut mass = vec![S::zero(); nv];
        let third = num::<S>(1.0 / 3.0);
        for (cell, vs) in mesh.cells.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        nbrs[vs[i]].push(vs[j]);
                    }
                }
                mass[vs[i]] += geom.cell_volume[cell] * third;
            }
            // grad of the hat at vertex i: the opposite edge rotated a
            // quarter turn toward the vertex, over twice the area.
            let inv2a = S::one() / (geom.cell_volume[cell] * num::<S>(2.0));
            let p = [
                mesh.vertices[vs[0]],
                mesh.vertices[vs[1]],
                mesh.vertices[vs[2]],
            ];
            let perp = |d: Vec2<S>| Vec2::new(-d.y, d.x);
            basis_grad.push([
                perp(p[2] - p[1]) * inv2a,
                perp(p[0] - p[2]) * inv2a,
                perp(p[1] - p[0]) * inv2a,
            ]);
        }
        let mat = Csr::from_adjacency(&nbrs);
        Self {
            mat,
            dirichlet,
            basis_grad,
            mass,
        }
    }

    /// Assemble the weighted stiffness (identity rows on pinned vertices)
    /// and the negated-form load, then solve for both velocity components.
    fn step(
        &mut self,
        v_prev: &[Vec2<S>],
        form: &SensitivityForm<S>,
        lambda_eff: [S; N_CONSTRAINTS],
        mesh: &Mesh<S>,
        p: f64,
        eps_reg: f64,
    ) -> Result<Vec<Vec2<S>>, DescentError> {
        let geom = mesh.geometry();
        let nv = mesh.n_vertices();
        let expo = num::<S>((p - 2.0) / 2.0);
        let eps = num::<S>(eps_reg);
        self.mat.set_all(S::zero());
        for (cell, vs) in mesh.cells.iter().enumerate() {
            let bg = &self.basis_grad[cell];
            let mut gvx = Vec2::zero();
            let mut gvy = Vec2::zero();
            for i in 0..3 {
                gvx += bg[i] * v_prev[vs[i]].x;
                gvy += bg[i] * v_prev[vs[i]].y;
            }
            let weight = (gvx.dot(gvx) + gvy.dot(gvy) + eps).powf(expo);
            let scale = weight * geom.cell_volume[cell];
            for i in 0..3 {
                if self.dirichlet[vs[i]] {
                    continue;
                }
                for j in 0..3 {
                    if self.dirichlet[vs[j]] {
                        continue;
                    }
                    let slot = self.mat.slot(vs[i], vs[j]);
                    self.mat.add_at(slot, scale * bg[i].dot(bg[j]));
                }
            }
        }
        for v in 0..nv {
            if self.dirichlet[v] {
                let slot = self.mat.slot(v, v);
                self.mat.set_at(slot, S::one());
            }
        }

        let half = S::one() / (S::one() + S::one());
        let mut rhs_x = vec![S::zero(); nv];
        let mut rhs_y = vec![S::zero(); nv];
        for (k, &fid) in form.faces.iter().enumerate() {
            let face = &mesh.faces[fid];
            let mut density = form.drag_density[k];
            for i in 0..N_CONSTRAINTS {
                density += lambda_eff[i] * form.constraint_densities[k][i];
            }
            let load = geom.face_normal[fid] * (-density * geom.face_area[fid] * half);
            for vid in [face.a, face.b] {
                if !self.dirichlet[vid] {
                    rhs_x[vid] += load.x;
                    rhs_y[vid] += load.y;
                }
            }
        }

        let rtol = num::<S>(1e-12);
        let mut vx = vec![S::zero(); nv];
        let mut vy = vec![S::zero(); nv];
        cg(&self.mat, &rhs_x, &mut vx, rtol, 10_000)?;
        cg(&self.mat, &rhs_y, &mut vy, rtol, 10_000)?;
        Ok((0..nv).map(|i| Vec2::new(vx[i], vy[i])).collect())
    }

    /// Lumped-mass L2 norm squared of the difference of two vertex fields.
    fn l2_diff(&self, a: &[Vec2<S>], b: &[Vec2<S>]) -> S {
        let mut out = S::zero();
        for i in 0..a.len() {
            let d = a[i] - b[i];
            out += self.mass[i] * d.dot(d);
        }
        out
    }
}

/// Pairing of a vertex field against the form's constraint densities by the
/// shared face-midpoint rule; identical to `constraints::constraint_pairing`
/// up to rounding, but reads the densities the iteration actually uses, so a
/// form without constraint terms updates no multipliers.
fn form_pairing<S: Scalar>(
    form: &SensitivityForm<S>,
    v: &[Vec2<S>],
    mesh: &Mesh<S>,
) -> [S; N_CONSTRAINTS] {
    let geom = mesh.geometry();
    let half = S::one() / (S::one() + S::one());
    let mut out = [S::zero(); N_CONSTRAINTS];
    for (k, &fid) in form.faces.iter().enumerate() {
        let face = &mesh.faces[fid];
        let vn = (v[face.a] + v[face.b]).dot(geom.face_normal[fid]) * half;
        let w = vn * geom.face_area[fid];
        for i in 0..N_CONSTRAINTS {
            out[i] += form.constraint_densities[k][i] * w;
        }
    }
    out
}

/// One linearized Picard step about `v_prev`: weight from the previous
/// iterate, right-hand side from the negative of the augmented form with the
/// given multiplier state. Exposed for oracle tests; `solve_descent` drives
/// the full iteration.
#[allow(clippy::too_many_arguments)]
pub fn picard_step<S: Scalar>(
    v_prev: &[Vec2<S>],
    form: &SensitivityForm<S>,
    lambda: [S; N_CONSTRAINTS],
    tau: S,
    g: [S; N_CONSTRAINTS],
    mesh: &Mesh<S>,
    p: f64,
    eps_reg: f64,
) -> Result<Vec<Vec2<S>>, DescentError> {
    assert_eq!(v_prev.len(), mesh.n_vertices(), "vertex field length");
    let mut ws = VertexPoisson::new(mesh);
    let mut lambda_eff = [S::zero(); N_CONSTRAINTS];
    for i in 0..N_CONSTRAINTS {
        lambda_eff[i] = lambda[i] - tau * g[i];
    }
    ws.step(v_prev, form, lambda_eff, mesh, p, eps_reg)
}

/// Run the full p-continued Picard iteration for the augmented problem.
///
/// The multipliers restart from zero regardless of the form's stored values
/// (those record the assembly-time outer state); the constraint deviations
/// `form.g` stay frozen throughout. On hitting the iteration cap the last
/// iterate is returned with `converged = false` and a logged diagnostic.
pub fn solve_descent<S: Scalar>(
    form: &SensitivityForm<S>,
    mesh: &Mesh<S>,
    cfg: &DescentConfig,
) -> Result<DescentResult<S>, DescentError> {
    cfg.validate()?;
    let mut ws = VertexPoisson::new(mesh);
    let nv = mesh.n_vertices();
    let tau = num::<S>(cfg.tau);
    let omega = num::<S>(cfg.relax);
    let tol = num::<S>(cfg.tol);
    let mut v = vec![Vec2::<S>::zero(); nv];
    let mut lambda = [S::zero(); N_CONSTRAINTS];
    let mut history = Vec::new();
    let mut p_trace = Vec::new();

    for &p in &cfg.p_sequence {
        let mut stage_done = false;
        for _ in 0..cfg.max_picard_iters {
            let mut lambda_eff = [S::zero(); N_CONSTRAINTS];
            for i in 0..N_CONSTRAINTS {
                lambda_eff[i] = lambda[i] - tau * form.g[i];
            }
            let vtilde = ws.step(&v, form, lambda_eff, mesh, p, cfg.eps_reg)?;
            let v_new: Vec<Vec2<S>> = v
                .iter()
                .zip(&vtilde)
                .map(|(&old, &t)| old + (t - old) * omega)
                .collect();
            let lambda_new = update_multipliers(lambda, tau, form_pairing(form, &v_new, mesh));

            let res_v = ws.l2_diff(&v_new, &v);
            let dbc0 = lambda_new[0] - lambda[0];
            let dbc1 = lambda_new[1] - lambda[1];
            let dv = lambda_new[2] - lambda[2];
            let res_lambda_bc = dbc0 * dbc0 + dbc1 * dbc1;
            let res_lambda_v = dv * dv;
            let total = res_v + res_lambda_bc + res_lambda_v;
            history.push(DescentResidual {
                res_v,
                res_lambda_bc,
                res_lambda_v,
                total,
            });
            p_trace.push(p);
            v = v_new;
            lambda = lambda_new;
            if total <= tol {
                stage_done = true;
                break;
            }
        }
        if !stage_done {
            log::warn!(
                "descent stage p = {p} hit the {} iteration cap at residual {:e}",
                cfg.max_picard_iters,
                history.last().map(|r| r.total.to_f64().unwrap()).unwrap_or(f64::NAN),
            );
            return Ok(DescentResult {
                v,
                lambda,
                residual_history: history,
                p_trace,
                converged: false,
            });
        }
    }
    Ok(DescentResult {
        v,
        lambda,
        residual_history: history,
        p_trace,
        converged: true,
    })
}

/// Dump the residual history as CSV with per-stage iteration counters;
/// columns p, k, res_V, res_lambda_bc, res_lambda_v, R.
pub fn write_descent_csv<S: Scalar>(
    path: &Path,
    result: &DescentResult<S>,
) -> io::Result<()> {
    let mut out = String::from("p,k,res_V,res_lambda_bc,res_lambda_v,R\n");
    let mut k = 0usize;
    let mut last_p = f64::NAN;
    for (entry, &p) in result.residual_history.iter().zip(&result.p_trace) {
        k = if p == last_p { k + 1 } else { 0 };
        last_p = p;
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e}\n",
            p,
            k,
            entry.res_v.to_f64().unwrap(),
            entry.res_lambda_bc.to_f64().unwrap(),
            entry.res_lambda_v.to_f64().unwrap(),
            entry.total.to_f64().unwrap(),
        ));
    }
    std::fs::write(path, out)
}
