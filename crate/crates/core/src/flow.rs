//! Steady incompressible finite-volume flow solver.
//!
//! Colocated SIMPLE-type pressure-velocity coupling on triangle meshes:
//! implicit first-order upwind convection with a deferred central correction,
//! over-relaxed diffusion split, momentum-weighted (Rhie-Chow) face fluxes
//! and a pressure-correction Poisson solve.
//!
//! Two-phase handling: the air concentration c is a prescribed static
//! stratification (waterline profile), not a transported field. Density and
//! viscosity blend linearly in c. The pressure unknown is the total pressure,
//! which absorbs the hydrostatic part of a stratified density exactly, so the
//! momentum equation carries no gravity term and the rest state v = 0, p = 0
//! is an exact solution of the quiescent problem.

use std::io;
use std::path::Path;

use log::{debug, warn};

use crate::error::FlowError;
use crate::field::{ScalarField, VectorField};
use crate::fv::{refresh_extrapolated, refresh_extrapolated_vec, CellMatrix, FaceBc, FaceOps, Gradients};
use crate::linalg::{bicgstab, cg};
use crate::mesh::{Mesh, PatchKind};
use crate::scalar::{num, Scalar, Vec2};

/// Fluid properties of the two phases.
///
/// `gravity` is absorbed by the total-pressure transform (the solved pressure
/// is p = physical pressure minus the hydrostatic column), so it never enters
/// the discrete system; it is retained so case files document the physical
/// setup. `body_force` is a state-independent momentum source per unit
/// volume.
#[derive(Clone, Copy, Debug)]
pub struct FluidProps {
    pub rho_water: f64,
    pub rho_air: f64,
    pub mu_water: f64,
    pub mu_air: f64,
    pub gravity: [f64; 2],
    pub body_force: [f64; 2],
}

impl Default for FluidProps {
    fn default() -> Self {
        Self {
            rho_water: 1.0,
            rho_air: 1.0e-3,
            mu_water: 5.0e-2,
            mu_air: 1.0e-3,
            gravity: [0.0, 0.0],
            body_force: [0.0, 0.0],
        }
    }
}

impl FluidProps {
    // The negated comparisons reject NaN along with nonpositive values.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), FlowError> {
        let pos = [self.rho_water, self.rho_air, self.mu_water, self.mu_air];
        if pos.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(FlowError::InvalidConfig(
                "densities and viscosities must be strictly positive".into(),
            ));
        }
        if self.rho_air > self.rho_water {
            return Err(FlowError::InvalidConfig(
                "air density must not exceed water density".into(),
            ));
        }
        Ok(())
    }

    /// Linear equation of state: property(c) = (1-c) water + c air.
    pub fn rho(&self, c: f64) -> f64 {
        (1.0 - c) * self.rho_water + c * self.rho_air
    }

    pub fn mu(&self, c: f64) -> f64 {
        (1.0 - c) * self.mu_water + c * self.mu_air
    }
}

/// Solver configuration.
#[derive(Clone, Copy, Debug)]
pub struct FlowConfig {
    pub v_infinity: [f64; 2],
    /// Inflow air concentration; informational with a prescribed c field.
    pub c_infinity: f64,
    /// Waterline height; `None` selects single-phase mode (c = 0, all water).
    pub waterline: Option<f64>,
    /// Half-width of the air-water blending ramp; 0 gives a sharp interface.
    pub delta_c: f64,
    /// Velocity under-relaxation, in (0, 1].
    pub alpha_v: f64,
    /// Pressure under-relaxation, in (0, 1].
    pub alpha_p: f64,
    /// Convection blending: 0 = first-order upwind, 1 = central (deferred).
    pub beta_conv: f64,
    pub max_iterations: usize,
    /// Convergence tolerance for the normalized momentum and continuity
    /// residuals.
    pub tolerance: f64,
    /// Trailing window length for state averaging when the residual settles
    /// into an oscillation instead of converging.
    pub n_avg: usize,
    /// Keep the convective term; disabled gives the linear Stokes regime
    /// used by verification oracles.
    pub include_convection: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            v_infinity: [1.0, 0.0],
            c_infinity: 0.0,
            waterline: None,
            delta_c: 0.0,
            alpha_v: 0.7,
            alpha_p: 0.3,
            beta_conv: 1.0,
            max_iterations: 2000,
            tolerance: 1.0e-8,
            n_avg: 50,
            include_convection: true,
        }
    }
}

impl FlowConfig {
    // The negated comparison rejects a NaN tolerance as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), FlowError> {
        let a = |x: f64| x > 0.0 && x <= 1.0;
        if !a(self.alpha_v) || !a(self.alpha_p) {
            return Err(FlowError::InvalidConfig(
                "under-relaxation factors must lie in (0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.beta_conv) {
            return Err(FlowError::InvalidConfig(
                "convection blending must lie in [0, 1]".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(FlowError::InvalidConfig("tolerance must be positive".into()));
        }
        if self.delta_c < 0.0 {
            return Err(FlowError::InvalidConfig(
                "interface half-width must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn concentration(&self) -> Concentration {
        Concentration {
            waterline: self.waterline,
            delta: self.delta_c,
        }
    }
}

/// Prescribed vertical concentration profile.
#[derive(Clone, Copy, Debug)]
pub struct Concentration {
    pub waterline: Option<f64>,
    pub delta: f64,
}

impl Concentration {
    /// Air fraction at height y: 0 below the waterline, 1 above, linear ramp
    /// of half-width delta in between; identically 0 in single-phase mode.
    pub fn at(&self, y: f64) -> f64 {
        match self.waterline {
            None => 0.0,
            Some(z) => {
                if self.delta == 0.0 {
                    if y < z {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    ((y - z) / (2.0 * self.delta) + 0.5).clamp(0.0, 1.0)
                }
            }
        }
    }
}

/// Concentration field sampled at cell and boundary-face centroids.
pub fn prescribe_concentration<S: Scalar>(
    mesh: &Mesh<S>,
    waterline: Option<f64>,
    delta_c: f64,
) -> ScalarField<S> {
    let conc = Concentration {
        waterline,
        delta: delta_c,
    };
    ScalarField::from_fn(mesh, |x| num(conc.at(x.y.to_f64().unwrap())))
}

/// Converged primal flow state.
#[derive(Clone, Debug)]
pub struct PrimalState<S> {
    pub v: VectorField<S>,
    pub p: ScalarField<S>,
    pub c: ScalarField<S>,
    /// Volume flux U.A through every face, positive owner -> neighbor /
    /// outward. Momentum convection weights it by the face density; the
    /// pressure correction drives the per-cell net volume flux to zero.
    pub flux: Vec<S>,
    /// Normalized (momentum, continuity) residuals per outer iteration.
    pub residual_history: Vec<(f64, f64)>,
}

/// Velocity boundary treatment per boundary face: Dirichlet value or
/// zero-gradient outflow.
pub type VelocityBc<S> = Vec<Option<Vec2<S>>>;

/// Standard boundary table: v_infinity on the inlet, no-slip on walls and the
/// obstacle, outflow on the outlet.
pub fn standard_velocity_bc<S: Scalar>(mesh: &Mesh<S>, cfg: &FlowConfig) -> VelocityBc<S> {
    let vinf = Vec2::new(num(cfg.v_infinity[0]), num(cfg.v_infinity[1]));
    mesh.boundary_faces()
        .map(|fid| match mesh.faces[fid].patch.unwrap() {
            PatchKind::Inlet => Some(vinf),
            PatchKind::Wall | PatchKind::ObsD | PatchKind::ObsN => Some(Vec2::zero()),
            PatchKind::Outlet => None,
        })
        .collect()
}

/// Solve the steady flow problem with the standard boundary conditions.
pub fn solve_primal<S: Scalar>(
    mesh: &Mesh<S>,
    props: &FluidProps,
    cfg: &FlowConfig,
) -> Result<PrimalState<S>, FlowError> {
    let bc = standard_velocity_bc(mesh, cfg);
    solve_with_bcs(mesh, props, cfg, &bc)
}

/// Solve the standard problem seeded from a converged state on a mesh with
/// identical connectivity (e.g. a slightly deformed copy). Cuts re-solve
/// cost for small perturbations by an order of magnitude.
pub fn solve_primal_from<S: Scalar>(
    mesh: &Mesh<S>,
    props: &FluidProps,
    cfg: &FlowConfig,
    initial: &PrimalState<S>,
) -> Result<PrimalState<S>, FlowError> {
    props.validate()?;
    cfg.validate()?;
    let q = mesh.quality_check();
    if !q.valid {
        return Err(FlowError::InvalidMesh(format!(
            "negative cell volume {:?}",
            q.min_cell_volume.to_f64()
        )));
    }
    let bc = standard_velocity_bc(mesh, cfg);
    let mut solver = Simple::new(mesh, props, cfg, &bc);
    solver.seed(initial);
    solver.run()
}

/// Solve the steady flow problem with an explicit per-face velocity boundary
/// table (`None` marks outflow faces). Exposed so verification oracles can
/// drive the same discretization with non-standard Dirichlet data.
pub fn solve_with_bcs<S: Scalar>(
    mesh: &Mesh<S>,
    props: &FluidProps,
    cfg: &FlowConfig,
    vel_bc: &VelocityBc<S>,
) -> Result<PrimalState<S>, FlowError> {
    props.validate()?;
    cfg.validate()?;
    let q = mesh.quality_check();
    if !q.valid {
        return Err(FlowError::InvalidMesh(format!(
            "negative cell volume {:?}",
            q.min_cell_volume.to_f64()
        )));
    }
    if vel_bc.len() != mesh.n_boundary_faces() {
        return Err(FlowError::InvalidConfig(
            "velocity boundary table length mismatch".into(),
        ));
    }

    let mut solver = Simple::new(mesh, props, cfg, vel_bc);
    solver.run()
}

/// Workspace for one SIMPLE solve.
struct Simple<'m, S: Scalar> {
    mesh: &'m Mesh<S>,
    cfg: &'m FlowConfig,
    vel_bc: &'m VelocityBc<S>,
    ops: FaceOps<S>,
    grads: Gradients<S>,
    mat: CellMatrix<S>,
    pmat: CellMatrix<S>,
    /// Density and viscosity at faces (interior + boundary) and cells.
    rho_f: Vec<S>,
    mu_f: Vec<S>,
    /// Velocity BC kind table for gradient extrapolation.
    vbc_kind: Vec<FaceBc>,
    pbc_kind: Vec<FaceBc>,
    v: VectorField<S>,
    p: ScalarField<S>,
    c: ScalarField<S>,
    flux: Vec<S>,
    /// V_c / a_P with the relaxed diagonal, for Rhie-Chow and corrections.
    dcoef: Vec<S>,
    body: Vec2<S>,
    beta: S,
    history: Vec<(f64, f64)>,
    /// Trailing state window for oscillation averaging.
    window: std::collections::VecDeque<(Vec<Vec2<S>>, Vec<S>)>,
}

impl<'m, S: Scalar> Simple<'m, S> {
    fn new(
        mesh: &'m Mesh<S>,
        props: &FluidProps,
        cfg: &'m FlowConfig,
        vel_bc: &'m VelocityBc<S>,
    ) -> Self {
        let geom = mesh.geometry();
        let conc = cfg.concentration();
        let nf = mesh.n_faces();
        let mut rho_f = Vec::with_capacity(nf);
        let mut mu_f = Vec::with_capacity(nf);
        for fid in 0..nf {
            let y = geom.face_centroid[fid].y.to_f64().unwrap();
            let cv = conc.at(y);
            rho_f.push(num(props.rho(cv)));
            mu_f.push(num(props.mu(cv)));
        }
        let vbc_kind: Vec<FaceBc> = vel_bc
            .iter()
            .map(|b| match b {
                Some(_) => FaceBc::Fixed,
                None => FaceBc::Extrapolated,
            })
            .collect();
        // Pressure: fixed reference value on outflow faces, zero normal
        // gradient elsewhere.
        let pbc_kind: Vec<FaceBc> = vbc_kind
            .iter()
            .map(|k| match k {
                FaceBc::Fixed => FaceBc::Extrapolated,
                FaceBc::Extrapolated => FaceBc::Fixed,
            })
            .collect();

        // Initial state: free-stream velocity in the interior, boundary data
        // on Dirichlet faces, zero pressure.
        let vinf = Vec2::new(num(cfg.v_infinity[0]), num(cfg.v_infinity[1]));
        let mut v = VectorField::constant(mesh, vinf);
        for (b, bc) in vel_bc.iter().enumerate() {
            if let Some(val) = bc {
                v.bface[b] = *val;
            }
        }
        refresh_extrapolated_vec(mesh, &vbc_kind, &mut v);
        let p = ScalarField::zeros(mesh);
        let c = prescribe_concentration(mesh, cfg.waterline, cfg.delta_c);

        let ops = FaceOps::new(mesh);

        // Bootstrap volume fluxes by plain interpolation (Rhie-Chow needs
        // the momentum diagonal, which does not exist yet).
        let mut flux = vec![S::zero(); nf];
        for fid in 0..nf {
            let face = &mesh.faces[fid];
            let n = geom.face_normal[fid];
            let area = geom.face_area[fid];
            let vf = match face.neighbor {
                Some(nb) => v.cell[face.owner] * ops.w[fid] + v.cell[nb] * (S::one() - ops.w[fid]),
                None => v.bface[mesh.boundary_index(fid).unwrap()],
            };
            flux[fid] = vf.dot(n) * area;
        }

        Self {
            mesh,
            cfg,
            vel_bc,
            grads: Gradients::new(mesh),
            mat: CellMatrix::new(mesh),
            pmat: CellMatrix::new(mesh),
            ops,
            rho_f,
            mu_f,
            vbc_kind,
            pbc_kind,
            v,
            p,
            c,
            flux,
            dcoef: vec![S::zero(); mesh.n_cells()],
            body: Vec2::new(num(props.body_force[0]), num(props.body_force[1])),
            beta: num(cfg.beta_conv),
            history: Vec::new(),
            window: std::collections::VecDeque::new(),
        }
    }

    /// Replace the free-stream initial guess with a previously converged
    /// state. Cell values carry over verbatim (connectivity is shared);
    /// boundary values and fluxes are rebuilt for the current geometry.
    fn seed(&mut self, initial: &PrimalState<S>) {
        assert_eq!(initial.v.cell.len(), self.mesh.n_cells(), "seed state size");
        self.v.cell.clone_from(&initial.v.cell);
        self.p.cell.clone_from(&initial.p.cell);
        for (b, bc) in self.vel_bc.iter().enumerate() {
            if let Some(val) = bc {
                self.v.bface[b] = *val;
            }
        }
        refresh_extrapolated_vec(self.mesh, &self.vbc_kind, &mut self.v);
        refresh_extrapolated(self.mesh, &self.pbc_kind, &mut self.p);
        let geom = self.mesh.geometry();
        for fid in 0..self.mesh.n_faces() {
            let face = &self.mesh.faces[fid];
            let vf = match face.neighbor {
                Some(nb) => {
                    self.v.cell[face.owner] * self.ops.w[fid]
                        + self.v.cell[nb] * (S::one() - self.ops.w[fid])
                }
                None => self.v.bface[self.mesh.boundary_index(fid).unwrap()],
            };
            self.flux[fid] = vf.dot(geom.face_normal[fid]) * geom.face_area[fid];
        }
    }

    fn run(&mut self) -> Result<PrimalState<S>, FlowError> {
        let tol = self.cfg.tolerance;
        let mut mom_ref = f64::NAN;
        let mut cont_ref = f64::NAN;
        let nc = self.mesh.n_cells();
        let mut rhs_x = vec![S::zero(); nc];
        let mut rhs_y = vec![S::zero(); nc];

        for iter in 0..=self.cfg.max_iterations {
            let grad_v = self.grads.vector(self.mesh, &self.v)?;
            let grad_p = self.grads.scalar(self.mesh, &self.p)?;

            self.assemble_momentum(&grad_v, &grad_p, &mut rhs_x, &mut rhs_y);

            // Nonlinear residuals of the current iterate (before relaxation).
            let mom_abs = (self.mat.a.residual_l1(&comp_x(&self.v.cell), &rhs_x)
                + self.mat.a.residual_l1(&comp_y(&self.v.cell), &rhs_y))
            .to_f64()
            .unwrap();
            let cont_abs = self.continuity_imbalance_l1().to_f64().unwrap();
            // Roundoff floors: an exactly satisfied state (quiescent or
            // uniform flow) leaves residuals at machine level relative to
            // the assembled right-hand-side / flux magnitudes.
            let bscale: f64 = rhs_x
                .iter()
                .chain(rhs_y.iter())
                .map(|x| x.abs().to_f64().unwrap())
                .sum();
            let mscale: f64 = self.flux.iter().map(|x| x.abs().to_f64().unwrap()).sum();
            let mom_floor = 1e-12 * bscale + 1e-300;
            let cont_floor = 1e-12 * mscale + 1e-300;
            // Normalize by the worst residual of the early iterations (the
            // initial state may satisfy one equation exactly, so iteration
            // zero alone is not a usable scale).
            if iter == 0 {
                mom_ref = mom_abs.max(mom_floor);
                cont_ref = cont_abs.max(cont_floor);
            } else if iter < 5 {
                mom_ref = mom_ref.max(mom_abs);
                cont_ref = cont_ref.max(cont_abs);
            }
            let mom_res = mom_abs / mom_ref;
            let cont_res = cont_abs / cont_ref;
            self.history.push((mom_res, cont_res));
            debug!("primal iter {iter}: momentum {mom_res:.3e} continuity {cont_res:.3e}");

            if (mom_res <= tol && cont_res <= tol)
                || (mom_abs <= mom_floor && cont_abs <= cont_floor)
            {
                return Ok(self.finish());
            }
            if iter == self.cfg.max_iterations {
                return self.give_up(mom_res, cont_res);
            }

            // Inner tolerances track the outer residual: loose solves while
            // far away, proportionally tighter near convergence (a fixed
            // loose tolerance stalls the warm-started outer loop).
            let worst = mom_res.max(cont_res);
            let rtol_v = (0.05 * worst).clamp(1e-10, 1e-2);
            let rtol_p = (0.02 * worst).clamp(1e-11, 1e-3);

            self.relax_and_solve(&mut rhs_x, &mut rhs_y, rtol_v)?;
            self.rhie_chow_fluxes(&grad_p);
            self.pressure_correction(rtol_p)?;
            self.push_window();
        }
        unreachable!("loop exits via convergence or give_up");
    }

    /// Assemble the shared momentum matrix and per-component right-hand
    /// sides, unrelaxed.
    fn assemble_momentum(
        &mut self,
        grad_v: &[crate::scalar::Mat2<S>],
        grad_p: &[Vec2<S>],
        rhs_x: &mut [S],
        rhs_y: &mut [S],
    ) {
        let mesh = self.mesh;
        let geom = mesh.geometry();
        self.mat.a.set_all(S::zero());
        rhs_x.iter_mut().for_each(|x| *x = S::zero());
        rhs_y.iter_mut().for_each(|x| *x = S::zero());

        let mut diag = vec![S::zero(); mesh.n_cells()];

        for fid in 0..mesh.n_interior_faces() {
            let face = &mesh.faces[fid];
            let (pc, nb) = (face.owner, face.neighbor.unwrap());
            let (slot_pn, slot_np) = self.mat.slots[fid];
            let mu = self.mu_f[fid];
            let area = geom.face_area[fid];
            let n = geom.face_normal[fid];
            let w = self.ops.w[fid];

            if self.cfg.include_convection {
                let m = self.rho_f[fid] * self.flux[fid];
                let mp = m.max(S::zero());
                let mn = (-m).max(S::zero());
                diag[pc] += mp;
                diag[nb] += mn;
                self.mat.a.add_at(slot_pn, -mn);
                self.mat.a.add_at(slot_np, -mp);
                if self.beta > S::zero() {
                    // Deferred correction toward central differencing using
                    // the previous iterate.
                    let v_up = if m >= S::zero() {
                        self.v.cell[pc]
                    } else {
                        self.v.cell[nb]
                    };
                    let v_ce = self.v.cell[pc] * w + self.v.cell[nb] * (S::one() - w);
                    let corr = (v_ce - v_up) * (m * self.beta);
                    rhs_x[pc] -= corr.x;
                    rhs_y[pc] -= corr.y;
                    rhs_x[nb] += corr.x;
                    rhs_y[nb] += corr.y;
                }
            }

            let dc = mu * self.ops.oc[fid];
            diag[pc] += dc;
            diag[nb] += dc;
            self.mat.a.add_at(slot_pn, -dc);
            self.mat.a.add_at(slot_np, -dc);

            // Explicit nonorthogonal and transposed diffusion from the
            // face-interpolated previous gradient.
            let gf = grad_v[pc] * w + grad_v[nb] * (S::one() - w);
            let extra = gf.mul_vec(self.ops.t[fid]) + gf.transpose().mul_vec(n) * area;
            let flux = extra * mu;
            rhs_x[pc] += flux.x;
            rhs_y[pc] += flux.y;
            rhs_x[nb] -= flux.x;
            rhs_y[nb] -= flux.y;
        }

        for fid in mesh.boundary_faces() {
            let face = &mesh.faces[fid];
            let pc = face.owner;
            let b = mesh.boundary_index(fid).unwrap();
            let mu = self.mu_f[fid];
            let area = geom.face_area[fid];
            let n = geom.face_normal[fid];
            match self.vel_bc[b] {
                Some(vb) => {
                    if self.cfg.include_convection {
                        let m = self.rho_f[fid] * self.flux[fid];
                        let mp = m.max(S::zero());
                        let mn = (-m).max(S::zero());
                        diag[pc] += mp;
                        rhs_x[pc] += mn * vb.x;
                        rhs_y[pc] += mn * vb.y;
                    }
                    let dc = mu * self.ops.oc[fid];
                    diag[pc] += dc;
                    let gp = grad_v[pc];
                    let extra = gp.mul_vec(self.ops.t[fid]) + gp.transpose().mul_vec(n) * area;
                    let flux = extra * mu;
                    rhs_x[pc] += dc * vb.x + flux.x;
                    rhs_y[pc] += dc * vb.y + flux.y;
                }
                None => {
                    if self.cfg.include_convection {
                        // Outflow: upwind value is the owner cell; an
                        // adverse (re-entering) flux is treated explicitly
                        // to keep the diagonal positive.
                        let m = self.rho_f[fid] * self.flux[fid];
                        if m >= S::zero() {
                            diag[pc] += m;
                        } else {
                            rhs_x[pc] -= m * self.v.cell[pc].x;
                            rhs_y[pc] -= m * self.v.cell[pc].y;
                        }
                    }
                    // Zero-gradient velocity: no diffusive flux; the normal
                    // traction balance is carried by the fixed outlet
                    // pressure.
                }
            }
        }

        for cell in 0..mesh.n_cells() {
            let vol = geom.cell_volume[cell];
            rhs_x[cell] += vol * (self.body.x - grad_p[cell].x);
            rhs_y[cell] += vol * (self.body.y - grad_p[cell].y);
            let slot = self.mat.a.slot(cell, cell);
            self.mat.a.add_at(slot, diag[cell]);
        }
    }

    /// L1 norm of the per-cell net mass flux.
    fn continuity_imbalance_l1(&self) -> S {
        let mut imb = vec![S::zero(); self.mesh.n_cells()];
        for (fid, face) in self.mesh.faces.iter().enumerate() {
            imb[face.owner] += self.flux[fid];
            if let Some(nb) = face.neighbor {
                imb[nb] -= self.flux[fid];
            }
        }
        imb.iter().map(|x| x.abs()).sum()
    }

    fn relax_and_solve(
        &mut self,
        rhs_x: &mut [S],
        rhs_y: &mut [S],
        rtol: f64,
    ) -> Result<(), FlowError> {
        let alpha = num::<S>(self.cfg.alpha_v);
        let geom = self.mesh.geometry();
        for cell in 0..self.mesh.n_cells() {
            let slot = self.mat.a.slot(cell, cell);
            let ap = self.mat.a.val(slot);
            let relaxed = ap / alpha;
            self.mat.a.set_at(slot, relaxed);
            let carry = relaxed - ap;
            rhs_x[cell] += carry * self.v.cell[cell].x;
            rhs_y[cell] += carry * self.v.cell[cell].y;
            self.dcoef[cell] = geom.cell_volume[cell] / relaxed;
        }
        let mut vx = comp_x(&self.v.cell);
        let mut vy = comp_y(&self.v.cell);
        bicgstab(&self.mat.a, rhs_x, &mut vx, num::<S>(rtol), 400).map_err(map_linear("momentum"))?;
        bicgstab(&self.mat.a, rhs_y, &mut vy, num::<S>(rtol), 400).map_err(map_linear("momentum"))?;
        for (cell, val) in self.v.cell.iter_mut().enumerate() {
            *val = Vec2::new(vx[cell], vy[cell]);
        }
        refresh_extrapolated_vec(self.mesh, &self.vbc_kind, &mut self.v);
        Ok(())
    }

    /// Momentum-weighted face fluxes: linear interpolation plus a pressure
    /// smoothing term that couples adjacent pressures directly.
    fn rhie_chow_fluxes(&mut self, grad_p: &[Vec2<S>]) {
        let mesh = self.mesh;
        let geom = mesh.geometry();
        for fid in 0..mesh.n_faces() {
            let face = &mesh.faces[fid];
            let pc = face.owner;
            let n = geom.face_normal[fid];
            let area = geom.face_area[fid];
            match face.neighbor {
                Some(nb) => {
                    let w = self.ops.w[fid];
                    let vf = self.v.cell[pc] * w + self.v.cell[nb] * (S::one() - w);
                    let df = self.dcoef[pc] * w + self.dcoef[nb] * (S::one() - w);
                    let gpf = grad_p[pc] * w + grad_p[nb] * (S::one() - w);
                    let jump = (self.p.cell[nb] - self.p.cell[pc]) * self.ops.oc[fid];
                    self.flux[fid] = vf.dot(n) * area - df * (jump - gpf.dot(n) * area);
                }
                None => {
                    let b = mesh.boundary_index(fid).unwrap();
                    match self.vel_bc[b] {
                        Some(vb) => {
                            self.flux[fid] = vb.dot(n) * area;
                        }
                        None => {
                            // Outflow: owner velocity with the fixed
                            // reference pressure in the smoothing term.
                            let df = self.dcoef[pc];
                            let jump = (S::zero() - self.p.cell[pc]) * self.ops.oc[fid];
                            let gpf = grad_p[pc];
                            self.flux[fid] = self.v.cell[pc].dot(n) * area
                                - df * (jump - gpf.dot(n) * area);
                        }
                    }
                }
            }
        }
    }

    fn pressure_correction(&mut self, rtol: f64) -> Result<(), FlowError> {
        let mesh = self.mesh;
        let nc = mesh.n_cells();
        self.pmat.a.set_all(S::zero());
        let mut rhs = vec![S::zero(); nc];
        let mut diag = vec![S::zero(); nc];

        // Face conductances of the correction equation.
        let mut aface = vec![S::zero(); mesh.n_faces()];
        for fid in 0..mesh.n_interior_faces() {
            let face = &mesh.faces[fid];
            let (pc, nb) = (face.owner, face.neighbor.unwrap());
            let w = self.ops.w[fid];
            let df = self.dcoef[pc] * w + self.dcoef[nb] * (S::one() - w);
            let af = df * self.ops.oc[fid];
            aface[fid] = af;
            diag[pc] += af;
            diag[nb] += af;
            let (slot_pn, slot_np) = self.pmat.slots[fid];
            self.pmat.a.add_at(slot_pn, -af);
            self.pmat.a.add_at(slot_np, -af);
        }
        for fid in mesh.boundary_faces() {
            let face = &mesh.faces[fid];
            let b = mesh.boundary_index(fid).unwrap();
            if self.vel_bc[b].is_none() {
                // Fixed-pressure outflow: correction vanishes on the face.
                let af = self.dcoef[face.owner] * self.ops.oc[fid];
                aface[fid] = af;
                diag[face.owner] += af;
            }
        }
        for (fid, face) in mesh.faces.iter().enumerate() {
            rhs[face.owner] -= self.flux[fid];
            if let Some(nb) = face.neighbor {
                rhs[nb] += self.flux[fid];
            }
        }
        for cell in 0..nc {
            let slot = self.pmat.a.slot(cell, cell);
            // Cells not touching any outflow face on a mesh without an
            // outlet would make the system singular; the guard is a no-op on
            // well-posed cases.
            let d = if diag[cell] > S::zero() {
                diag[cell]
            } else {
                S::one()
            };
            self.pmat.a.set_at(slot, d);
        }

        let mut pc = vec![S::zero(); nc];
        cg(&self.pmat.a, &rhs, &mut pc, num::<S>(rtol), 2000).map_err(map_linear("pressure-correction"))?;

        // Flux, pressure and velocity corrections.
        for fid in 0..mesh.n_interior_faces() {
            let face = &mesh.faces[fid];
            self.flux[fid] -= aface[fid] * (pc[face.neighbor.unwrap()] - pc[face.owner]);
        }
        for fid in mesh.boundary_faces() {
            let b = mesh.boundary_index(fid).unwrap();
            if self.vel_bc[b].is_none() {
                self.flux[fid] += aface[fid] * pc[mesh.faces[fid].owner];
            }
        }
        let alpha_p = num::<S>(self.cfg.alpha_p);
        for cell in 0..nc {
            self.p.cell[cell] += alpha_p * pc[cell];
        }
        refresh_extrapolated(mesh, &self.pbc_kind, &mut self.p);

        // Velocity correction from the correction-pressure gradient.
        let pc_field = ScalarField {
            cell: pc,
            bface: vec![S::zero(); mesh.n_boundary_faces()],
        };
        let mut pc_field = pc_field;
        refresh_extrapolated(mesh, &self.pbc_kind, &mut pc_field);
        let grad_pc = self.grads.scalar(mesh, &pc_field)?;
        for cell in 0..nc {
            self.v.cell[cell] -= grad_pc[cell] * self.dcoef[cell];
        }
        refresh_extrapolated_vec(mesh, &self.vbc_kind, &mut self.v);
        Ok(())
    }

    fn push_window(&mut self) {
        if self.cfg.n_avg == 0 {
            return;
        }
        if self.window.len() == self.cfg.n_avg {
            self.window.pop_front();
        }
        self.window
            .push_back((self.v.cell.clone(), self.p.cell.clone()));
    }

    fn finish(&mut self) -> PrimalState<S> {
        PrimalState {
            v: self.v.clone(),
            p: self.p.clone(),
            c: self.c.clone(),
            flux: self.flux.clone(),
            residual_history: self.history.clone(),
        }
    }

    /// Terminal handling at the iteration cap: a residual that oscillates
    /// around a level close to the tolerance is treated as a marginally
    /// unsteady solve and resolved by averaging the trailing states;
    /// anything else is a hard failure.
    fn give_up(&mut self, mom_res: f64, cont_res: f64) -> Result<PrimalState<S>, FlowError> {
        let worst = mom_res.max(cont_res);
        let oscillating = self.window.len() >= 8 && {
            let tail: Vec<f64> = self
                .history
                .iter()
                .rev()
                .take(self.window.len())
                .map(|r| r.0)
                .collect();
            let mut flips = 0;
            for k in 1..tail.len().saturating_sub(1) {
                if (tail[k] - tail[k + 1]) * (tail[k - 1] - tail[k]) < 0.0 {
                    flips += 1;
                }
            }
            flips * 4 >= tail.len()
        };
        if oscillating && worst <= 100.0 * self.cfg.tolerance {
            warn!(
                "residual oscillates near tolerance ({worst:.3e}); \
                 returning the {}-iteration state average",
                self.window.len()
            );
            let count = num::<S>(self.window.len() as f64);
            let mut v_avg = vec![Vec2::<S>::zero(); self.mesh.n_cells()];
            let mut p_avg = vec![S::zero(); self.mesh.n_cells()];
            for (vs, ps) in &self.window {
                for i in 0..v_avg.len() {
                    v_avg[i] += vs[i];
                    p_avg[i] += ps[i];
                }
            }
            for i in 0..v_avg.len() {
                self.v.cell[i] = v_avg[i] / count;
                self.p.cell[i] = p_avg[i] / count;
            }
            refresh_extrapolated_vec(self.mesh, &self.vbc_kind, &mut self.v);
            refresh_extrapolated(self.mesh, &self.pbc_kind, &mut self.p);
            return Ok(self.finish());
        }
        Err(FlowError::NotConverged {
            iters: self.cfg.max_iterations,
            momentum: mom_res,
            continuity: cont_res,
            tolerance: self.cfg.tolerance,
        })
    }
}

fn comp_x<S: Scalar>(v: &[Vec2<S>]) -> Vec<S> {
    v.iter().map(|x| x.x).collect()
}

fn comp_y<S: Scalar>(v: &[Vec2<S>]) -> Vec<S> {
    v.iter().map(|x| x.y).collect()
}

fn map_linear(context: &'static str) -> impl Fn(crate::error::LinalgError) -> FlowError {
    move |e| {
        warn!("{context} linear solve failed: {e}");
        FlowError::Linear(e)
    }
}

/// Force exerted through the obstacle boundary, integrated with the
/// flow-domain outward normal: F = sum over obstacle faces of
/// [mu (grad v + grad v^T) n - p n] A with one-sided gradients.
/// The drag is -F . e1.
pub fn compute_force<S: Scalar>(
    state: &PrimalState<S>,
    props: &FluidProps,
    mesh: &Mesh<S>,
) -> Result<Vec2<S>, FlowError> {
    let geom = mesh.geometry();
    let grads = Gradients::new(mesh);
    let grad_v = grads.vector(mesh, &state.v)?;
    let mut force = Vec2::zero();
    for &fid in &mesh.obstacle_faces() {
        let face = &mesh.faces[fid];
        let b = mesh.boundary_index(fid).unwrap();
        let n = geom.face_normal[fid];
        let area = geom.face_area[fid];
        let mu = num::<S>(props.mu(state.c.bface[b].to_f64().unwrap()));
        let tau = grad_v[face.owner].sym_twice();
        force += (tau.mul_vec(n) * mu - n * state.p.bface[b]) * area;
    }
    Ok(force)
}

/// Drag: the objective value implied by the surface force.
pub fn drag<S: Scalar>(force: Vec2<S>) -> S {
    -force.x
}

/// Discrete harmonic extension of the obstacle marker: solves a vector
/// Laplace problem with eta = -e1 on the obstacle and 0 on the outer
/// boundary. The two-point flux discretization keeps an M-matrix, so the
/// interior values obey the discrete maximum principle componentwise.
pub fn build_extension_eta<S: Scalar>(mesh: &Mesh<S>) -> Result<VectorField<S>, FlowError> {
    let ops = FaceOps::new(mesh);
    let mut mat = CellMatrix::new(mesh);
    let nc = mesh.n_cells();
    let mut diag = vec![S::zero(); nc];
    let mut rhs_x = vec![S::zero(); nc];
    let mut rhs_y = vec![S::zero(); nc];
    for fid in 0..mesh.n_interior_faces() {
        let face = &mesh.faces[fid];
        let (pc, nb) = (face.owner, face.neighbor.unwrap());
        let oc = ops.oc[fid];
        diag[pc] += oc;
        diag[nb] += oc;
        let (slot_pn, slot_np) = mat.slots[fid];
        mat.a.add_at(slot_pn, -oc);
        mat.a.add_at(slot_np, -oc);
    }
    let mut eta = VectorField::zeros(mesh);
    for fid in mesh.boundary_faces() {
        let face = &mesh.faces[fid];
        let b = mesh.boundary_index(fid).unwrap();
        let oc = ops.oc[fid];
        let value = if face.patch.unwrap().is_obstacle() {
            Vec2::new(-S::one(), S::zero())
        } else {
            Vec2::zero()
        };
        eta.bface[b] = value;
        diag[face.owner] += oc;
        rhs_x[face.owner] += oc * value.x;
        rhs_y[face.owner] += oc * value.y;
    }
    for cell in 0..nc {
        let slot = mat.a.slot(cell, cell);
        mat.a.set_at(slot, diag[cell]);
    }
    let mut ex = vec![S::zero(); nc];
    let mut ey = vec![S::zero(); nc];
    cg(&mat.a, &rhs_x, &mut ex, num::<S>(1e-12), 4000).map_err(map_linear("extension"))?;
    cg(&mat.a, &rhs_y, &mut ey, num::<S>(1e-12), 4000).map_err(map_linear("extension"))?;
    for cell in 0..nc {
        eta.cell[cell] = Vec2::new(ex[cell], ey[cell]);
    }
    Ok(eta)
}

/// Volume form of the drag objective:
/// J = sum_cells V [ (rho (v . grad) v - f) . eta
///                 + mu (grad v + grad v^T) : grad eta - p div eta ].
/// Equals the surface drag -F . e1 up to discretization error.
pub fn compute_objective<S: Scalar>(
    state: &PrimalState<S>,
    eta: &VectorField<S>,
    props: &FluidProps,
    mesh: &Mesh<S>,
) -> Result<S, FlowError> {
    let geom = mesh.geometry();
    let grads = Gradients::new(mesh);
    let grad_v = grads.vector(mesh, &state.v)?;
    let grad_eta = grads.vector(mesh, eta)?;
    let body = Vec2::new(num::<S>(props.body_force[0]), num::<S>(props.body_force[1]));
    let mut j = S::zero();
    for cell in 0..mesh.n_cells() {
        let vol = geom.cell_volume[cell];
        let cval = state.c.cell[cell].to_f64().unwrap();
        let rho = num::<S>(props.rho(cval));
        let mu = num::<S>(props.mu(cval));
        let v = state.v.cell[cell];
        let conv = grad_v[cell].mul_vec(v) * rho - body;
        let visc = grad_v[cell].sym_twice().ddot(&grad_eta[cell]) * mu;
        let pres = state.p.cell[cell] * grad_eta[cell].trace();
        j += vol * (conv.dot(eta.cell[cell]) + visc - pres);
    }
    Ok(j)
}

/// Residual history as CSV: iteration, momentum_res, continuity_res.
pub fn write_residual_csv(path: &Path, history: &[(f64, f64)]) -> io::Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("iteration,momentum_res,continuity_res\n");
    for (i, (m, c)) in history.iter().enumerate() {
        let _ = writeln!(out, "{i},{m:e},{c:e}");
    }
    std::fs::write(path, out)
}
