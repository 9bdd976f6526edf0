//! Outer shape-optimization loop.
//!
//! Each iteration solves the flow, solves the adjoint about it (seeded from
//! the previous iteration's adjoint), assembles the boundary sensitivity with
//! the multipliers carried over from the last descent solve, computes a
//! descent direction by the p-continued Picard iteration, and moves the mesh
//! by a backtracked step that never increases the objective, never violates
//! the scaled constraint tolerance, and never commits an invalid mesh.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use log::{info, warn};

use crate::adjoint::{solve_adjoint, solve_adjoint_from, AdjointState};
use crate::constraints::{evaluate_constraints, ConstraintState, N_CONSTRAINTS};
use crate::descent::{solve_descent, DescentConfig};
use crate::error::{FlowError, OptimError};
use crate::field::VectorField;
use crate::flow::{
    build_extension_eta, compute_force, compute_objective, drag, solve_primal, solve_primal_from,
    FlowConfig, FluidProps, PrimalState,
};
use crate::mesh::{Mesh, PatchKind, QualityReport};
use crate::scalar::{num, Scalar, Vec2};
use crate::shape_gradient::{assemble_sensitivity, write_sensitivity_profile, SensitivityForm};
use crate::vtk::write_cell_fields;

/// Which part of the obstacle boundary is allowed to move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeformationMode {
    /// The whole obstacle boundary deforms.
    FullHull,
    /// Only faces with midpoint below the configured waterline deform; the
    /// rest is pinned for the entire run.
    UnderwaterOnly,
}

impl DeformationMode {
    pub fn parse(tok: &str) -> Option<Self> {
        match tok {
            "full_hull" => Some(Self::FullHull),
            "underwater_only" => Some(Self::UnderwaterOnly),
            _ => None,
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            Self::FullHull => "full_hull",
            Self::UnderwaterOnly => "underwater_only",
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    /// Cap on the number of accepted design updates.
    pub max_outer_iterations: usize,
    pub deformation_mode: DeformationMode,
    /// Split height for [`DeformationMode::UnderwaterOnly`]; ignored in
    /// full-hull mode.
    pub waterline: f64,
    /// Largest vertex displacement of the initial trial step, as a fraction
    /// of the smallest edge incident to that vertex.
    pub alpha_step: f64,
    /// Step shrink factor on rejection, in (0, 1).
    pub backtrack_factor: f64,
    /// Rejections tolerated per iteration before giving up on the direction.
    pub max_backtracks: usize,
    /// Acceptance bound on |g_i| / scale_i. The scales are the initial
    /// wetted volume for the volume component and wetted volume times the
    /// domain diameter for the barycentric components.
    pub tol_g: f64,
    /// Trailing window length for the smoothed objective column.
    pub n_avg: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 50,
            deformation_mode: DeformationMode::FullHull,
            waterline: 0.0,
            alpha_step: 0.2,
            backtrack_factor: 0.5,
            max_backtracks: 20,
            tol_g: 1.0e-3,
            n_avg: 5,
        }
    }
}

impl OptimizerConfig {
    // `!(x > 0)` rather than `x <= 0` so NaN input fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.into()));
        if self.max_outer_iterations == 0 {
            return bad("iteration cap must be at least 1");
        }
        if !(self.alpha_step > 0.0) {
            return bad("step fraction must be positive");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtracking factor must lie in (0, 1)");
        }
        if !(self.tol_g > 0.0) {
            return bad("constraint tolerance must be positive");
        }
        if self.n_avg == 0 {
            return bad("averaging window must be at least 1");
        }
        Ok(())
    }
}

/// Termination cause of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    /// Descent direction below threshold, or no step improves the objective.
    Converged,
    /// Accepted-iteration cap reached.
    MaxIter,
    /// Step search exhausted with every remaining trial mesh invalid.
    GridDeterioration,
    /// A flow, adjoint, or descent solve failed mid-run.
    SolverFailure,
}

impl Status {
    pub fn token(&self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxIter => "max_iter",
            Self::GridDeterioration => "grid_deterioration",
            Self::SolverFailure => "solver_failure",
        }
    }
}

/// State of the starting design, kept apart from the accepted records so the
/// drag evolution can be normalized by iteration zero.
#[derive(Clone, Copy, Debug)]
pub struct InitialRecord<S> {
    pub j: S,
    pub drag: S,
    pub min_cell_volume: S,
}

/// One accepted design update (or the terminal stationary iterate).
#[derive(Clone, Copy, Debug)]
pub struct IterationRecord<S> {
    /// Volume-form objective on the accepted mesh.
    pub j: S,
    /// Surface drag on the accepted mesh.
    pub drag: S,
    /// Constraint deviations on the accepted mesh.
    pub g: [S; N_CONSTRAINTS],
    /// Multipliers returned by the descent solve that produced the step.
    pub lambda: [S; N_CONSTRAINTS],
    /// Accepted step size (zero for the terminal stationary record).
    pub eps: S,
    pub min_cell_volume: S,
    /// Picard iterations spent by the descent solve.
    pub picard_iterations: usize,
    /// Discrete L2 norm of the descent direction.
    pub v_norm: S,
    /// Rejected trials before this step was accepted.
    pub backtracks: usize,
    /// Trailing mean of the objective over the averaging window.
    pub j_avg: S,
}

#[derive(Clone, Debug)]
pub struct OptimizationHistory<S> {
    pub initial: InitialRecord<S>,
    pub records: Vec<IterationRecord<S>>,
    pub status: Status,
    /// Quality of the last rejected trial mesh when the run ended in
    /// [`Status::GridDeterioration`].
    pub failed_quality: Option<QualityReport<S>>,
}

/// Discrete L2 norm of a vertex field, weighted by the lumped vertex mass.
pub fn vertex_l2_norm<S: Scalar>(mesh: &Mesh<S>, v: &[Vec2<S>]) -> S {
    assert_eq!(v.len(), mesh.n_vertices(), "vertex field length");
    let geom = mesh.geometry();
    let third = S::one() / num::<S>(3.0);
    let mut mass = vec![S::zero(); mesh.n_vertices()];
    for (i, cell) in mesh.cells.iter().enumerate() {
        let w = geom.cell_volume[i] * third;
        for &vtx in cell {
            mass[vtx] += w;
        }
    }
    let mut acc = S::zero();
    for (m, d) in mass.iter().zip(v) {
        acc += *m * d.dot(*d);
    }
    acc.sqrt()
}

/// Retag the obstacle boundary for the requested deformation mode; the rest
/// of the mesh is shared. Done once up front -- the split is geometric and the
/// concentration field it mirrors is static.
pub fn tag_deformable<S: Scalar>(mesh: &Mesh<S>, cfg: &OptimizerConfig) -> Mesh<S> {
    let mut out = mesh.clone();
    let wl = num::<S>(cfg.waterline);
    let centroids: Vec<Vec2<S>> = out.geometry().face_centroid.clone();
    for (fid, face) in out.faces.iter_mut().enumerate() {
        let tag = match face.patch {
            Some(PatchKind::ObsN) | Some(PatchKind::ObsD) => match cfg.deformation_mode {
                DeformationMode::FullHull => PatchKind::ObsN,
                DeformationMode::UnderwaterOnly => {
                    if centroids[fid].y < wl {
                        PatchKind::ObsN
                    } else {
                        PatchKind::ObsD
                    }
                }
            },
            _ => continue,
        };
        face.patch = Some(tag);
    }
    out
}

fn constraint_scales<S: Scalar>(reference: &[S; N_CONSTRAINTS], diameter: S) -> [S; N_CONSTRAINTS] {
    let vol = reference[N_CONSTRAINTS - 1].abs().max(num(1e-300));
    [vol * diameter, vol * diameter, vol]
}

/// Everything the accepted trial already computed, handed back to the outer
/// loop so nothing is solved twice.
struct AcceptedStep<S: Scalar> {
    eps: S,
    mesh: Mesh<S>,
    state: PrimalState<S>,
    eta: VectorField<S>,
    j: S,
    drag: S,
    g: [S; N_CONSTRAINTS],
    quality: QualityReport<S>,
    backtracks: usize,
}

enum TrialFailure<S> {
    /// Trial mesh failed the quality check.
    Invalid(QualityReport<S>),
    /// Valid mesh, but the objective rose or a constraint left tolerance.
    Rejected,
    /// Valid mesh, but the re-solve failed.
    Solver(FlowError),
}

enum StepOutcome<S: Scalar> {
    Accepted(Box<AcceptedStep<S>>),
    Exhausted(TrialFailure<S>),
}

/// Initial step size: the largest eps with every vertex displacement at most
/// `alpha_step` times its smallest incident edge.
fn initial_step<S: Scalar>(mesh: &Mesh<S>, v: &[Vec2<S>], alpha_step: f64) -> S {
    let h = mesh.vertex_min_edge();
    let mut eps = S::infinity();
    for (i, d) in v.iter().enumerate() {
        let n = d.norm();
        if n > S::zero() {
            eps = eps.min(num::<S>(alpha_step) * h[i] / n);
        }
    }
    eps
}

// `!(eps > 0)` rather than `eps <= 0` so a NaN direction is caught too.
#[allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]
fn find_step<S: Scalar>(
    mesh: &Mesh<S>,
    state: &PrimalState<S>,
    props: &FluidProps,
    flow_cfg: &FlowConfig,
    v: &[Vec2<S>],
    j_current: S,
    drag_current: S,
    reference: &[S; N_CONSTRAINTS],
    scales: &[S; N_CONSTRAINTS],
    cfg: &OptimizerConfig,
) -> Result<StepOutcome<S>, OptimError> {
    let mut eps = initial_step(mesh, v, cfg.alpha_step);
    if !(eps > S::zero()) || !eps.is_finite() {
        return Ok(StepOutcome::Exhausted(TrialFailure::Rejected));
    }
    let shrink = num::<S>(cfg.backtrack_factor);
    let mut last = TrialFailure::Rejected;
    for trial_idx in 0..=cfg.max_backtracks {
        let trial = mesh.apply_deformation(v, eps);
        let quality = trial.quality_check();
        if !quality.valid {
            info!(
                "step {:e} rejected: min cell volume {:e}",
                eps.to_f64().unwrap_or(f64::NAN),
                quality.min_cell_volume.to_f64().unwrap_or(f64::NAN)
            );
            last = TrialFailure::Invalid(quality);
            eps *= shrink;
            continue;
        }
        let trial_state = match solve_primal_from(&trial, props, flow_cfg, state) {
            Ok(s) => s,
            Err(e) => {
                warn!("step {:e} re-solve failed: {e}", eps.to_f64().unwrap_or(f64::NAN));
                last = TrialFailure::Solver(e);
                eps *= shrink;
                continue;
            }
        };
        let g = evaluate_constraints(&trial, &trial_state.c, reference);
        let g_ok = (0..N_CONSTRAINTS).all(|i| g[i].abs() <= num::<S>(cfg.tol_g) * scales[i]);
        let eta = build_extension_eta(&trial)?;
        let j = compute_objective(&trial_state, &eta, props, &trial)?;
        let d = drag(compute_force(&trial_state, props, &trial)?);
        if g_ok && j <= j_current && d <= drag_current {
            return Ok(StepOutcome::Accepted(Box::new(AcceptedStep {
                eps,
                mesh: trial,
                state: trial_state,
                eta,
                j,
                drag: d,
                g,
                quality,
                backtracks: trial_idx,
            })));
        }
        info!(
            "step {:e} rejected: J {:e} (from {:e}), drag {:e} (from {:e}), g ok {}",
            eps.to_f64().unwrap_or(f64::NAN),
            j.to_f64().unwrap_or(f64::NAN),
            j_current.to_f64().unwrap_or(f64::NAN),
            d.to_f64().unwrap_or(f64::NAN),
            drag_current.to_f64().unwrap_or(f64::NAN),
            g_ok
        );
        last = TrialFailure::Rejected;
        eps *= shrink;
    }
    Ok(StepOutcome::Exhausted(last))
}

fn snapshot<S: Scalar>(
    dir: &Path,
    index: usize,
    mesh: &Mesh<S>,
    state: &PrimalState<S>,
    direction: Option<(&[Vec2<S>], &SensitivityForm<S>)>,
) -> io::Result<()> {
    let cell_avg: Vec<Vec2<S>>;
    let mut vectors: Vec<(&str, &[Vec2<S>])> = vec![("v", &state.v.cell)];
    if let Some((v, _)) = direction {
        let third = S::one() / num::<S>(3.0);
        cell_avg = mesh
            .cells
            .iter()
            .map(|c| (v[c[0]] + v[c[1]] + v[c[2]]) * third)
            .collect();
        vectors.push(("V", &cell_avg));
    }
    write_cell_fields(
        &dir.join(format!("shape_{index:04}.vtk")),
        mesh,
        &[("p", &state.p.cell), ("c", &state.c.cell)],
        &vectors,
    )?;
    if let Some((_, form)) = direction {
        write_sensitivity_profile(&dir.join(format!("sensitivity_{index:04}.vtk")), mesh, form)?;
    }
    Ok(())
}

/// Drive the full loop from an initial design. Returns the history and the
/// final mesh; solver breakdowns after a successful start are reported
/// through [`Status::SolverFailure`] rather than an error so the partial
/// history survives.
pub fn run_optimization<S: Scalar>(
    mesh0: &Mesh<S>,
    props: &FluidProps,
    flow_cfg: &FlowConfig,
    descent_cfg: &DescentConfig,
    opt_cfg: &OptimizerConfig,
    snapshot_dir: Option<&Path>,
) -> Result<(OptimizationHistory<S>, Mesh<S>), OptimError> {
    opt_cfg.validate()?;
    descent_cfg.validate()?;
    let mut mesh = tag_deformable(mesh0, opt_cfg);
    let q0 = mesh.quality_check();
    if !q0.valid {
        return Err(OptimError::InvalidInitialMesh {
            min_cell_volume: q0.min_cell_volume.to_f64().unwrap_or(f64::NAN),
        });
    }

    let mut state = solve_primal(&mesh, props, flow_cfg)?;
    let mut constraints = ConstraintState::capture(&mesh, &state.c);
    let diameter = mesh.domain_diameter();
    let scales = constraint_scales(&constraints.reference, diameter);
    let mut eta = build_extension_eta(&mesh)?;
    let mut j = compute_objective(&state, &eta, props, &mesh)?;
    let mut drag_now = drag(compute_force(&state, props, &mesh)?);
    let v_stop = num::<S>(1e-8) * diameter;

    let initial = InitialRecord {
        j,
        drag: drag_now,
        min_cell_volume: q0.min_cell_volume,
    };
    let mut records: Vec<IterationRecord<S>> = Vec::new();
    let mut failed_quality = None;
    let mut lambda = [S::zero(); N_CONSTRAINTS];
    let mut adjoint: Option<AdjointState<S>> = None;

    if let Some(dir) = snapshot_dir {
        snapshot(dir, 0, &mesh, &state, None).map_err(OptimError::Io)?;
    }

    let j_avg = |records: &[IterationRecord<S>], j_new: S| {
        let n = opt_cfg.n_avg.min(records.len() + 1);
        let tail: S = records.iter().rev().take(n - 1).map(|r| r.j).sum();
        (tail + j_new) / num::<S>(n as f64)
    };

    let status = loop {
        if records.len() >= opt_cfg.max_outer_iterations {
            break Status::MaxIter;
        }

        let adj = match &adjoint {
            None => solve_adjoint(&state, &eta, props, &mesh, flow_cfg),
            Some(prev) => solve_adjoint_from(&state, &eta, props, &mesh, flow_cfg, prev),
        };
        let adj = match adj {
            Ok(a) => a,
            Err(e) => {
                warn!("adjoint solve failed at iteration {}: {e}", records.len());
                break Status::SolverFailure;
            }
        };

        constraints.update(&mesh, &state.c);
        let form = match assemble_sensitivity(
            &state,
            &adj,
            &mesh,
            &state.c,
            lambda,
            num(descent_cfg.tau),
            constraints.g,
            props,
        ) {
            Ok(f) => f,
            Err(e) => {
                warn!("sensitivity assembly failed at iteration {}: {e}", records.len());
                break Status::SolverFailure;
            }
        };
        let descent = match solve_descent(&form, &mesh, descent_cfg) {
            Ok(d) => d,
            Err(e) => {
                warn!("descent solve failed at iteration {}: {e}", records.len());
                break Status::SolverFailure;
            }
        };
        if !descent.converged {
            warn!(
                "descent iteration cap hit at iteration {}; aborting",
                records.len()
            );
            break Status::SolverFailure;
        }
        lambda = descent.lambda;
        let picard_iterations = descent.residual_history.len();
        let v_norm = vertex_l2_norm(&mesh, &descent.v);

        if v_norm <= v_stop {
            let quality = mesh.quality_check();
            records.push(IterationRecord {
                j,
                drag: drag_now,
                g: constraints.g,
                lambda,
                eps: S::zero(),
                min_cell_volume: quality.min_cell_volume,
                picard_iterations,
                v_norm,
                backtracks: 0,
                j_avg: j_avg(&records, j),
            });
            info!("descent direction norm {:e} below threshold; stationary", v_norm.to_f64().unwrap_or(f64::NAN));
            break Status::Converged;
        }

        let outcome = find_step(
            &mesh,
            &state,
            props,
            flow_cfg,
            &descent.v,
            j,
            drag_now,
            &constraints.reference,
            &scales,
            opt_cfg,
        )?;
        match outcome {
            StepOutcome::Accepted(step) => {
                let step = *step;
                records.push(IterationRecord {
                    j: step.j,
                    drag: step.drag,
                    g: step.g,
                    lambda,
                    eps: step.eps,
                    min_cell_volume: step.quality.min_cell_volume,
                    picard_iterations,
                    v_norm,
                    backtracks: step.backtracks,
                    j_avg: j_avg(&records, step.j),
                });
                info!(
                    "iteration {}: eps {:e}, J {:e}, drag {:e}",
                    records.len(),
                    step.eps.to_f64().unwrap_or(f64::NAN),
                    step.j.to_f64().unwrap_or(f64::NAN),
                    step.drag.to_f64().unwrap_or(f64::NAN)
                );
                if let Some(dir) = snapshot_dir {
                    snapshot(
                        dir,
                        records.len(),
                        &step.mesh,
                        &step.state,
                        Some((&descent.v, &form)),
                    )
                    .map_err(OptimError::Io)?;
                }
                mesh = step.mesh;
                state = step.state;
                eta = step.eta;
                j = step.j;
                drag_now = step.drag;
                adjoint = Some(adj);
            }
            StepOutcome::Exhausted(TrialFailure::Invalid(q)) => {
                failed_quality = Some(q);
                break Status::GridDeterioration;
            }
            StepOutcome::Exhausted(TrialFailure::Rejected) => {
                info!("no step along the direction improves the objective; stalled");
                break Status::Converged;
            }
            StepOutcome::Exhausted(TrialFailure::Solver(e)) => {
                warn!("step search exhausted on solver failures: {e}");
                break Status::SolverFailure;
            }
        }
    };

    let history = OptimizationHistory {
        initial,
        records,
        status,
        failed_quality,
    };
    Ok((history, mesh))
}

/// History CSV, one row per accepted record, preceded by an iteration-zero
/// row for the starting design.
pub fn write_history_csv<S: Scalar>(
    path: &Path,
    history: &OptimizationHistory<S>,
) -> io::Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "iter,J,drag,g_x,g_y,g_vol,lambda_x,lambda_y,lambda_vol,eps,min_cell_volume,picard_iterations,v_norm,backtracks,J_avg"
    );
    let f = |s: S| s.to_f64().unwrap_or(f64::NAN);
    let _ = writeln!(
        out,
        "0,{:e},{:e},0,0,0,0,0,0,0,{:e},0,0,0,{:e}",
        f(history.initial.j),
        f(history.initial.drag),
        f(history.initial.min_cell_volume),
        f(history.initial.j)
    );
    for (k, r) in history.records.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e},{},{:e}",
            k + 1,
            f(r.j),
            f(r.drag),
            f(r.g[0]),
            f(r.g[1]),
            f(r.g[2]),
            f(r.lambda[0]),
            f(r.lambda[1]),
            f(r.lambda[2]),
            f(r.eps),
            f(r.min_cell_volume),
            r.picard_iterations,
            f(r.v_norm),
            r.backtracks,
            f(r.j_avg)
        );
    }
    std::fs::write(path, out)
}
