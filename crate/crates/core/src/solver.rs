//! Riemannian Newton iteration on the configuration manifold.
//!
//! Each iteration solves a linearized system for `δq`, then retracts: poses
//! by `g ← g·exp(δζ)`, slopes and motor angles additively. Every accepted
//! iterate strictly decreases `‖r‖` (backtracking line search).
//!
//! Two methods are available:
//! - [`NewtonMethod::Frozen`] solves `K_t·δq = −r` with the frozen-Jacobian
//!   tangent, by Cholesky with a growing diagonal shift on failure. Robust,
//!   but only linearly convergent once section forces build geometric
//!   stiffness.
//! - [`NewtonMethod::Condensed`] (default) keeps every element's strain slope
//!   at its local equilibrium for the current node poses, and takes Newton
//!   steps on the poses with the Schur complement of the exact tangent.
//!   The step is first shortened so no node rotates by more than
//!   `max_rotation_step`; a trial that does not lower `‖r‖` gets one
//!   second-order correction with the same tangent. If both fail, the
//!   iteration backtracks along the frozen step, then along the condensed one.
//!
//! With [`ThetaMode::Prescribed`] the motor angles are parameters: their rows
//! and columns are dropped from `r` and `K_t` before solving.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::assembly::{
    assemble, base_embedding, platform_embedding, AssemblyError, GeneralizedState, LoadSet,
    RobotModel, TangentKind,
};
use crate::element::{element_residual, element_slope_tangent, recover_kinematics};
use crate::lie::{project_to_so3, Pose, Twist};

/// Local slope residual below which an element counts as condensed.
pub const SLOPE_TOLERANCE: f64 = 1e-15;

/// Newton iterations allowed per element when condensing slopes.
pub const SLOPE_MAX_ITERATIONS: usize = 25;

/// Orthogonality drift above which a rotation is projected back onto SO(3).
pub const REORTHONORMALIZE_DRIFT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ThetaMode {
    /// Motor angles are unknowns.
    Free,
    /// Motor angles are inputs.
    #[default]
    Prescribed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NewtonMethod {
    /// Frozen-Jacobian tangent on all unknowns.
    Frozen,
    /// Slopes condensed element by element; exact tangent on the rest.
    #[default]
    Condensed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Stop when the (reduced) residual norm falls below this.
    pub residual_tolerance: f64,
    pub max_iterations: usize,
    /// Step scale factor applied on each line-search rejection.
    pub backtrack_factor: f64,
    pub max_halvings: usize,
    /// First diagonal shift tried after a failed factorization.
    pub shift_start: f64,
    pub shift_growth: f64,
    pub max_shift_attempts: usize,
    pub theta_mode: ThetaMode,
    pub method: NewtonMethod,
    /// Largest node rotation increment (rad) a single step may take.
    pub max_rotation_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            residual_tolerance: 1e-9,
            max_iterations: 50,
            backtrack_factor: 0.5,
            max_halvings: 20,
            shift_start: 1e-8,
            shift_growth: 10.0,
            max_shift_attempts: 16,
            theta_mode: ThetaMode::Prescribed,
            method: NewtonMethod::Condensed,
            max_rotation_step: 0.05,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.residual_tolerance > 0.0) {
            return Err(SolveError::InvalidConfig("residual tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(SolveError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(SolveError::InvalidConfig("backtrack factor must lie in (0, 1)".into()));
        }
        if !(self.shift_start > 0.0 && self.shift_growth > 1.0) {
            return Err(SolveError::InvalidConfig("invalid shift schedule".into()));
        }
        if !(self.max_rotation_step > 0.0) {
            return Err(SolveError::InvalidConfig("max_rotation_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// Residual norm before the step.
    pub residual_norm: f64,
    /// Norm of the full Newton increment.
    pub step_norm: f64,
    /// Accepted fraction of the Newton increment.
    pub step_scale: f64,
    /// Diagonal shift needed to factor the tangent (0 if none).
    pub shift: f64,
    pub halvings: usize,
    /// Step taken on the condensed system rather than with the frozen tangent.
    pub condensed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    /// `‖r‖` at the initial state and after every accepted step.
    pub residual_history: Vec<f64>,
    pub final_state: GeneralizedState,
    pub diagnostics: Vec<IterationRecord>,
    pub internal_energy: f64,
    /// Whether the reduced tangent factors as positive definite at the final state.
    pub tangent_positive_definite: Option<bool>,
    /// Norm of the Newton step the final state would take next.
    pub predicted_step_norm: Option<f64>,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().expect("history is never empty")
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("tangent could not be factored even with diagonal shift {shift:e}")]
    SingularTangent { shift: f64 },
    #[error("no convergence after {} iterations (residual {:e})", .0.iterations, .0.final_residual())]
    NoConvergence(Box<SolveReport>),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonStep {
    pub delta: DVector<f64>,
    pub shift: f64,
}

fn try_solve(tangent: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let x = tangent.clone().cholesky()?.solve(rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Solves `K_t·δq = −r` for the symmetric frozen tangent by Cholesky,
/// shifting the diagonal by `μ = shift_start·growthⁱ` on failure.
pub fn newton_step(
    residual: &DVector<f64>,
    tangent: &DMatrix<f64>,
    config: &SolverConfig,
) -> Result<NewtonStep, SolveError> {
    assert_eq!(tangent.nrows(), residual.len());
    assert_eq!(tangent.ncols(), residual.len());
    let rhs = -residual;
    if let Some(delta) = try_solve(tangent, &rhs) {
        return Ok(NewtonStep { delta, shift: 0.0 });
    }
    let mut shift = config.shift_start;
    for _ in 0..config.max_shift_attempts {
        let mut shifted = tangent.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += shift;
        }
        if let Some(delta) = try_solve(&shifted, &rhs) {
            return Ok(NewtonStep { delta, shift });
        }
        shift *= config.shift_growth;
    }
    Err(SolveError::SingularTangent {
        shift: shift / config.shift_growth,
    })
}

/// Solves every element's slope equation `γ_β = 0` at fixed node poses.
///
/// Each element is an independent 6-dimensional Newton iteration with the
/// exact slope tangent. Elements whose iteration does not reach
/// [`SLOPE_TOLERANCE`] keep their best iterate.
pub fn condense_slopes(
    model: &RobotModel,
    q: &GeneralizedState,
) -> Result<GeneralizedState, AssemblyError> {
    q.check_shape(model)?;
    let mut out = q.clone();
    for (k, rod) in model.rods().iter().enumerate() {
        for e in 0..rod.element_count {
            let wrap = |source| AssemblyError::Element {
                rod: k,
                element: e,
                source,
            };
            for _ in 0..SLOPE_MAX_ITERATIONS {
                let state = out.element_state(model, k, e);
                let kin = recover_kinematics(&state).map_err(wrap)?;
                let gamma = element_residual(&state, &rod.material, &kin);
                let g_beta = gamma.fixed_rows::<6>(12).into_owned();
                if g_beta.norm() < SLOPE_TOLERANCE {
                    break;
                }
                let t = element_slope_tangent(&state, &rod.material, &kin).map_err(wrap)?;
                let Some(d) = t.lu().solve(&-g_beta) else {
                    break;
                };
                out.slopes[k][e] += d;
                if d.norm() <= f64::EPSILON * out.slopes[k][e].norm() {
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Newton increment on the reduced unknowns with the slope block eliminated:
/// `S = K_pp − K_pβ·K_ββ⁻¹·K_βp`, using the block-diagonal structure of `K_ββ`.
pub fn condensed_step(
    residual: &DVector<f64>,
    tangent: &DMatrix<f64>,
    slope_start: usize,
) -> Option<DVector<f64>> {
    let n = residual.len();
    let np = slope_start;
    let nb = n - np;
    let k_pb = tangent.view((0, np), (np, nb));
    let k_bp = tangent.view((np, 0), (nb, np)).into_owned();
    let r_b = residual.rows(np, nb).into_owned();

    // Per-element inverse of the 6×6 slope blocks applied to [K_βp | r_β].
    let mut rhs = DMatrix::zeros(nb, np + 1);
    rhs.view_mut((0, 0), (nb, np)).copy_from(&k_bp);
    rhs.set_column(np, &r_b);
    let mut solved = DMatrix::zeros(nb, np + 1);
    for b in (0..nb).step_by(6) {
        let block = tangent.view((np + b, np + b), (6, 6)).into_owned();
        let lu = block.lu();
        let x = lu.solve(&rhs.rows(b, 6).into_owned())?;
        solved.rows_mut(b, 6).copy_from(&x);
    }
    let x_bp = solved.columns(0, np);
    let y_b = solved.column(np);

    let schur = tangent.view((0, 0), (np, np)) - k_pb * x_bp;
    let reduced_rhs = -(residual.rows(0, np) - k_pb * y_b);
    let d_p = schur.lu().solve(&reduced_rhs)?;
    let d_b = -(y_b + x_bp * &d_p);
    let mut delta = DVector::zeros(n);
    delta.rows_mut(0, np).copy_from(&d_p);
    delta.rows_mut(np, nb).copy_from(&d_b);
    delta.iter().all(|v| v.is_finite()).then_some(delta)
}

/// Largest scale in `(0, 1]` keeping every pose rotation increment of
/// `full` within `max_rotation`.
fn rotation_cap(model: &RobotModel, full: &DVector<f64>, max_rotation: f64) -> f64 {
    let idx = model.index();
    let largest = (0..idx.pose_count())
        .map(|i| full.fixed_rows::<3>(idx.ee_offset() + 6 * i).norm())
        .fold(0.0, f64::max);
    if largest > max_rotation {
        max_rotation / largest
    } else {
        1.0
    }
}

fn reorthonormalize(g: Pose) -> Pose {
    if g.orthonormality_error() > REORTHONORMALIZE_DRIFT {
        Pose::new(project_to_so3(&g.rotation), g.position)
    } else {
        g
    }
}

/// Applies a full-dimension tangent increment to `q`.
pub fn retract(
    model: &RobotModel,
    q: &GeneralizedState,
    delta: &DVector<f64>,
    mode: ThetaMode,
) -> GeneralizedState {
    let idx = model.index();
    assert_eq!(delta.len(), idx.dim());
    let block = |offset: usize| -> Twist { delta.fixed_rows::<6>(offset).into_owned() };

    let mut next = q.clone();
    if mode == ThetaMode::Free {
        for (m, theta) in next.motor_angles.iter_mut().enumerate() {
            *theta += delta[m];
        }
    }
    next.ee_pose = reorthonormalize(q.ee_pose.retract(&block(idx.ee_offset())));
    for (k, rod) in next.interior_poses.iter_mut().enumerate() {
        for (i, g) in rod.iter_mut().enumerate() {
            *g = reorthonormalize(g.retract(&block(idx.interior_offset(k, i + 1))));
        }
    }
    for (k, rod) in next.slopes.iter_mut().enumerate() {
        for (e, beta) in rod.iter_mut().enumerate() {
            *beta += block(idx.slope_offset(k, e));
        }
    }
    next
}

/// Indices kept after the prescribed-angle reduction.
fn free_range(model: &RobotModel, mode: ThetaMode) -> std::ops::Range<usize> {
    let start = match mode {
        ThetaMode::Free => 0,
        ThetaMode::Prescribed => model.index().motor_count(),
    };
    start..model.tangent_dim()
}

struct Evaluation {
    residual: DVector<f64>,
    tangent: Option<DMatrix<f64>>,
    consistent: Option<DMatrix<f64>>,
    norm: f64,
    energy: f64,
}

fn evaluate(
    model: &RobotModel,
    q: &GeneralizedState,
    loads: &LoadSet,
    mode: ThetaMode,
    tangent: Option<TangentKind>,
) -> Result<Evaluation, AssemblyError> {
    let assembled = assemble(model, q, loads, tangent)?;
    let range = free_range(model, mode);
    let n = range.len();
    let residual = assembled.residual.rows(range.start, n).into_owned();
    let reduce = |t: DMatrix<f64>| t.view((range.start, range.start), (n, n)).into_owned();
    let tangent = assembled.tangent.map(reduce);
    let consistent = assembled.consistent_tangent.map(reduce);
    let norm = residual.norm();
    Ok(Evaluation {
        residual,
        tangent,
        consistent,
        norm,
        energy: assembled.internal_energy,
    })
}

fn expand(model: &RobotModel, mode: ThetaMode, reduced: &DVector<f64>) -> DVector<f64> {
    let range = free_range(model, mode);
    let mut full = DVector::zeros(model.tangent_dim());
    full.rows_mut(range.start, range.len()).copy_from(reduced);
    full
}

/// Newton iteration from `q0` until `‖r‖ < tolerance`.
///
/// With [`NewtonMethod::Condensed`] the slopes of `q0` are first condensed;
/// `residual_history[0]` is the norm after that projection.
pub fn solve(
    model: &RobotModel,
    q0: &GeneralizedState,
    loads: &LoadSet,
    config: &SolverConfig,
) -> Result<SolveReport, SolveError> {
    config.validate()?;
    q0.check_shape(model)?;
    loads.validate(model)?;
    let mode = config.theta_mode;
    let condensed = config.method == NewtonMethod::Condensed;
    let kind = if condensed {
        TangentKind::Consistent
    } else {
        TangentKind::Frozen
    };
    let range = free_range(model, mode);
    let slope_start = model.index().slope_offset(0, 0) - range.start;

    let mut q = q0.clone();
    if condensed {
        if let Ok(projected) = condense_slopes(model, &q) {
            q = projected;
        }
    }
    let mut current = match evaluate(model, &q, loads, mode, Some(kind)) {
        Ok(eval) => eval,
        Err(_) => evaluate(model, &q, loads, mode, Some(TangentKind::Frozen))?,
    };
    let mut history = vec![current.norm];
    let mut diagnostics = Vec::new();
    let mut converged = current.norm < config.residual_tolerance;

    // Retract along `scale·full` (then condense slopes) and measure ‖r‖.
    let trial_at = |q: &GeneralizedState, full: &DVector<f64>, scale: f64| {
        let mut trial = retract(model, q, &(full * scale), mode);
        if condensed {
            trial = condense_slopes(model, &trial).ok()?;
        }
        let eval = evaluate(model, &trial, loads, mode, None).ok()?;
        Some((trial, eval.norm))
    };

    while !converged && diagnostics.len() < config.max_iterations {
        // Corrects a trial at `scale` toward the linear model's prediction
        // `(1 − scale)·r`, reusing the current exact tangent.
        let second_order_correction = |trial: &GeneralizedState, scale: f64| {
            let kc = current.consistent.as_ref()?;
            let r = evaluate(model, trial, loads, mode, None).ok()?.residual;
            let defect = r - &current.residual * (1.0 - scale);
            let delta = condensed_step(&defect, kc, slope_start)?;
            trial_at(trial, &expand(model, mode, &delta), 1.0)
        };
        // Candidate directions: the condensed exact step, then the frozen step.
        let mut directions: Vec<(DVector<f64>, f64, bool)> = Vec::with_capacity(2);
        if let Some(kc) = current.consistent.as_ref() {
            if let Some(delta) = condensed_step(&current.residual, kc, slope_start) {
                directions.push((delta, 0.0, true));
            }
        }
        let tangent = current.tangent.as_ref().expect("tangent assembled");
        match newton_step(&current.residual, tangent, config) {
            Ok(step) => directions.push((step.delta, step.shift, false)),
            Err(e) if directions.is_empty() => return Err(e),
            Err(_) => {}
        }
        let fulls: Vec<DVector<f64>> = directions
            .iter()
            .map(|(delta, _, _)| expand(model, mode, delta))
            .collect();
        let starts: Vec<f64> = fulls
            .iter()
            .map(|full| rotation_cap(model, full, config.max_rotation_step))
            .collect();

        // The condensed direction at its capped length, with a second-order
        // correction when the plain trial does not decrease ‖r‖.
        let reference = current.norm;
        let mut accepted: Option<(GeneralizedState, f64, usize, f64, usize)> = None;
        if directions[0].2 {
            let scale = starts[0];
            if let Some((trial, norm)) = trial_at(&q, &fulls[0], scale) {
                if norm < reference {
                    accepted = Some((trial, scale, 0, norm, 0));
                } else if let Some((corrected, norm)) = second_order_correction(&trial, scale) {
                    if norm < reference {
                        accepted = Some((corrected, scale, 0, norm, 0));
                    }
                }
            }
        }
        // Otherwise backtrack, frozen direction first.
        if accepted.is_none() {
            'search: for i in (0..fulls.len()).rev() {
                let mut scale = starts[i];
                let first = usize::from(directions[i].2);
                if first == 1 {
                    scale *= config.backtrack_factor;
                }
                for halvings in first..=config.max_halvings {
                    if let Some((trial, norm)) = trial_at(&q, &fulls[i], scale) {
                        if norm < reference {
                            accepted = Some((trial, scale, halvings, norm, i));
                            break 'search;
                        }
                    }
                    scale *= config.backtrack_factor;
                }
            }
        }
        let Some((trial, scale, halvings, _, i)) = accepted else {
            // Line search exhausted: no descent along either direction.
            break;
        };
        let (delta, shift, was_condensed) = &directions[i];
        diagnostics.push(IterationRecord {
            residual_norm: current.norm,
            step_norm: delta.norm(),
            step_scale: scale,
            shift: *shift,
            halvings,
            condensed: *was_condensed,
        });
        q = trial;
        // The exact tangent needs finite-difference neighbours of q; near the
        // element rotation limit they may not exist, so fall back to frozen.
        current = match evaluate(model, &q, loads, mode, Some(kind)) {
            Ok(eval) => eval,
            Err(_) => evaluate(model, &q, loads, mode, Some(TangentKind::Frozen))?,
        };
        history.push(current.norm);
        converged = current.norm < config.residual_tolerance;
    }

    let mut report = SolveReport {
        converged,
        iterations: diagnostics.len(),
        residual_history: history,
        final_state: q,
        diagnostics,
        internal_energy: current.energy,
        tangent_positive_definite: None,
        predicted_step_norm: None,
    };
    let hessian = current.consistent.as_ref().or(current.tangent.as_ref());
    if let Some(tangent) = hessian {
        let symmetric = (tangent + tangent.transpose()) * 0.5;
        match symmetric.cholesky() {
            Some(chol) => {
                report.tangent_positive_definite = Some(true);
                report.predicted_step_norm = Some(chol.solve(&current.residual).norm());
            }
            None => report.tangent_positive_definite = Some(false),
        }
    }
    if converged {
        Ok(report)
    } else {
        Err(SolveError::NoConvergence(Box::new(report)))
    }
}

/// Straight-rod starting configuration for motor angles `theta`.
///
/// Each rod is propagated from its base embedding with its natural strain to
/// predict the end-effector pose; the prediction is averaged over rods. Interior
/// nodes lie on the SE(3) geodesic between the two boundary nodes. All slopes
/// start at zero.
pub fn initial_guess(model: &RobotModel, theta: &[f64]) -> GeneralizedState {
    assert_eq!(theta.len(), model.motors().len());
    let bases: Vec<Pose> = model
        .rods()
        .iter()
        .map(|rod| base_embedding(rod, &model.motors()[rod.motor_index], theta[rod.motor_index]).0)
        .collect();

    let predictions: Vec<Pose> = model
        .rods()
        .iter()
        .zip(&bases)
        .map(|(rod, base)| {
            let tip = base * &Pose::exp(&(rod.material.natural_strain * rod.length()));
            tip * rod.platform_attachment.inverse()
        })
        .collect();
    // Averaged as offsets from the first prediction, so that agreeing
    // predictions are reproduced exactly.
    let first = predictions[0];
    let count = predictions.len() as f64;
    let mut rotation_offset = nalgebra::Matrix3::zeros();
    let mut position_offset = nalgebra::Vector3::zeros();
    for p in &predictions {
        rotation_offset += p.rotation - first.rotation;
        position_offset += p.position - first.position;
    }
    let ee_pose = Pose::new(
        project_to_so3(&(first.rotation + rotation_offset / count)),
        first.position + position_offset / count,
    );

    let interior_poses = model
        .rods()
        .iter()
        .zip(&bases)
        .map(|(rod, base)| {
            let n = rod.element_count;
            let tip = platform_embedding(rod, &ee_pose).0;
            let chord = (base.inverse() * tip).log();
            (1..n)
                .map(|j| {
                    let t = j as f64 / n as f64;
                    match &chord {
                        Ok(v) => base * &Pose::exp(&(v * t)),
                        Err(_) => base * &Pose::exp(&(rod.material.natural_strain * (t * rod.length()))),
                    }
                })
                .collect()
        })
        .collect();

    GeneralizedState {
        motor_angles: theta.to_vec(),
        ee_pose,
        interior_poses,
        slopes: model
            .rods()
            .iter()
            .map(|rod| vec![Twist::zeros(); rod.element_count])
            .collect(),
    }
}
