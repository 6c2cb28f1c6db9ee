//! Linear Strain Element (LSE).
//!
//! Within one element of length `h` the body strain varies affinely,
//! `ξ(s) = ξ̄ + (s − h/2)·β`. The fourth-order Magnus truncation of
//! `g′ = g·ξ̂(s)` gives the integrated twist in closed form,
//!
//! ```text
//! Ω = (h·I − h³/12·ad(β))·ξ̄ = A(β)·ξ̄,    g_a⁻¹·g_b = exp(Ω̂)
//! ```
//!
//! so the mean strain follows from the end poses without iteration,
//! `ξ̄ = A⁻¹·log(g_a⁻¹·g_b)`. The strain field is a body strain.
//!
//! Element unknowns are the two end poses (right-perturbed) and the slope
//! `β`, stacked as `δx = [δζ_a; δζ_b; δβ]` (18 entries).

use nalgebra::{Matrix6, SMatrix, SVector, Vector6};
use thiserror::Error;

use crate::lie::{adjoint_algebra, angular, dexp_inv, LieError, Pose, Twist};

pub type ElementVector = SVector<f64, 18>;
pub type ElementMatrix = SMatrix<f64, 18, 18>;

/// Elements whose relative rotation reaches this angle must be refined.
pub const MAX_ELEMENT_ROTATION: f64 = std::f64::consts::FRAC_PI_2;

/// Condition number of `A` above which recovery is refused.
pub const MAX_A_CONDITION: f64 = 1e8;

const SEGMENT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElementError {
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error("arc length {s} lies outside the element [0, {length}]")]
    OutOfElement { s: f64, length: f64 },
    #[error("A matrix is ill-conditioned (condition estimate {condition:e})")]
    SingularAMatrix { condition: f64 },
    #[error("relative element rotation {angle:.4} rad reaches the pi/2 limit, refine the mesh")]
    RotationTooLarge { angle: f64 },
    #[error("element length must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
}

/// Straight, unstretched rod whose tangent is the third body axis.
pub fn straight_natural_strain() -> Twist {
    Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementMaterial {
    /// Sectional stiffness `K`, symmetric positive definite.
    pub stiffness: Matrix6<f64>,
    /// Natural (stress-free) strain `ξ₀`.
    pub natural_strain: Twist,
}

impl ElementMaterial {
    pub fn new(stiffness: Matrix6<f64>, natural_strain: Twist) -> Result<Self, ElementError> {
        let asym = (stiffness - stiffness.transpose()).abs().max();
        if asym > 1e-12 * stiffness.abs().max().max(1.0) {
            return Err(ElementError::InvalidMaterial(format!(
                "stiffness is not symmetric (deviation {asym:e})"
            )));
        }
        if stiffness.cholesky().is_none() {
            return Err(ElementError::InvalidMaterial(
                "stiffness is not positive definite".into(),
            ));
        }
        if natural_strain.iter().any(|x| !x.is_finite()) {
            return Err(ElementError::InvalidMaterial("natural strain is not finite".into()));
        }
        Ok(Self {
            stiffness,
            natural_strain,
        })
    }

    /// Diagonal stiffness `diag(EI₁, EI₂, GJ, k_sGA, k_sGA, EA)` with a straight natural strain.
    pub fn from_diagonal(diag: [f64; 6]) -> Result<Self, ElementError> {
        Self::new(
            Matrix6::from_diagonal(&Vector6::from_column_slice(&diag)),
            straight_natural_strain(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementState {
    pub pose_a: Pose,
    pub pose_b: Pose,
    pub slope: Twist,
    pub length: f64,
}

/// Quantities recovered from an [`ElementState`].
#[derive(Clone, Debug, PartialEq)]
pub struct ElementKinematics {
    pub mean_strain: Twist,
    pub integrated_twist: Twist,
    pub a_matrix: Matrix6<f64>,
    pub a_inverse: Matrix6<f64>,
    /// `∂ξ̄/∂δζ_a`
    pub j1: Matrix6<f64>,
    /// `∂ξ̄/∂δζ_b`
    pub j2: Matrix6<f64>,
    /// `∂ξ̄/∂β`
    pub j3: Matrix6<f64>,
}

impl ElementKinematics {
    /// `B = [J₁ J₂ J₃]`, so that `δξ̄ = B·δx`.
    pub fn strain_jacobian(&self) -> SMatrix<f64, 6, 18> {
        let mut b = SMatrix::<f64, 6, 18>::zeros();
        b.fixed_view_mut::<6, 6>(0, 0).copy_from(&self.j1);
        b.fixed_view_mut::<6, 6>(0, 6).copy_from(&self.j2);
        b.fixed_view_mut::<6, 6>(0, 12).copy_from(&self.j3);
        b
    }
}

/// `A(β) = h·I − (h³/12)·ad(β)`.
pub fn a_matrix(slope: &Twist, length: f64) -> Matrix6<f64> {
    Matrix6::identity() * length - adjoint_algebra(slope) * (length.powi(3) / 12.0)
}

/// Fourth-order Magnus twist of the linear strain field over `[0, h]`.
pub fn magnus_forward(mean_strain: &Twist, slope: &Twist, length: f64) -> Twist {
    a_matrix(slope, length) * mean_strain
}

fn one_norm(m: &Matrix6<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.abs().sum())
        .fold(0.0, f64::max)
}

/// Closed-form mean-strain recovery and the element Jacobians.
pub fn recover_kinematics(e: &ElementState) -> Result<ElementKinematics, ElementError> {
    let h = e.length;
    if !(h > 0.0) {
        return Err(ElementError::NonPositiveLength(h));
    }
    let omega = (e.pose_a.inverse() * e.pose_b).log()?;
    let angle = angular(&omega).norm();
    if angle >= MAX_ELEMENT_ROTATION {
        return Err(ElementError::RotationTooLarge { angle });
    }

    let a = a_matrix(&e.slope, h);
    let a_inv = a
        .lu()
        .try_inverse()
        .ok_or(ElementError::SingularAMatrix {
            condition: f64::INFINITY,
        })?;
    let condition = one_norm(&a) * one_norm(&a_inv);
    if !(condition < MAX_A_CONDITION) {
        return Err(ElementError::SingularAMatrix { condition });
    }

    let mean_strain = a_inv * omega;
    let right = a_inv * dexp_inv(&omega)?;
    let j1 = -right * Pose::exp(&-omega).adjoint();
    let j3 = a_inv * adjoint_algebra(&mean_strain) * (-h.powi(3) / 12.0);

    Ok(ElementKinematics {
        mean_strain,
        integrated_twist: omega,
        a_matrix: a,
        a_inverse: a_inv,
        j1,
        j2: right,
        j3,
    })
}

fn check_arc_length(s: f64, length: f64) -> Result<f64, ElementError> {
    if !(s >= -SEGMENT_TOL && s <= length + SEGMENT_TOL) {
        return Err(ElementError::OutOfElement { s, length });
    }
    Ok(s.clamp(0.0, length))
}

/// `ξ(s) = ξ̄ + (s − h/2)·β`.
pub fn strain_at(e: &ElementState, kin: &ElementKinematics, s: f64) -> Result<Twist, ElementError> {
    let s = check_arc_length(s, e.length)?;
    Ok(kin.mean_strain + e.slope * (s - 0.5 * e.length))
}

/// Closed-form elastic energy `½h·ΔᵀKΔ + h³/24·βᵀKβ`, `Δ = ξ̄ − ξ₀`.
pub fn element_energy(e: &ElementState, m: &ElementMaterial, kin: &ElementKinematics) -> f64 {
    let delta = kin.mean_strain - m.natural_strain;
    let h = e.length;
    0.5 * h * delta.dot(&(m.stiffness * delta))
        + h.powi(3) / 24.0 * e.slope.dot(&(m.stiffness * e.slope))
}

/// Right-trivialized gradient of [`element_energy`] with respect to `δx`.
pub fn element_residual(
    e: &ElementState,
    m: &ElementMaterial,
    kin: &ElementKinematics,
) -> ElementVector {
    let h = e.length;
    let force = m.stiffness * (kin.mean_strain - m.natural_strain) * h;
    let mut gamma = ElementVector::zeros();
    gamma
        .fixed_rows_mut::<6>(0)
        .copy_from(&(kin.j1.transpose() * force));
    gamma
        .fixed_rows_mut::<6>(6)
        .copy_from(&(kin.j2.transpose() * force));
    gamma.fixed_rows_mut::<6>(12).copy_from(
        &(kin.j3.transpose() * force + m.stiffness * e.slope * (h.powi(3) / 12.0)),
    );
    gamma
}

/// Frozen-Jacobian tangent `h·BᵀKB + diag(0, 0, h³/12·K)`, exactly symmetric.
pub fn element_tangent(
    e: &ElementState,
    m: &ElementMaterial,
    kin: &ElementKinematics,
) -> ElementMatrix {
    let h = e.length;
    let b = kin.strain_jacobian();
    let kb = m.stiffness * b;
    let raw = b.transpose() * kb * h;
    let mut tangent = (raw + raw.transpose()) * 0.5;
    let k_sym = (m.stiffness + m.stiffness.transpose()) * 0.5;
    let mut block = tangent.fixed_view_mut::<6, 6>(12, 12);
    block += k_sym * (h.powi(3) / 12.0);
    tangent
}

/// Relative step of the central differences in [`element_geometric_tangent`].
pub const GEOMETRIC_FD_STEP: f64 = 5e-6;

/// Geometric stiffness `∂(Bᵀw)/∂x` at frozen section force `w = h·K(ξ̄ − ξ°)`.
///
/// This is the part of the exact residual derivative that the frozen
/// tangent drops. It is evaluated by central differences of the Jacobians
/// only, so its error is relative to `|B'||w|` and not to the much larger
/// material term. Slope columns use the step scaled by `1/h²`.
pub fn element_geometric_tangent(
    e: &ElementState,
    m: &ElementMaterial,
    kin: &ElementKinematics,
) -> Result<ElementMatrix, ElementError> {
    geometric_stiffness_at(e, &section_force(e, m, kin))
}

/// `∂(Bᵀw)/∂x` for a given section force `w`.
pub fn geometric_stiffness_at(e: &ElementState, w: &Twist) -> Result<ElementMatrix, ElementError> {
    let mut g = ElementMatrix::zeros();
    for i in 0..18 {
        g.set_column(i, &geometric_column(e, w, i)?);
    }
    Ok(g)
}

/// Exact residual derivative `h·BᵀKB + ∂(Bᵀw)/∂x + diag(0, 0, h³/12·K)`.
///
/// Not symmetric in general: under right-trivialized perturbations the
/// antisymmetric part is of the order of the element residual.
pub fn element_consistent_tangent(
    e: &ElementState,
    m: &ElementMaterial,
    kin: &ElementKinematics,
) -> Result<ElementMatrix, ElementError> {
    Ok(element_tangent(e, m, kin) + element_geometric_tangent(e, m, kin)?)
}

/// Slope rows and columns of [`element_consistent_tangent`], `∂γ_β/∂β`.
pub fn element_slope_tangent(
    e: &ElementState,
    m: &ElementMaterial,
    kin: &ElementKinematics,
) -> Result<Matrix6<f64>, ElementError> {
    let h = e.length;
    let w = section_force(e, m, kin);
    let mut t = kin.j3.transpose() * m.stiffness * kin.j3 * h;
    t = (t + t.transpose()) * 0.5 + (m.stiffness + m.stiffness.transpose()) * (h.powi(3) / 24.0);
    for i in 0..6 {
        let col = geometric_column(e, &w, 12 + i)?;
        let mut dst = t.column_mut(i);
        dst += col.fixed_rows::<6>(12);
    }
    Ok(t)
}

pub fn section_force(e: &ElementState, m: &ElementMaterial, kin: &ElementKinematics) -> Twist {
    m.stiffness * (kin.mean_strain - m.natural_strain) * e.length
}

fn geometric_column(e: &ElementState, w: &Twist, i: usize) -> Result<ElementVector, ElementError> {
    let step = if i < 12 {
        GEOMETRIC_FD_STEP
    } else {
        GEOMETRIC_FD_STEP / (e.length * e.length)
    };
    let shifted = |sign: f64| -> Result<ElementVector, ElementError> {
        let mut d = Twist::zeros();
        d[i % 6] = sign * step;
        let mut p = *e;
        match i / 6 {
            0 => p.pose_a = p.pose_a.retract(&d),
            1 => p.pose_b = p.pose_b.retract(&d),
            _ => p.slope += d,
        }
        Ok(recover_kinematics(&p)?.strain_jacobian().transpose() * w)
    };
    Ok((shifted(1.0)? - shifted(-1.0)?) / (2.0 * step))
}

/// Pose at arc length `s`, from the Magnus twist of the strain restricted to `[0, s]`.
pub fn interpolate_pose(
    e: &ElementState,
    kin: &ElementKinematics,
    s: f64,
) -> Result<Pose, ElementError> {
    let s = check_arc_length(s, e.length)?;
    if s == e.length {
        return Ok(e.pose_a * Pose::exp(&kin.integrated_twist));
    }
    // The restricted field is still linear, with midpoint s/2 and the same slope.
    let sub_mean = kin.mean_strain + e.slope * (0.5 * (s - e.length));
    Ok(e.pose_a * Pose::exp(&magnus_forward(&sub_mean, &e.slope, s)))
}
