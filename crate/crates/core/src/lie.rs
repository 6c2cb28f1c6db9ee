//! Exact SE(3) kernel: hat/vee, exponential and logarithm, adjoints, and the
//! tangent operator of the exponential map.
//!
//! Twists are stored as `[angular; linear]` everywhere, so that
//! `ad(v) = [[κ̃, 0], [ε̃, κ̃]]` and `Ad(g) = [[R, 0], [p̃R, R]]`. Wrenches use
//! the dual ordering `[moment; force]`.
//!
//! Perturbations are right-trivialized: a pose is perturbed as `g·exp(δζ̂)`.
//! Consequently [`dexp`] is the operator satisfying
//! `exp(Ω + δ) ≈ exp(Ω)·exp(dexp(Ω)·δ)` to first order.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Element of se(3) ≅ ℝ⁶ ordered `[angular; linear]`.
pub type Twist = Vector6<f64>;

/// Dual of [`Twist`], ordered `[moment; force]`.
pub type Wrench = Vector6<f64>;

/// Rotation angle below which closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-4;

/// Distance from π inside which the logarithm is rejected.
pub const PI_MARGIN: f64 = 1e-6;

/// Tolerance used by [`vee`] when checking the se(3) sparsity pattern.
pub const ALGEBRA_TOL: f64 = 1e-12;

// The Q-block coefficients of the SE(3) Jacobian lose about eps/θ² to
// cancellation, so they switch to a longer Taylor series much earlier than
// the SO(3) ones.
const Q_SERIES_ANGLE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("rotation angle {angle} lies within {PI_MARGIN} of pi, logarithm is not unique")]
    RotationNearPi { angle: f64 },
    #[error("matrix violates the se(3) sparsity pattern by {deviation:e}")]
    NotInAlgebra { deviation: f64 },
}

pub fn twist(angular: &Vector3<f64>, linear: &Vector3<f64>) -> Twist {
    Vector6::new(angular.x, angular.y, angular.z, linear.x, linear.y, linear.z)
}

pub fn angular(v: &Twist) -> Vector3<f64> {
    v.fixed_rows::<3>(0).into_owned()
}

pub fn linear(v: &Twist) -> Vector3<f64> {
    v.fixed_rows::<3>(3).into_owned()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Maps a twist to its 4×4 se(3) matrix.
pub fn hat(v: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&angular(v)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&linear(v));
    m
}

/// Inverse of [`hat`]. Rejects matrices outside se(3) beyond [`ALGEBRA_TOL`].
pub fn vee(m: &Matrix4<f64>) -> Result<Twist, LieError> {
    let top = m.fixed_view::<3, 3>(0, 0);
    let mut deviation = (top + top.transpose()).abs().max();
    deviation = deviation.max(m.row(3).abs().max());
    if deviation > ALGEBRA_TOL {
        return Err(LieError::NotInAlgebra { deviation });
    }
    let w = unskew(&top.into_owned());
    Ok(twist(&w, &m.fixed_view::<3, 1>(0, 3).into_owned()))
}

/// `ad(v)`, the matrix of `w ↦ [v, w]`.
pub fn adjoint_algebra(v: &Twist) -> Matrix6<f64> {
    let k = skew(&angular(v));
    let e = skew(&linear(v));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&k);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&e);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&k);
    m
}

/// Coefficients `(sinθ/θ, (1−cosθ)/θ², (θ−sinθ)/θ³)` of Rodrigues-type series.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let s = theta.sin();
        let t2 = theta * theta;
        let half = (0.5 * theta).sin() / theta;
        (s / theta, 2.0 * half * half, (theta - s) / (t2 * theta))
    }
}

pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let w = skew(phi);
    Matrix3::identity() + w * a + w * w * b
}

/// Principal logarithm of a rotation matrix.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, LieError> {
    let axis = unskew(&(r - r.transpose()));
    let s = 0.5 * axis.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta > std::f64::consts::PI - PI_MARGIN {
        return Err(LieError::RotationNearPi { angle: theta });
    }
    let scale = if theta < SMALL_ANGLE {
        0.5 * (1.0 + theta * theta / 6.0)
    } else {
        0.5 * theta / theta.sin()
    };
    Ok(axis * scale)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (_, b, c) = rodrigues_coeffs(phi.norm());
    let w = skew(phi);
    Matrix3::identity() + w * b + w * w * c
}

/// Inverse of [`so3_left_jacobian`], valid for angles below 2π.
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let d = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        1.0 / (theta * theta) - half.cos() / (2.0 * theta * half.sin())
    };
    let w = skew(phi);
    Matrix3::identity() - w * 0.5 + w * w * d
}

/// Lower-left block of the SE(3) left Jacobian.
fn se3_q_block(phi: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < Q_SERIES_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t4 * t2 / 362880.0 + t4 * t4 / 39916800.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0 - t4 * t2 / 3628800.0
                + t4 * t4 / 479001600.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0 - t4 * t2 / 9979200.0
                + t4 * t4 * 5.0 / 6227020800.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = skew(phi);
    let r = skew(rho);
    let prp = p * r * p;
    r * 0.5 + (p * r + r * p + prp) * c1 + (p * p * r + r * p * p - prp * 3.0) * c2
        + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3): `Σ ad(v)ʲ/(j+1)!`.
fn se3_left_jacobian(v: &Twist) -> Matrix6<f64> {
    let phi = angular(v);
    let j = so3_left_jacobian(&phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&se3_q_block(&phi, &linear(v)));
    m
}

fn se3_left_jacobian_inv(v: &Twist) -> Matrix6<f64> {
    let phi = angular(v);
    let ji = so3_left_jacobian_inv(&phi);
    let q = se3_q_block(&phi, &linear(v));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ji * q * ji));
    m
}

/// Right-trivialized tangent of the exponential map, `Σ (−ad Ω)ʲ/(j+1)!`.
pub fn dexp(omega: &Twist) -> Matrix6<f64> {
    se3_left_jacobian(&-omega)
}

/// Inverse of [`dexp`], `Σ Bⱼ/j! (−ad Ω)ʲ` with `B₁ = −1/2`.
pub fn dexp_inv(omega: &Twist) -> Result<Matrix6<f64>, LieError> {
    let angle = angular(omega).norm();
    if angle > std::f64::consts::PI - PI_MARGIN {
        return Err(LieError::RotationNearPi { angle });
    }
    Ok(se3_left_jacobian_inv(&-omega))
}

/// Truncated power series for [`dexp`] and [`dexp_inv`]. These are reference
/// implementations used to cross-check the closed forms.
pub mod series {
    use super::{adjoint_algebra, Twist};
    use nalgebra::Matrix6;

    /// Bernoulli numbers B₀..B₈ with the B₁ = −1/2 convention.
    pub const BERNOULLI: [f64; 9] = [
        1.0,
        -0.5,
        1.0 / 6.0,
        0.0,
        -1.0 / 30.0,
        0.0,
        1.0 / 42.0,
        0.0,
        -1.0 / 30.0,
    ];

    pub fn dexp(omega: &Twist, terms: usize) -> Matrix6<f64> {
        let neg_ad = -adjoint_algebra(omega);
        let mut power = Matrix6::identity();
        let mut factorial = 1.0;
        let mut sum = Matrix6::zeros();
        for j in 0..terms {
            factorial *= (j + 1) as f64;
            sum += power / factorial;
            power = neg_ad * power;
        }
        sum
    }

    /// Bernoulli series truncated after `j = 8`.
    pub fn dexp_inv(omega: &Twist) -> Matrix6<f64> {
        let neg_ad = -adjoint_algebra(omega);
        let mut power = Matrix6::identity();
        let mut factorial = 1.0;
        let mut sum = Matrix6::zeros();
        for (j, b) in BERNOULLI.iter().enumerate() {
            if j > 0 {
                factorial *= j as f64;
            }
            sum += power * (b / factorial);
            power = neg_ad * power;
        }
        sum
    }
}

/// Rigid transform `x ↦ R·x + p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, position: Vector3<f64>) -> Self {
        Self { rotation, position }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), position)
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    /// Reads the rotation and translation blocks; the bottom row is ignored.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.position))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.position + self.position,
        )
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.position
    }

    pub fn exp(v: &Twist) -> Pose {
        let phi = angular(v);
        Pose::new(so3_exp(&phi), so3_left_jacobian(&phi) * linear(v))
    }

    pub fn log(&self) -> Result<Twist, LieError> {
        let phi = so3_log(&self.rotation)?;
        Ok(twist(&phi, &(so3_left_jacobian_inv(&phi) * self.position)))
    }

    /// `Ad(g) = [[R, 0], [p̃R, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.position) * self.rotation));
        m
    }

    /// Right-trivialized update `g·exp(δ)`.
    pub fn retract(&self, delta: &Twist) -> Pose {
        self.compose(&Pose::exp(delta))
    }

    /// `max(|RᵀR − I|, |det R − 1|)`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.abs().max().max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().all(|x| x.is_finite())
            && self.position.iter().all(|x| x.is_finite())
            && self.orthonormality_error() <= tol
    }

    /// Projects the rotation block onto SO(3) (polar decomposition).
    pub fn reorthonormalized(&self) -> Pose {
        Pose::new(project_to_so3(&self.rotation), self.position)
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Closest rotation in the Frobenius norm.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = -1.0;
        r = u * fix * v_t;
    }
    r
}

/// Free-function form of [`Pose::exp`].
pub fn exp_se3(v: &Twist) -> Pose {
    Pose::exp(v)
}

/// Free-function form of [`Pose::log`].
pub fn log_se3(g: &Pose) -> Result<Twist, LieError> {
    g.log()
}

/// Free-function form of [`Pose::adjoint`].
pub fn adjoint_group(g: &Pose) -> Matrix6<f64> {
    g.adjoint()
}
