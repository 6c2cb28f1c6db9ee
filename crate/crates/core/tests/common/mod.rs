//! Shared helpers and independent oracles for the integration tests.
#![allow(dead_code)]

use cpr_statics::assembly::{
    ElementProjection, LoadSet, MotorAxis, NodalWrench, NodeRef, RobotModel, RodSpec,
};
use cpr_statics::element::recover_kinematics;
use cpr_statics::solver::initial_guess;
use cpr_statics::element::{ElementMaterial, ElementState, ElementVector};
use cpr_statics::lie::{hat, Pose, Twist};
use cpr_statics::scenario::{LoadDescription, RobotDescription};
use cpr_statics::GeneralizedState;
use nalgebra::{DVector, Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
}

pub fn rand_twist(rng: &mut ChaCha8Rng, scale: f64) -> Twist {
    Vector6::from_fn(|_, _| rng.random_range(-scale..scale))
}

/// Uniform direction scaled to a norm drawn from `[0, max_norm]`.
pub fn rand_twist_in_ball(rng: &mut ChaCha8Rng, max_norm: f64) -> Twist {
    loop {
        let v = rand_twist(rng, 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n * rng.random_range(0.0..max_norm);
        }
    }
}

pub fn rand_pose(rng: &mut ChaCha8Rng) -> Pose {
    let mut v = rand_twist(rng, 1.0);
    v.fixed_rows_mut::<3>(0).scale_mut(2.5);
    Pose::exp(&v)
}

/// Random SPD stiffness with eigenvalues in `[1, 100]`.
pub fn rand_material(rng: &mut ChaCha8Rng) -> ElementMaterial {
    let q = Matrix6::<f64>::from_fn(|_, _| rng.random_range(-1.0..1.0)).qr().q();
    let d = Matrix6::from_diagonal(&Vector6::from_fn(|_, _| rng.random_range(1.0..100.0)));
    let k = q * d * q.transpose();
    let k = (k + k.transpose()) * 0.5;
    ElementMaterial::new(k, rand_twist(rng, 0.5)).unwrap()
}

/// Element whose end poses differ by the Magnus twist of a random strain field.
pub fn rand_element(rng: &mut ChaCha8Rng) -> ElementState {
    let length = rng.random_range(0.02..0.2);
    loop {
        let mean = rand_twist(rng, 5.0);
        let slope = rand_twist(rng, 20.0);
        let omega = cpr_statics::element::magnus_forward(&mean, &slope, length);
        if omega.fixed_rows::<3>(0).norm() < 1.2 {
            let pose_a = rand_pose(rng);
            return ElementState {
                pose_a,
                pose_b: pose_a * Pose::exp(&omega),
                slope,
                length,
            };
        }
    }
}

/// Element state after the right-trivialized perturbation `d` of `δx = [δζ_a; δζ_b; δβ]`.
pub fn perturb_element(e: &ElementState, d: &ElementVector) -> ElementState {
    let block = |i: usize| -> Twist { d.fixed_rows::<6>(6 * i).into_owned() };
    ElementState {
        pose_a: e.pose_a * Pose::exp(&block(0)),
        pose_b: e.pose_b * Pose::exp(&block(1)),
        slope: e.slope + block(2),
        length: e.length,
    }
}

/// Classical RK4 on `g' = g·ξ̂(s)` with `steps` uniform steps, `ξ(s) = ξ̄ + (s − h/2)β`.
pub fn ode_end_pose(mean: &Twist, slope: &Twist, length: f64, steps: usize) -> Matrix4<f64> {
    let xi = |s: f64| hat(&(mean + slope * (s - 0.5 * length)));
    let dt = length / steps as f64;
    let mut g = Matrix4::<f64>::identity();
    for i in 0..steps {
        let s = i as f64 * dt;
        let k1 = g * xi(s);
        let k2 = (g + k1 * (0.5 * dt)) * xi(s + 0.5 * dt);
        let k3 = (g + k2 * (0.5 * dt)) * xi(s + 0.5 * dt);
        let k4 = (g + k3 * dt) * xi(s + dt);
        g += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    g
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn fitted_order(h: &[f64], err: &[f64]) -> f64 {
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub fn prototype() -> RobotModel {
    RobotDescription::prototype().to_model().unwrap()
}

pub fn pulley(model: &RobotModel) -> LoadSet {
    LoadDescription::prototype_pulley().to_load_set(model).unwrap()
}

/// Applies `delta` (full tangent, θ included) to every variable of `q`.
pub fn perturb_state(model: &RobotModel, q: &GeneralizedState, delta: &DVector<f64>) -> GeneralizedState {
    cpr_statics::solver::retract(model, q, delta, cpr_statics::ThetaMode::Free)
}

pub fn rand_direction(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
}

/// Dense projection of every element, in assembly order.
pub fn projections(model: &RobotModel, q: &GeneralizedState) -> Vec<(usize, usize, ElementProjection)> {
    let mut out = Vec::new();
    for (k, rod) in model.rods().iter().enumerate() {
        for e in 0..rod.element_count {
            out.push((k, e, ElementProjection::new(model, q, k, e)));
        }
    }
    out
}

pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    let dr: Matrix3<f64> = a.rotation - b.rotation;
    (a.position - b.position).norm().max(dr.norm())
}

/// A generic non-equilibrium configuration near the straight prototype.
pub fn disturbed(model: &RobotModel, seed: u64) -> GeneralizedState {
    let mut rng = rng(seed);
    let q = initial_guess(model, &[-0.05, -0.1, 0.02]);
    let mut d = rand_direction(&mut rng, model.tangent_dim()) * 2e-3;
    for k in 0..model.index().slope_count() {
        let off = model.index().slope_offset(0, 0) + 6 * k;
        for i in 0..6 {
            d[off + i] *= 50.0;
        }
    }
    perturb_state(model, &q, &d)
}

pub fn body_loads() -> LoadSet {
    LoadSet {
        nodal_wrenches: vec![
            NodalWrench {
                node: NodeRef::EndEffector,
                wrench: Twist::new(1e-3, -2e-3, 5e-4, 0.2, -0.1, 0.3),
            },
            NodalWrench {
                node: NodeRef::Interior { rod: 2, node: 1 },
                wrench: Twist::new(0.0, 1e-3, 0.0, 0.05, 0.0, 0.0),
            },
        ],
        pulley_loads: vec![],
    }
}

/// Residual with every strain Jacobian and projection frozen at `base`.
pub fn frozen_residual(model: &RobotModel, base: &GeneralizedState, q: &GeneralizedState) -> DVector<f64> {
    let mut r = DVector::zeros(model.tangent_dim());
    for (k, e, proj) in projections(model, base) {
        let material = &model.rods()[k].material;
        let b = recover_kinematics(&base.element_state(model, k, e)).unwrap().strain_jacobian();
        let state = q.element_state(model, k, e);
        let kin = recover_kinematics(&state).unwrap();
        let w = material.stiffness * (kin.mean_strain - material.natural_strain) * state.length;
        let mut gamma: ElementVector = b.transpose() * w;
        let mut slope = gamma.fixed_rows_mut::<6>(12);
        slope += material.stiffness * state.slope * (state.length.powi(3) / 12.0);
        proj.scatter_vector(&gamma, &mut r);
    }
    r
}

/// Two naturally curved rods on separate motors, with unit-scale stiffness.
pub fn curved_pair() -> RobotModel {
    let material = cpr_statics::ElementMaterial::new(
        nalgebra::Matrix6::from_diagonal(&nalgebra::Vector6::new(3.0, 3.0, 2.0, 50.0, 50.0, 100.0)),
        Twist::new(0.0, 2.0, 0.3, 0.0, 0.0, 1.0),
    )
    .unwrap();
    let motors = vec![
        MotorAxis::new(Vector3::x(), Vector3::zeros()).unwrap(),
        MotorAxis::new(Vector3::y(), Vector3::new(0.1, 0.0, 0.0)).unwrap(),
    ];
    let q_tip = |install: Pose| install * Pose::exp(&(material.natural_strain * 0.2));
    let first = Pose::identity();
    let second = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
    // The platform frame coincides with the first rod's natural tip.
    let ee = q_tip(first);
    let rods = [(0, first), (1, second)]
        .into_iter()
        .map(|(m, install)| RodSpec {
            element_count: 4,
            element_length: 0.05,
            material: material.clone(),
            motor_index: m,
            install_pose: install,
            platform_attachment: ee.inverse() * q_tip(install),
        })
        .collect();
    RobotModel::new(motors, rods).unwrap()
}
