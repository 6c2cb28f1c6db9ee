//! Scenario files, the actuation protocol, phase sweeps, export and
//! simulation-versus-reference error metrics.
//!
//! Robot, protocol and load descriptions are TOML documents with a
//! `format_version` field and a strict schema (unknown keys are rejected).
//! Trajectories export as CSV (one row per sample) or JSON (full poses and
//! optional rod shapes).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{
    AssemblyError, GeneralizedState, LoadSet, MotorAxis, NodalWrench, NodeRef, PulleyLoad,
    RobotModel, RodSpec,
};
use crate::element::{interpolate_pose, recover_kinematics, straight_natural_strain, ElementMaterial};
use crate::lie::{twist, Pose};
use crate::solver::{initial_guess, solve, SolveError, SolveReport, SolverConfig, ThetaMode};

pub const FORMAT_VERSION: u32 = 1;

/// Shipped stand-in description of the three-motor, six-rod prototype.
pub const PROTOTYPE_ROBOT: &str = include_str!("../scenarios/prototype.toml");
/// Shipped three-phase actuation protocol.
pub const PROTOTYPE_PROTOCOL: &str = include_str!("../scenarios/protocol.toml");
/// Shipped pulley tension load.
pub const PROTOTYPE_PULLEY_LOAD: &str = include_str!("../scenarios/pulley_load.toml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sample count mismatch: {sim} simulated vs {reference} reference")]
    SampleMismatch { sim: usize, reference: usize },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

fn read_file(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), ScenarioError> {
    std::fs::write(path, contents).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_version(version: u32) -> Result<(), ScenarioError> {
    if version != FORMAT_VERSION {
        return Err(invalid(
            "format_version",
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

fn vec3(v: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]])
}

fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

// ---------------------------------------------------------------------------
// Robot description

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub position: [f64; 3],
    /// Row-major rotation matrix; identity when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
}

impl PoseSpec {
    pub fn to_pose(&self) -> Pose {
        Pose::new(
            self.rotation.as_ref().map_or_else(Matrix3::identity, from_rows),
            vec3(&self.position),
        )
    }
}

fn default_poisson() -> f64 {
    0.3
}

fn default_shear_correction() -> f64 {
    0.9
}

/// Circular-section rod material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    /// Young's modulus, Pa.
    pub youngs_modulus: f64,
    /// Rod diameter, m.
    pub diameter: f64,
    #[serde(default = "default_poisson")]
    pub poisson_ratio: f64,
    #[serde(default = "default_shear_correction")]
    pub shear_correction: f64,
}

impl MaterialSpec {
    /// `diag(EI, EI, GJ, k_sGA, k_sGA, EA)` with `I = πd⁴/64`, `J = πd⁴/32`,
    /// `A = πd²/4`, `G = E/(2(1+ν))`.
    pub fn stiffness_diagonal(&self) -> [f64; 6] {
        let d = self.diameter;
        let e = self.youngs_modulus;
        let i = PI * d.powi(4) / 64.0;
        let j = PI * d.powi(4) / 32.0;
        let a = PI * d * d / 4.0;
        let g = e / (2.0 * (1.0 + self.poisson_ratio));
        let ks = self.shear_correction;
        [e * i, e * i, g * j, ks * g * a, ks * g * a, e * a]
    }

    fn validate(&self, field: &str) -> Result<(), ScenarioError> {
        let positive = [
            ("youngs_modulus", self.youngs_modulus),
            ("diameter", self.diameter),
            ("shear_correction", self.shear_correction),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(invalid(format!("{field}.{name}"), "must be positive"));
            }
        }
        if !(self.poisson_ratio > -1.0 && self.poisson_ratio < 0.5) {
            return Err(invalid(format!("{field}.poisson_ratio"), "must lie in (-1, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotorSpec {
    pub direction: [f64; 3],
    pub point: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RodEntry {
    /// 0-based motor index.
    pub motor: usize,
    pub elements: usize,
    /// Total rod length, m.
    pub length: f64,
    pub install_pose: PoseSpec,
    pub platform_attachment: PoseSpec,
    /// Natural strain `[κ; ε]`; straight and unstretched along body z when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub natural_strain: Option<[f64; 6]>,
    /// Per-rod material override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<MaterialSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotDescription {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Free-text statement of the global frame convention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<String>,
    pub material: MaterialSpec,
    pub motors: Vec<MotorSpec>,
    pub rods: Vec<RodEntry>,
}

impl RobotDescription {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let desc: RobotDescription =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn to_toml_string(&self) -> Result<String, ScenarioError> {
        toml::to_string(self).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn prototype() -> Self {
        Self::from_toml_str(PROTOTYPE_ROBOT).expect("shipped prototype description is valid")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        check_version(self.format_version)?;
        self.material.validate("material")?;
        if self.motors.is_empty() {
            return Err(invalid("motors", "at least one motor is required"));
        }
        if self.rods.is_empty() {
            return Err(invalid("rods", "at least one rod is required"));
        }
        for (m, motor) in self.motors.iter().enumerate() {
            MotorAxis::new(vec3(&motor.direction), vec3(&motor.point))
                .map_err(|e| invalid(format!("motors[{m}]"), e.to_string()))?;
        }
        for (k, rod) in self.rods.iter().enumerate() {
            let field = format!("rods[{k}]");
            if rod.motor >= self.motors.len() {
                return Err(invalid(
                    format!("{field}.motor"),
                    format!(
                        "rod {k} references motor {} but only {} motors are defined",
                        rod.motor,
                        self.motors.len()
                    ),
                ));
            }
            if rod.elements == 0 {
                return Err(invalid(format!("{field}.elements"), "must be at least 1"));
            }
            if !(rod.length > 0.0 && rod.length.is_finite()) {
                return Err(invalid(format!("{field}.length"), "must be positive"));
            }
            for (name, pose) in [
                ("install_pose", &rod.install_pose),
                ("platform_attachment", &rod.platform_attachment),
            ] {
                if !pose.to_pose().is_valid(1e-10) {
                    return Err(invalid(
                        format!("{field}.{name}.rotation"),
                        "must be a proper rotation matrix",
                    ));
                }
            }
            if let Some(material) = &rod.material {
                material.validate(&format!("{field}.material"))?;
            }
            self.rod_material(k)
                .map_err(|e| invalid(format!("{field}.material"), e.to_string()))?;
        }
        Ok(())
    }

    /// Element material of rod `k`; fails if the stiffness is not SPD.
    pub fn rod_material(&self, k: usize) -> Result<ElementMaterial, crate::element::ElementError> {
        let rod = &self.rods[k];
        let spec = rod.material.as_ref().unwrap_or(&self.material);
        let diag = spec.stiffness_diagonal();
        let natural = rod
            .natural_strain
            .map_or_else(straight_natural_strain, |v| Vector6::from_column_slice(&v));
        ElementMaterial::new(Matrix6::from_diagonal(&Vector6::from_column_slice(&diag)), natural)
    }

    pub fn to_model(&self) -> Result<RobotModel, ScenarioError> {
        self.validate()?;
        let motors = self
            .motors
            .iter()
            .map(|m| MotorAxis::new(vec3(&m.direction), vec3(&m.point)))
            .collect::<Result<Vec<_>, _>>()?;
        let rods = self
            .rods
            .iter()
            .enumerate()
            .map(|(k, rod)| {
                Ok(RodSpec {
                    element_count: rod.elements,
                    element_length: rod.length / rod.elements as f64,
                    material: self
                        .rod_material(k)
                        .map_err(|e| invalid(format!("rods[{k}].material"), e.to_string()))?,
                    motor_index: rod.motor,
                    install_pose: rod.install_pose.to_pose(),
                    platform_attachment: rod.platform_attachment.to_pose(),
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        Ok(RobotModel::new(motors, rods)?)
    }
}

/// Reads and validates a robot description file.
pub fn load_description(path: impl AsRef<Path>) -> Result<RobotDescription, ScenarioError> {
    RobotDescription::from_toml_str(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Loads

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeSpec {
    /// `"ee"` for the end-effector.
    Named(String),
    /// Interior node `node ∈ 1..n` of rod `rod` (both 0-based except node 0 is the base).
    Interior { rod: usize, node: usize },
}

impl NodeSpec {
    fn to_node(&self, field: &str) -> Result<NodeRef, ScenarioError> {
        match self {
            NodeSpec::Named(name) if name == "ee" => Ok(NodeRef::EndEffector),
            NodeSpec::Named(name) => Err(invalid(field, format!("unknown node name {name:?}"))),
            NodeSpec::Interior { rod, node } => Ok(NodeRef::Interior {
                rod: *rod,
                node: *node,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrenchEntry {
    pub node: NodeSpec,
    /// Body-frame moment, N·m.
    #[serde(default)]
    pub moment: [f64; 3],
    /// Body-frame force, N.
    #[serde(default)]
    pub force: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulleyEntry {
    pub node: NodeSpec,
    /// World anchor the force points toward, m.
    pub anchor: [f64; 3],
    /// Force magnitude, N.
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadDescription {
    pub format_version: u32,
    #[serde(default)]
    pub wrench: Vec<WrenchEntry>,
    #[serde(default)]
    pub pulley: Vec<PulleyEntry>,
}

impl LoadDescription {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let desc: LoadDescription =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        check_version(desc.format_version)?;
        Ok(desc)
    }

    pub fn prototype_pulley() -> Self {
        Self::from_toml_str(PROTOTYPE_PULLEY_LOAD).expect("shipped load description is valid")
    }

    pub fn to_load_set(&self, model: &RobotModel) -> Result<LoadSet, ScenarioError> {
        let mut set = LoadSet::none();
        for (i, w) in self.wrench.iter().enumerate() {
            set.nodal_wrenches.push(NodalWrench {
                node: w.node.to_node(&format!("wrench[{i}].node"))?,
                wrench: twist(&vec3(&w.moment), &vec3(&w.force)),
            });
        }
        for (i, p) in self.pulley.iter().enumerate() {
            if !(p.magnitude >= 0.0 && p.magnitude.is_finite()) {
                return Err(invalid(format!("pulley[{i}].magnitude"), "must be non-negative"));
            }
            set.pulley_loads.push(PulleyLoad {
                node: p.node.to_node(&format!("pulley[{i}].node"))?,
                anchor: vec3(&p.anchor),
                magnitude: p.magnitude,
            });
        }
        set.validate(model)?;
        Ok(set)
    }
}

pub fn load_loads(path: impl AsRef<Path>) -> Result<LoadDescription, ScenarioError> {
    LoadDescription::from_toml_str(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Actuation protocol

fn default_amplitude() -> f64 {
    PI / 12.0
}

fn default_offset() -> f64 {
    1.0
}

fn default_phase_shifts() -> Vec<f64> {
    vec![0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0]
}

fn default_true() -> bool {
    true
}

/// `θᵢ(t) = −amplitude·(sin(ω t + φᵢ) + offset)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuationProtocol {
    pub format_version: u32,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_offset")]
    pub offset: f64,
    /// One phase per motor, rad.
    #[serde(default = "default_phase_shifts")]
    pub phase_shifts: Vec<f64>,
    /// Angular frequency, rad/s.
    pub omega: f64,
    /// Duration of the constant-speed ramp from zero angles to θ(0), s.
    pub ramp_duration: f64,
    /// Uniform phase samples over one period.
    pub phase_samples: usize,
    /// Record the zero-angle start as the first sample.
    #[serde(default = "default_true")]
    pub include_zero_sample: bool,
}

/// One recorded actuation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSample {
    /// 1-based sample index.
    pub index: usize,
    /// Wall-clock time since the start of the experiment, s.
    pub time: f64,
    /// Phase `ω t` within the period, or `None` for the zero-angle start.
    pub phase: Option<f64>,
    pub theta: Vec<f64>,
}

impl ActuationProtocol {
    /// Three-phase protocol with the default amplitude and phases.
    pub fn three_phase(omega: f64, ramp_duration: f64, phase_samples: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            amplitude: default_amplitude(),
            offset: default_offset(),
            phase_shifts: default_phase_shifts(),
            omega,
            ramp_duration,
            phase_samples,
            include_zero_sample: true,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let p: ActuationProtocol =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn prototype() -> Self {
        Self::from_toml_str(PROTOTYPE_PROTOCOL).expect("shipped protocol is valid")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        check_version(self.format_version)?;
        if self.phase_samples == 0 {
            return Err(invalid("phase_samples", "must be at least 1"));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(invalid("omega", "must be positive"));
        }
        if !(self.ramp_duration >= 0.0) {
            return Err(invalid("ramp_duration", "must be non-negative"));
        }
        if self.phase_shifts.is_empty() {
            return Err(invalid("phase_shifts", "at least one motor phase is required"));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    /// Motor angles at time `t` of the periodic regime (`t = 0` ends the ramp).
    pub fn theta_at(&self, t: f64) -> Vec<f64> {
        self.phase_shifts
            .iter()
            .map(|phi| -self.amplitude * ((self.omega * t + phi).sin() + self.offset))
            .collect()
    }

    /// Motor angles after one full period, which close the trajectory.
    pub fn closure_theta(&self) -> Vec<f64> {
        self.theta_at(self.period())
    }

    pub fn motor_count(&self) -> usize {
        self.phase_shifts.len()
    }
}

/// Zero-angle start (optional), then `phase_samples` uniform phases starting at θ(0).
pub fn generate_protocol(p: &ActuationProtocol) -> Vec<ProtocolSample> {
    let mut out = Vec::with_capacity(p.phase_samples + 1);
    if p.include_zero_sample {
        out.push(ProtocolSample {
            index: 1,
            time: 0.0,
            phase: None,
            theta: vec![0.0; p.motor_count()],
        });
    }
    let period = p.period();
    for j in 0..p.phase_samples {
        let t = period * j as f64 / p.phase_samples as f64;
        out.push(ProtocolSample {
            index: out.len() + 1,
            time: p.ramp_duration + t,
            phase: Some(p.omega * t),
            theta: p.theta_at(t),
        });
    }
    out
}

pub fn load_protocol(path: impl AsRef<Path>) -> Result<ActuationProtocol, ScenarioError> {
    ActuationProtocol::from_toml_str(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Trajectory records

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub index: usize,
    pub motor_angles: Vec<f64>,
    /// End-effector position in the global frame, m.
    pub ee_position: [f64; 3],
    /// Row-major end-effector rotation.
    pub ee_rotation: [[f64; 3]; 3],
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

impl TrajectorySample {
    pub fn position(&self) -> Vector3<f64> {
        vec3(&self.ee_position)
    }

    pub fn ee_pose(&self) -> Pose {
        Pose::new(from_rows(&self.ee_rotation), self.position())
    }

    pub fn from_report(index: usize, theta: &[f64], report: &SolveReport) -> Self {
        let ee = report.final_state.ee_pose;
        Self {
            index,
            motor_angles: theta.to_vec(),
            ee_position: [ee.position.x, ee.position.y, ee.position.z],
            ee_rotation: rows(&ee.rotation),
            converged: report.converged,
            iterations: report.iterations,
            residual: report.final_residual(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeStation {
    /// Arc length from the rod base, m.
    pub arc_length: f64,
    pub position: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RodShape {
    pub rod: usize,
    pub stations: Vec<ShapeStation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub samples: Vec<TrajectorySample>,
    /// Per sample, one shape per rod; empty when shapes were not requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shapes: Vec<Vec<RodShape>>,
}

/// Samples every rod at `stations_per_element` equal sub-steps per element
/// plus the tip node.
pub fn rod_shapes(
    model: &RobotModel,
    q: &GeneralizedState,
    stations_per_element: usize,
) -> Result<Vec<RodShape>, AssemblyError> {
    let per = stations_per_element.max(1);
    let mut shapes = Vec::with_capacity(model.rods().len());
    for (k, rod) in model.rods().iter().enumerate() {
        let mut stations = Vec::with_capacity(rod.element_count * per + 1);
        let mut push = |arc: f64, g: Pose| {
            stations.push(ShapeStation {
                arc_length: arc,
                position: [g.position.x, g.position.y, g.position.z],
                rotation: rows(&g.rotation),
            })
        };
        for e in 0..rod.element_count {
            let state = q.element_state(model, k, e);
            let kin = recover_kinematics(&state).map_err(|source| AssemblyError::Element {
                rod: k,
                element: e,
                source,
            })?;
            for i in 0..per {
                let s = rod.element_length * i as f64 / per as f64;
                let g = interpolate_pose(&state, &kin, s).map_err(|source| AssemblyError::Element {
                    rod: k,
                    element: e,
                    source,
                })?;
                push(e as f64 * rod.element_length + s, g);
            }
        }
        push(rod.length(), q.rod_node_pose(model, k, rod.element_count));
        shapes.push(RodShape { rod: k, stations });
    }
    Ok(shapes)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    /// Stations per element for shape export; `None` skips shapes.
    pub shape_stations: Option<usize>,
    /// Start each sample from the previous equilibrium.
    pub warm_start: bool,
    /// Unrecorded intermediate solves along the ramp from zero angles to θ(0).
    pub ramp_steps: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            shape_stations: None,
            warm_start: true,
            ramp_steps: 0,
        }
    }
}

#[derive(Debug, Error)]
#[error("sweep failed at sample {failed_index}: {source}")]
pub struct SweepError {
    pub failed_index: usize,
    pub partial: TrajectoryRecord,
    #[source]
    pub source: SolveError,
}

fn prescribed(config: &SolverConfig) -> SolverConfig {
    SolverConfig {
        theta_mode: ThetaMode::Prescribed,
        ..config.clone()
    }
}

/// Deepest bisection level of the actuation continuation (2⁶ substeps).
pub const MAX_CONTINUATION_DEPTH: usize = 6;

/// Newton iterations allowed before a continuation step is bisected.
pub const CONTINUATION_ATTEMPT_ITERATIONS: usize = 25;

fn add_iterations(mut report: SolveReport, extra: usize) -> SolveReport {
    report.iterations += extra;
    report
}

fn failed_iterations(err: &SolveError) -> usize {
    match err {
        SolveError::NoConvergence(report) => report.iterations,
        _ => 0,
    }
}

/// Prescribed-angle equilibrium from the straight initial guess.
///
/// If Newton from the straight guess fails, angles and loads are ramped up
/// together from the unloaded zero-angle equilibrium.
pub fn solve_at(
    model: &RobotModel,
    theta: &[f64],
    loads: &LoadSet,
    config: &SolverConfig,
) -> Result<SolveReport, SolveError> {
    let config = prescribed(config);
    let err = match solve(model, &initial_guess(model, theta), loads, &config) {
        Ok(report) => return Ok(report),
        Err(err @ SolveError::NoConvergence(_)) => err,
        Err(err) => return Err(err),
    };
    let zero = vec![0.0; model.motors().len()];
    let origin = solve(model, &initial_guess(model, &zero), &LoadSet::none(), &config)?;
    let spent = failed_iterations(&err) + origin.iterations;
    let path = |lambda: f64| {
        let angles = theta.iter().map(|t| lambda * t).collect();
        (angles, loads.scaled(lambda))
    };
    continuation(model, &origin.final_state, &path, 0.0, 1.0, &config, 0)
        .map(|r| add_iterations(r, spent))
}

/// Prescribed-angle equilibrium starting from `previous` with new motor angles.
///
/// When Newton from `previous` fails, the angle change is bisected and each
/// part solved in turn, down to [`MAX_CONTINUATION_DEPTH`] levels. The
/// returned report is the last solve's, with `iterations` counting every
/// Newton iteration spent, failed attempts included.
pub fn solve_warm(
    model: &RobotModel,
    previous: &GeneralizedState,
    theta: &[f64],
    loads: &LoadSet,
    config: &SolverConfig,
) -> Result<SolveReport, SolveError> {
    let start = previous.motor_angles.clone();
    let path = |lambda: f64| {
        let angles = start
            .iter()
            .zip(theta)
            .map(|(a, b)| a + lambda * (b - a))
            .collect();
        (angles, loads.clone())
    };
    continuation(model, previous, &path, 0.0, 1.0, &prescribed(config), 0)
}

/// Solves at `path(hi)` from the equilibrium `previous` at `path(lo)`,
/// bisecting `[lo, hi]` on failure.
fn continuation(
    model: &RobotModel,
    previous: &GeneralizedState,
    path: &dyn Fn(f64) -> (Vec<f64>, LoadSet),
    lo: f64,
    hi: f64,
    config: &SolverConfig,
    depth: usize,
) -> Result<SolveReport, SolveError> {
    let (theta, loads) = path(hi);
    let mut q0 = previous.clone();
    q0.motor_angles = theta;
    let budget = if depth > 0 && depth < MAX_CONTINUATION_DEPTH {
        config.max_iterations.min(CONTINUATION_ATTEMPT_ITERATIONS)
    } else {
        config.max_iterations
    };
    let attempt = SolverConfig {
        max_iterations: budget,
        ..config.clone()
    };
    let err = match solve(model, &q0, &loads, &attempt) {
        Ok(report) => return Ok(report),
        Err(err @ SolveError::NoConvergence(_)) if depth < MAX_CONTINUATION_DEPTH => err,
        Err(err) => return Err(err),
    };
    let mid = 0.5 * (lo + hi);
    let half = continuation(model, previous, path, lo, mid, config, depth + 1)?;
    let spent = failed_iterations(&err) + half.iterations;
    continuation(model, &half.final_state, path, mid, hi, config, depth + 1)
        .map(|r| add_iterations(r, spent))
}

/// Solves the statics at every protocol sample.
pub fn run_sweep(
    model: &RobotModel,
    protocol: &ActuationProtocol,
    loads: &LoadSet,
    config: &SolverConfig,
    options: &SweepOptions,
) -> Result<TrajectoryRecord, SweepError> {
    let samples = generate_protocol(protocol);
    let fail = |index: usize, partial: TrajectoryRecord, source: SolveError| SweepError {
        failed_index: index,
        partial,
        source,
    };
    if protocol.motor_count() != model.motors().len() {
        return Err(fail(
            samples.first().map_or(1, |s| s.index),
            TrajectoryRecord::default(),
            SolveError::InvalidConfig(format!(
                "protocol drives {} motors, robot has {}",
                protocol.motor_count(),
                model.motors().len()
            )),
        ));
    }

    let mut record = TrajectoryRecord::default();
    let finish = |record: &mut TrajectoryRecord,
                  sample: &ProtocolSample,
                  report: &SolveReport|
     -> Result<(), SolveError> {
        record
            .samples
            .push(TrajectorySample::from_report(sample.index, &sample.theta, report));
        if let Some(per) = options.shape_stations {
            record
                .shapes
                .push(rod_shapes(model, &report.final_state, per)?);
        }
        Ok(())
    };

    if !options.warm_start {
        let reports: Vec<Result<SolveReport, SolveError>> = samples
            .par_iter()
            .map(|s| solve_at(model, &s.theta, loads, config))
            .collect();
        for (sample, report) in samples.iter().zip(reports) {
            let report = report.map_err(|e| fail(sample.index, record.clone(), e))?;
            finish(&mut record, sample, &report).map_err(|e| fail(sample.index, record.clone(), e))?;
        }
        return Ok(record);
    }

    let mut previous: Option<GeneralizedState> = None;
    for sample in &samples {
        let result = (|| {
            let Some(mut state) = previous.take() else {
                return solve_at(model, &sample.theta, loads, config);
            };
            if sample.phase == Some(0.0) && options.ramp_steps > 0 {
                let start = state.motor_angles.clone();
                for step in 1..options.ramp_steps {
                    let t = step as f64 / options.ramp_steps as f64;
                    let theta: Vec<f64> = start
                        .iter()
                        .zip(&sample.theta)
                        .map(|(a, b)| a + t * (b - a))
                        .collect();
                    state = solve_warm(model, &state, &theta, loads, config)?.final_state;
                }
            }
            solve_warm(model, &state, &sample.theta, loads, config)
        })();
        let report = result.map_err(|e| fail(sample.index, record.clone(), e))?;
        finish(&mut record, sample, &report).map_err(|e| fail(sample.index, record.clone(), e))?;
        previous = Some(report.final_state);
    }
    Ok(record)
}

// ---------------------------------------------------------------------------
// Error metrics

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorMetrics {
    /// `e_k = ‖p_ref − p_sim‖` per sample, mm.
    pub per_sample_mm: Vec<f64>,
    pub mean_mm: f64,
    pub max_mm: f64,
}

/// Pointwise end-effector position errors, reported in millimetres.
pub fn compute_error_metrics(
    sim: &TrajectoryRecord,
    reference: &TrajectoryRecord,
) -> Result<ErrorMetrics, ScenarioError> {
    if sim.samples.len() != reference.samples.len() {
        return Err(ScenarioError::SampleMismatch {
            sim: sim.samples.len(),
            reference: reference.samples.len(),
        });
    }
    let per_sample_mm: Vec<f64> = sim
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(s, r)| 1e3 * (r.position() - s.position()).norm())
        .collect();
    let n = per_sample_mm.len();
    let mean_mm = if n == 0 {
        0.0
    } else {
        per_sample_mm.iter().sum::<f64>() / n as f64
    };
    let max_mm = per_sample_mm.iter().copied().fold(0.0, f64::max);
    Ok(ErrorMetrics {
        per_sample_mm,
        mean_mm,
        max_mm,
    })
}

// ---------------------------------------------------------------------------
// Export

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    /// `.json` selects JSON; everything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => ExportFormat::Json,
            _ => ExportFormat::Csv,
        }
    }
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with header `index,theta_1..theta_M,x,y,z,residual,iterations`.
pub fn to_csv_string(record: &TrajectoryRecord, motor_count: usize) -> String {
    let mut out = String::from("index");
    for m in 1..=motor_count {
        let _ = write!(out, ",theta_{m}");
    }
    out.push_str(",x,y,z,residual,iterations\n");
    for s in &record.samples {
        let _ = write!(out, "{}", s.index);
        for m in 0..motor_count {
            let theta = s.motor_angles.get(m).copied().unwrap_or(f64::NAN);
            let _ = write!(out, ",{}", fmt17(theta));
        }
        for x in s.ee_position {
            let _ = write!(out, ",{}", fmt17(x));
        }
        let _ = writeln!(out, ",{},{}", fmt17(s.residual), s.iterations);
    }
    out
}

pub fn to_json_string(record: &TrajectoryRecord) -> Result<String, ScenarioError> {
    Ok(serde_json::to_string_pretty(record)?)
}

pub fn export(
    record: &TrajectoryRecord,
    format: ExportFormat,
    path: impl AsRef<Path>,
) -> Result<(), ScenarioError> {
    let motor_count = record
        .samples
        .first()
        .map_or(0, |s| s.motor_angles.len());
    let text = match format {
        ExportFormat::Csv => to_csv_string(record, motor_count),
        ExportFormat::Json => to_json_string(record)?,
    };
    write_file(path.as_ref(), &text)
}

/// Parses a trajectory CSV. Only `x`, `y`, `z` are required; `index`,
/// `theta_*`, `residual` and `iterations` are read when present.
pub fn parse_csv(text: &str) -> Result<TrajectoryRecord, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let (x, y, z) = match (column("x"), column("y"), column("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(invalid("csv header", "columns x, y and z are required")),
    };
    let mut thetas: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| Some((h.strip_prefix("theta_")?.parse().ok()?, i)))
        .collect();
    thetas.sort();
    let index = column("index");
    let residual = column("residual");
    let iterations = column("iterations");

    let mut record = TrajectoryRecord::default();
    for (row, result) in reader.records().enumerate() {
        let rec = result?;
        let num = |col: usize| -> Result<f64, ScenarioError> {
            rec.get(col)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| invalid(format!("csv row {}", row + 1), e.to_string()))
        };
        let count = |col: usize| -> Result<usize, ScenarioError> {
            rec.get(col)
                .unwrap_or("")
                .parse::<usize>()
                .map_err(|e| invalid(format!("csv row {}", row + 1), e.to_string()))
        };
        record.samples.push(TrajectorySample {
            index: index.map(count).transpose()?.unwrap_or(row + 1),
            motor_angles: thetas.iter().map(|&(_, c)| num(c)).collect::<Result<_, _>>()?,
            ee_position: [num(x)?, num(y)?, num(z)?],
            ee_rotation: rows(&Matrix3::identity()),
            converged: true,
            iterations: iterations.map(count).transpose()?.unwrap_or(0),
            residual: residual.map(num).transpose()?.unwrap_or(0.0),
        });
    }
    Ok(record)
}

/// Reads a trajectory from CSV or JSON (chosen by extension).
pub fn read_record(path: impl AsRef<Path>) -> Result<TrajectoryRecord, ScenarioError> {
    let path = path.as_ref();
    let text = read_file(path)?;
    match ExportFormat::from_path(path) {
        ExportFormat::Json => Ok(serde_json::from_str(&text)?),
        ExportFormat::Csv => parse_csv(&text),
    }
}
