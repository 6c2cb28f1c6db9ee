//! Robot topology and global assembly.
//!
//! Generalized coordinates are `q = [θ; g_ee; interior poses; β]` on
//! `ℝ^M × SE(3)^{N_g} × ℝ^{6N_β}`. Boundary nodes are not unknowns: the
//! first node of rod `k` follows its motor, `g_{k,0} = G_m(θ_m)·g⁰_{k,0}`,
//! and the last node rides on the platform, `g_{k,n} = g_ee·g^loc_{b,k}`.
//!
//! The element-to-global maps are index maps. A boundary block contracts
//! through `S_k` (6-vector into one motor slot) or through `Ad((g^loc)⁻¹)`
//! (into the end-effector slot); everything else is copied.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};
use thiserror::Error;

use crate::element::{
    element_energy, element_geometric_tangent, element_residual, element_tangent,
    recover_kinematics, ElementError,
    ElementKinematics, ElementMatrix, ElementMaterial, ElementState, ElementVector,
};
use crate::lie::{linear, skew, so3_exp, twist, Pose, Twist, Wrench};

/// Distance below which a pulley anchor is considered to coincide with its node.
pub const PULLEY_MIN_DISTANCE: f64 = 1e-9;

const UNIT_TOL: f64 = 1e-12;
const POSE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("rod {rod}, element {element}: {source}")]
    Element {
        rod: usize,
        element: usize,
        #[source]
        source: ElementError,
    },
    #[error("pulley anchor coincides with node {node} (distance {distance:e} m)")]
    PulleyCoincident { node: NodeRef, distance: f64 },
    #[error("node {0} is not an independent node of this robot")]
    InvalidNode(NodeRef),
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
    #[error("state does not match the robot topology: {0}")]
    StateShape(String),
}

/// Revolute joint about a fixed world axis through `point`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotorAxis {
    direction: Vector3<f64>,
    point: Vector3<f64>,
}

impl MotorAxis {
    pub fn new(direction: Vector3<f64>, point: Vector3<f64>) -> Result<Self, AssemblyError> {
        let norm = direction.norm();
        if !((norm - 1.0).abs() <= UNIT_TOL) {
            return Err(AssemblyError::InvalidModel(format!(
                "motor axis direction must be a unit vector (norm {norm})"
            )));
        }
        if point.iter().any(|x| !x.is_finite()) {
            return Err(AssemblyError::InvalidModel("motor axis point is not finite".into()));
        }
        Ok(Self { direction, point })
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.direction
    }

    pub fn point(&self) -> Vector3<f64> {
        self.point
    }

    /// Spatial twist `[a; −a×c]` of the joint.
    pub fn spatial_twist(&self) -> Twist {
        twist(&self.direction, &(-self.direction.cross(&self.point)))
    }

    /// `G(θ)`: `x ↦ c + R(θ)(x − c)`.
    pub fn transform(&self, theta: f64) -> Pose {
        let r = so3_exp(&(self.direction * theta));
        Pose::new(r, self.point - r * self.point)
    }

    /// The same axis seen after a rigid change of world frame.
    pub fn transformed(&self, frame: &Pose) -> MotorAxis {
        MotorAxis {
            direction: frame.rotation * self.direction,
            point: frame.transform_point(&self.point),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RodSpec {
    pub element_count: usize,
    pub element_length: f64,
    pub material: ElementMaterial,
    pub motor_index: usize,
    /// Base node pose at zero motor angle.
    pub install_pose: Pose,
    /// Tip node pose relative to the end-effector frame.
    pub platform_attachment: Pose,
}

impl RodSpec {
    pub fn length(&self) -> f64 {
        self.element_count as f64 * self.element_length
    }
}

/// Independent node carrying a pose unknown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeRef {
    EndEffector,
    /// Node `node ∈ 1..n_k` of rod `rod` (0-based rod index).
    Interior { rod: usize, node: usize },
}

impl std::fmt::Display for NodeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeRef::EndEffector => write!(f, "ee"),
            NodeRef::Interior { rod, node } => write!(f, "rod {rod} node {node}"),
        }
    }
}

/// Offsets of each variable block in the global tangent vector.
///
/// Layout: `[θ (M) | ee (6) | interior nodes, rod-major (6 each) | β, rod-major (6 each)]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    motor_count: usize,
    ee: usize,
    interior: Vec<Vec<usize>>,
    slopes: Vec<Vec<usize>>,
    dim: usize,
}

impl IndexMap {
    pub fn new(motor_count: usize, element_counts: &[usize]) -> Self {
        let ee = motor_count;
        let mut next = ee + 6;
        let mut interior = Vec::with_capacity(element_counts.len());
        for &n in element_counts {
            let offsets: Vec<usize> = (0..n.saturating_sub(1)).map(|i| next + 6 * i).collect();
            next += 6 * offsets.len();
            interior.push(offsets);
        }
        let mut slopes = Vec::with_capacity(element_counts.len());
        for &n in element_counts {
            let offsets: Vec<usize> = (0..n).map(|i| next + 6 * i).collect();
            next += 6 * n;
            slopes.push(offsets);
        }
        Self {
            motor_count,
            ee,
            interior,
            slopes,
            dim: next,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn motor_count(&self) -> usize {
        self.motor_count
    }

    pub fn ee_offset(&self) -> usize {
        self.ee
    }

    /// Offset of interior node `node ∈ 1..n_k` of `rod`.
    pub fn interior_offset(&self, rod: usize, node: usize) -> usize {
        self.interior[rod][node - 1]
    }

    pub fn slope_offset(&self, rod: usize, element: usize) -> usize {
        self.slopes[rod][element]
    }

    pub fn node_offset(&self, node: NodeRef) -> Option<usize> {
        match node {
            NodeRef::EndEffector => Some(self.ee),
            NodeRef::Interior { rod, node } => {
                if node == 0 {
                    return None;
                }
                self.interior.get(rod)?.get(node - 1).copied()
            }
        }
    }

    /// `N_g`: end-effector plus all interior nodes.
    pub fn pose_count(&self) -> usize {
        1 + self.interior.iter().map(Vec::len).sum::<usize>()
    }

    /// `N_β`: total element count.
    pub fn slope_count(&self) -> usize {
        self.slopes.iter().map(Vec::len).sum()
    }
}

/// Base motors, rods and the variable layout derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    motors: Vec<MotorAxis>,
    rods: Vec<RodSpec>,
    index: IndexMap,
}

impl RobotModel {
    pub fn new(motors: Vec<MotorAxis>, rods: Vec<RodSpec>) -> Result<Self, AssemblyError> {
        if rods.is_empty() {
            return Err(AssemblyError::InvalidModel("robot has no rods".into()));
        }
        for (k, rod) in rods.iter().enumerate() {
            if rod.element_count == 0 {
                return Err(AssemblyError::InvalidModel(format!("rod {k} has no elements")));
            }
            if !(rod.element_length > 0.0) || !rod.element_length.is_finite() {
                return Err(AssemblyError::InvalidModel(format!(
                    "rod {k} has non-positive element length {}",
                    rod.element_length
                )));
            }
            if rod.motor_index >= motors.len() {
                return Err(AssemblyError::InvalidModel(format!(
                    "rod {k} references motor {} but only {} motors exist",
                    rod.motor_index,
                    motors.len()
                )));
            }
            for (what, pose) in [
                ("install pose", &rod.install_pose),
                ("platform attachment", &rod.platform_attachment),
            ] {
                if !pose.is_valid(POSE_TOL) {
                    return Err(AssemblyError::InvalidModel(format!(
                        "rod {k} {what} is not a rigid transform"
                    )));
                }
            }
        }
        let counts: Vec<usize> = rods.iter().map(|r| r.element_count).collect();
        let index = IndexMap::new(motors.len(), &counts);
        Ok(Self {
            motors,
            rods,
            index,
        })
    }

    pub fn motors(&self) -> &[MotorAxis] {
        &self.motors
    }

    pub fn rods(&self) -> &[RodSpec] {
        &self.rods
    }

    pub fn index(&self) -> &IndexMap {
        &self.index
    }

    pub fn tangent_dim(&self) -> usize {
        self.index.dim()
    }

    /// The same robot with all world-fixed data moved by `frame`.
    pub fn transformed(&self, frame: &Pose) -> RobotModel {
        let motors = self.motors.iter().map(|m| m.transformed(frame)).collect();
        let rods = self
            .rods
            .iter()
            .map(|r| RodSpec {
                install_pose: frame * &r.install_pose,
                ..r.clone()
            })
            .collect();
        RobotModel {
            motors,
            rods,
            index: self.index.clone(),
        }
    }
}

/// A point of the configuration manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizedState {
    pub motor_angles: Vec<f64>,
    pub ee_pose: Pose,
    /// Per rod, nodes `1..n_k` in order.
    pub interior_poses: Vec<Vec<Pose>>,
    /// Per rod, one slope per element.
    pub slopes: Vec<Vec<Twist>>,
}

impl GeneralizedState {
    pub fn check_shape(&self, model: &RobotModel) -> Result<(), AssemblyError> {
        if self.motor_angles.len() != model.motors.len() {
            return Err(AssemblyError::StateShape(format!(
                "{} motor angles for {} motors",
                self.motor_angles.len(),
                model.motors.len()
            )));
        }
        if self.interior_poses.len() != model.rods.len() || self.slopes.len() != model.rods.len() {
            return Err(AssemblyError::StateShape("rod count mismatch".into()));
        }
        for (k, rod) in model.rods.iter().enumerate() {
            if self.interior_poses[k].len() != rod.element_count - 1 {
                return Err(AssemblyError::StateShape(format!(
                    "rod {k} has {} interior poses, expected {}",
                    self.interior_poses[k].len(),
                    rod.element_count - 1
                )));
            }
            if self.slopes[k].len() != rod.element_count {
                return Err(AssemblyError::StateShape(format!(
                    "rod {k} has {} slopes, expected {}",
                    self.slopes[k].len(),
                    rod.element_count
                )));
            }
        }
        Ok(())
    }

    /// Pose of node `j ∈ 0..=n_k` of `rod`, boundary nodes through their embeddings.
    pub fn rod_node_pose(&self, model: &RobotModel, rod: usize, j: usize) -> Pose {
        let spec = &model.rods[rod];
        if j == 0 {
            let m = spec.motor_index;
            base_embedding(spec, &model.motors[m], self.motor_angles[m]).0
        } else if j == spec.element_count {
            platform_embedding(spec, &self.ee_pose).0
        } else {
            self.interior_poses[rod][j - 1]
        }
    }

    pub fn node_pose(&self, node: NodeRef) -> Option<Pose> {
        match node {
            NodeRef::EndEffector => Some(self.ee_pose),
            NodeRef::Interior { rod, node } if node > 0 => {
                self.interior_poses.get(rod)?.get(node - 1).copied()
            }
            NodeRef::Interior { .. } => None,
        }
    }

    pub fn element_state(&self, model: &RobotModel, rod: usize, element: usize) -> ElementState {
        ElementState {
            pose_a: self.rod_node_pose(model, rod, element),
            pose_b: self.rod_node_pose(model, rod, element + 1),
            slope: self.slopes[rod][element],
            length: model.rods[rod].element_length,
        }
    }

    /// Every pose unknown.
    pub fn poses(&self) -> impl Iterator<Item = &Pose> {
        std::iter::once(&self.ee_pose).chain(self.interior_poses.iter().flatten())
    }

    /// The same configuration after a rigid change of world frame.
    pub fn transformed(&self, frame: &Pose) -> GeneralizedState {
        GeneralizedState {
            motor_angles: self.motor_angles.clone(),
            ee_pose: frame * &self.ee_pose,
            interior_poses: self
                .interior_poses
                .iter()
                .map(|rod| rod.iter().map(|g| frame * g).collect())
                .collect(),
            slopes: self.slopes.clone(),
        }
    }
}

/// Base node pose `G_m(θ)·g⁰` and its right-trivialized Jacobian
/// `S = Ad(Φ(θ)⁻¹)·[a; −a×c]`.
pub fn base_embedding(rod: &RodSpec, axis: &MotorAxis, theta: f64) -> (Pose, Twist) {
    let pose = axis.transform(theta) * rod.install_pose;
    let jacobian = pose.inverse().adjoint() * axis.spatial_twist();
    (pose, jacobian)
}

/// Tip node pose `g_ee·g^loc` and the map `Ad((g^loc)⁻¹)` from `δζ_ee` to its increment.
pub fn platform_embedding(rod: &RodSpec, ee: &Pose) -> (Pose, Matrix6<f64>) {
    (
        ee * &rod.platform_attachment,
        rod.platform_attachment.inverse().adjoint(),
    )
}

/// Where one 6-block of an element's `δx` lives in the global tangent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockTarget {
    /// `δζ = S·δθ_slot`.
    Motor { slot: usize, jacobian: Twist },
    /// `δζ = map·δζ_ee`.
    EndEffector { offset: usize, map: Matrix6<f64> },
    /// `δζ` (or `δβ`) copied from the global vector.
    Direct { offset: usize },
}

impl BlockTarget {
    fn offset(&self) -> usize {
        match *self {
            BlockTarget::Motor { slot, .. } => slot,
            BlockTarget::EndEffector { offset, .. } | BlockTarget::Direct { offset } => offset,
        }
    }

    /// The 6×w block `T` with `δx_block = T·δq[offset..offset+w]`.
    fn map(&self) -> DMatrix<f64> {
        match self {
            BlockTarget::Motor { jacobian, .. } => DMatrix::from_column_slice(6, 1, jacobian.as_slice()),
            BlockTarget::EndEffector { map, .. } => DMatrix::from_column_slice(6, 6, map.as_slice()),
            BlockTarget::Direct { .. } => DMatrix::identity(6, 6),
        }
    }
}

/// Index-map realization of the element selector `P_{k,e}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementProjection {
    pub blocks: [BlockTarget; 3],
}

impl ElementProjection {
    pub fn new(model: &RobotModel, q: &GeneralizedState, rod: usize, element: usize) -> Self {
        let spec = &model.rods[rod];
        let node_target = |j: usize| {
            if j == 0 {
                let m = spec.motor_index;
                let (_, jacobian) = base_embedding(spec, &model.motors[m], q.motor_angles[m]);
                BlockTarget::Motor { slot: m, jacobian }
            } else if j == spec.element_count {
                BlockTarget::EndEffector {
                    offset: model.index.ee_offset(),
                    map: platform_embedding(spec, &q.ee_pose).1,
                }
            } else {
                BlockTarget::Direct {
                    offset: model.index.interior_offset(rod, j),
                }
            }
        };
        Self {
            blocks: [
                node_target(element),
                node_target(element + 1),
                BlockTarget::Direct {
                    offset: model.index.slope_offset(rod, element),
                },
            ],
        }
    }

    /// `r += Pᵀ·γ`.
    pub fn scatter_vector(&self, local: &ElementVector, global: &mut DVector<f64>) {
        for (i, target) in self.blocks.iter().enumerate() {
            let block = local.fixed_rows::<6>(6 * i);
            match target {
                BlockTarget::Motor { slot, jacobian } => global[*slot] += jacobian.dot(&block),
                BlockTarget::EndEffector { offset, map } => {
                    let mut dst = global.fixed_rows_mut::<6>(*offset);
                    dst += map.transpose() * block;
                }
                BlockTarget::Direct { offset } => {
                    let mut dst = global.fixed_rows_mut::<6>(*offset);
                    dst += block;
                }
            }
        }
    }

    /// `δx = P·δq`.
    pub fn gather(&self, global: &DVector<f64>) -> ElementVector {
        let mut local = ElementVector::zeros();
        for (i, target) in self.blocks.iter().enumerate() {
            let block: Twist = match target {
                BlockTarget::Motor { slot, jacobian } => jacobian * global[*slot],
                BlockTarget::EndEffector { offset, map } => map * global.fixed_rows::<6>(*offset),
                BlockTarget::Direct { offset } => global.fixed_rows::<6>(*offset).into_owned(),
            };
            local.fixed_rows_mut::<6>(6 * i).copy_from(&block);
        }
        local
    }

    /// `K += Pᵀ·H·P`.
    pub fn scatter_matrix(&self, local: &ElementMatrix, global: &mut DMatrix<f64>) {
        let maps: Vec<DMatrix<f64>> = self.blocks.iter().map(BlockTarget::map).collect();
        for (i, ti) in self.blocks.iter().enumerate() {
            for (j, tj) in self.blocks.iter().enumerate() {
                let h = local.fixed_view::<6, 6>(6 * i, 6 * j);
                let contribution = maps[i].transpose() * h * &maps[j];
                let mut dst = global.view_mut(
                    (ti.offset(), tj.offset()),
                    (contribution.nrows(), contribution.ncols()),
                );
                dst += &contribution;
            }
        }
    }

    /// Dense 18×dim form of `P`.
    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(18, dim);
        for (i, target) in self.blocks.iter().enumerate() {
            let t = target.map();
            p.view_mut((6 * i, target.offset()), (6, t.ncols()))
                .copy_from(&t);
        }
        p
    }
}

/// Body-frame wrench `[moment; force]` applied at a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodalWrench {
    pub node: NodeRef,
    pub wrench: Wrench,
}

/// Constant-magnitude force pointing from the node toward a world anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PulleyLoad {
    pub node: NodeRef,
    pub anchor: Vector3<f64>,
    pub magnitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadSet {
    pub nodal_wrenches: Vec<NodalWrench>,
    pub pulley_loads: Vec<PulleyLoad>,
}

impl LoadSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.nodal_wrenches.is_empty() && self.pulley_loads.is_empty()
    }

    pub fn validate(&self, model: &RobotModel) -> Result<(), AssemblyError> {
        let nodes = self
            .nodal_wrenches
            .iter()
            .map(|w| w.node)
            .chain(self.pulley_loads.iter().map(|p| p.node));
        for node in nodes {
            if model.index.node_offset(node).is_none() {
                return Err(AssemblyError::InvalidNode(node));
            }
        }
        Ok(())
    }

    /// Every wrench and pulley magnitude multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> LoadSet {
        LoadSet {
            nodal_wrenches: self
                .nodal_wrenches
                .iter()
                .map(|w| NodalWrench {
                    wrench: w.wrench * factor,
                    ..*w
                })
                .collect(),
            pulley_loads: self
                .pulley_loads
                .iter()
                .map(|p| PulleyLoad {
                    magnitude: p.magnitude * factor,
                    ..*p
                })
                .collect(),
        }
    }

    /// Pulley anchors moved by a rigid change of world frame. Body wrenches are unchanged.
    pub fn transformed(&self, frame: &Pose) -> LoadSet {
        LoadSet {
            nodal_wrenches: self.nodal_wrenches.clone(),
            pulley_loads: self
                .pulley_loads
                .iter()
                .map(|p| PulleyLoad {
                    anchor: frame.transform_point(&p.anchor),
                    ..*p
                })
                .collect(),
        }
    }
}

/// Body-frame pulley wrench `[0; Rᵀ·f·d]` for a node at `pose`.
pub fn pulley_wrench(load: &PulleyLoad, pose: &Pose) -> Result<Wrench, AssemblyError> {
    let towards = load.anchor - pose.position;
    let distance = towards.norm();
    if distance < PULLEY_MIN_DISTANCE {
        return Err(AssemblyError::PulleyCoincident {
            node: load.node,
            distance,
        });
    }
    let force = pose.rotation.transpose() * (towards * (load.magnitude / distance));
    Ok(twist(&Vector3::zeros(), &force))
}

/// Derivative of `−[0; Rᵀ·f·d]` with respect to a right perturbation
/// `[δφ; δu]` of the node pose.
pub fn pulley_stiffness(load: &PulleyLoad, pose: &Pose) -> Result<Matrix6<f64>, AssemblyError> {
    let wrench = pulley_wrench(load, pose)?;
    let force = linear(&wrench);
    let towards = load.anchor - pose.position;
    let distance = towards.norm();
    let d = towards / distance;
    let lateral = (Matrix3::identity() - d * d.transpose()) * (load.magnitude / distance);
    let mut k = Matrix6::zeros();
    k.fixed_view_mut::<3, 3>(3, 0).copy_from(&-skew(&force));
    k.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(pose.rotation.transpose() * lateral * pose.rotation));
    Ok(k)
}

/// Per-node body wrenches at the configuration `q`, in load order.
pub fn external_wrenches(
    loads: &LoadSet,
    q: &GeneralizedState,
) -> Result<Vec<NodalWrench>, AssemblyError> {
    let mut out = loads.nodal_wrenches.clone();
    for load in &loads.pulley_loads {
        let pose = q
            .node_pose(load.node)
            .ok_or(AssemblyError::InvalidNode(load.node))?;
        out.push(NodalWrench {
            node: load.node,
            wrench: pulley_wrench(load, &pose)?,
        });
    }
    Ok(out)
}

/// Which tangent [`assemble`] builds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TangentKind {
    /// `Σ Pᵀ(h·BᵀKB)P` with the strain Jacobians held fixed; symmetric
    /// positive semi-definite, but only linearly convergent under load.
    Frozen,
    /// Also builds the exact derivative of the residual, which adds the
    /// geometric stiffness of the section forces and the stiffness of
    /// position-dependent loads. Not symmetric away from equilibrium.
    #[default]
    Consistent,
}

/// One element's contribution, before scattering.
#[derive(Clone, Debug)]
pub struct ElementContribution {
    pub rod: usize,
    pub element: usize,
    pub state: ElementState,
    pub kinematics: ElementKinematics,
    pub projection: ElementProjection,
}

/// Evaluates every element in deterministic order (rods ascending, elements ascending).
pub fn element_contributions(
    model: &RobotModel,
    q: &GeneralizedState,
) -> Result<Vec<ElementContribution>, AssemblyError> {
    q.check_shape(model)?;
    let mut out = Vec::with_capacity(model.index.slope_count());
    for (k, rod) in model.rods.iter().enumerate() {
        for e in 0..rod.element_count {
            let state = q.element_state(model, k, e);
            let kinematics = recover_kinematics(&state).map_err(|source| AssemblyError::Element {
                rod: k,
                element: e,
                source,
            })?;
            out.push(ElementContribution {
                rod: k,
                element: e,
                state,
                kinematics,
                projection: ElementProjection::new(model, q, k, e),
            });
        }
    }
    Ok(out)
}

/// Residual, optional tangent and internal energy at one configuration.
#[derive(Clone, Debug)]
pub struct Assembled {
    pub residual: DVector<f64>,
    /// Frozen-Jacobian tangent, exactly symmetric; present whenever a tangent
    /// was requested.
    pub tangent: Option<DMatrix<f64>>,
    /// Exact residual derivative; present for [`TangentKind::Consistent`].
    pub consistent_tangent: Option<DMatrix<f64>>,
    pub internal_energy: f64,
}

pub fn assemble(
    model: &RobotModel,
    q: &GeneralizedState,
    loads: &LoadSet,
    tangent_kind: Option<TangentKind>,
) -> Result<Assembled, AssemblyError> {
    let dim = model.tangent_dim();
    let contributions = element_contributions(model, q)?;
    let mut residual = DVector::zeros(dim);
    let mut tangent = tangent_kind.map(|_| DMatrix::zeros(dim, dim));
    let mut consistent = (tangent_kind == Some(TangentKind::Consistent))
        .then(|| DMatrix::zeros(dim, dim));
    let mut energy = 0.0;
    for c in &contributions {
        let material = &model.rods[c.rod].material;
        energy += element_energy(&c.state, material, &c.kinematics);
        let gamma = element_residual(&c.state, material, &c.kinematics);
        c.projection.scatter_vector(&gamma, &mut residual);
        let Some(t) = tangent.as_mut() else {
            continue;
        };
        let h = element_tangent(&c.state, material, &c.kinematics);
        c.projection.scatter_matrix(&h, t);
        if let Some(kc) = consistent.as_mut() {
            let g = element_geometric_tangent(&c.state, material, &c.kinematics).map_err(
                |source| AssemblyError::Element {
                    rod: c.rod,
                    element: c.element,
                    source,
                },
            )?;
            c.projection.scatter_matrix(&(h + g), kc);
        }
    }
    if let Some(t) = tangent.as_mut() {
        // Off-diagonal scatter products round differently on each side.
        let sym = (&*t + t.transpose()) * 0.5;
        *t = sym;
    }
    if let Some(kc) = consistent.as_mut() {
        for load in &loads.pulley_loads {
            let pose = q
                .node_pose(load.node)
                .ok_or(AssemblyError::InvalidNode(load.node))?;
            let offset = model
                .index
                .node_offset(load.node)
                .ok_or(AssemblyError::InvalidNode(load.node))?;
            let mut block = kc.fixed_view_mut::<6, 6>(offset, offset);
            block += pulley_stiffness(load, &pose)?;
        }
    }
    loads.validate(model)?;
    for w in external_wrenches(loads, q)? {
        let offset = model
            .index
            .node_offset(w.node)
            .ok_or(AssemblyError::InvalidNode(w.node))?;
        let mut dst = residual.fixed_rows_mut::<6>(offset);
        dst -= w.wrench;
    }
    Ok(Assembled {
        residual,
        tangent,
        consistent_tangent: consistent,
        internal_energy: energy,
    })
}

/// `r(q) = Σ Pᵀγ − Σ Dᵀ F`.
pub fn assemble_residual(
    model: &RobotModel,
    q: &GeneralizedState,
    loads: &LoadSet,
) -> Result<DVector<f64>, AssemblyError> {
    Ok(assemble(model, q, loads, None)?.residual)
}

/// Frozen-Jacobian tangent `K_t(q) = Σ Pᵀ H P` (no load stiffness).
pub fn assemble_tangent(
    model: &RobotModel,
    q: &GeneralizedState,
) -> Result<DMatrix<f64>, AssemblyError> {
    let assembled = assemble(model, q, &LoadSet::none(), Some(TangentKind::Frozen))?;
    Ok(assembled.tangent.expect("tangent requested"))
}

/// Sum of element elastic energies.
pub fn internal_energy(model: &RobotModel, q: &GeneralizedState) -> Result<f64, AssemblyError> {
    Ok(assemble(model, q, &LoadSet::none(), None)?.internal_energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element::straight_natural_strain;
    use crate::lie::Pose;

    fn material() -> ElementMaterial {
        ElementMaterial::from_diagonal([3.0, 3.0, 2.0, 50.0, 50.0, 100.0]).unwrap()
    }

    /// One motor about the world x axis, one rod of `n` elements, tip on the platform.
    fn single_rod(n: usize) -> RobotModel {
        let motor = MotorAxis::new(Vector3::x(), Vector3::new(0.0, 0.1, 0.0)).unwrap();
        let rod = RodSpec {
            element_count: n,
            element_length: 0.1,
            material: material(),
            motor_index: 0,
            install_pose: Pose::from_translation(Vector3::new(0.0, 0.1, 0.0)),
            platform_attachment: Pose::from_translation(Vector3::new(0.0, 0.02, 0.0)),
        };
        RobotModel::new(vec![motor], vec![rod]).unwrap()
    }

    fn natural(model: &RobotModel) -> GeneralizedState {
        let rod = &model.rods()[0];
        let base = rod.install_pose;
        let step = |j: usize| base * Pose::exp(&(straight_natural_strain() * (j as f64 * rod.element_length)));
        let n = rod.element_count;
        GeneralizedState {
            motor_angles: vec![0.0],
            ee_pose: step(n) * rod.platform_attachment.inverse(),
            interior_poses: vec![(1..n).map(step).collect()],
            slopes: vec![vec![Twist::zeros(); n]],
        }
    }

    #[test]
    fn index_map_layout() {
        let idx = IndexMap::new(3, &[4; 6]);
        assert_eq!(idx.dim(), 261);
        assert_eq!(idx.pose_count(), 19);
        assert_eq!(idx.slope_count(), 24);
        assert_eq!(idx.ee_offset(), 3);
        assert_eq!(idx.interior_offset(0, 1), 9);
        assert_eq!(idx.interior_offset(5, 3), 9 + 6 * 17);
        assert_eq!(idx.slope_offset(0, 0), 3 + 6 * 19);
        assert_eq!(idx.slope_offset(5, 3) + 6, 261);
        assert_eq!(idx.node_offset(NodeRef::Interior { rod: 0, node: 0 }), None);
        assert_eq!(idx.node_offset(NodeRef::Interior { rod: 0, node: 4 }), None);
        assert_eq!(idx.node_offset(NodeRef::Interior { rod: 6, node: 1 }), None);
    }

    #[test]
    fn base_embedding_examples() {
        let model = single_rod(2);
        let rod = &model.rods()[0];
        let axis = &model.motors()[0];
        let (pose, _) = base_embedding(rod, axis, 0.0);
        assert_eq!(pose, rod.install_pose);

        let through_origin = MotorAxis::new(Vector3::z(), Vector3::zeros()).unwrap();
        assert_eq!(
            through_origin.spatial_twist(),
            Twist::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0)
        );
        assert!(MotorAxis::new(Vector3::new(1.0, 1.0, 0.0), Vector3::zeros()).is_err());
    }

    #[test]
    fn base_jacobian_matches_finite_difference() {
        let model = single_rod(2);
        let rod = &model.rods()[0];
        let axis = MotorAxis::new(
            Vector3::new(0.3, -0.5, 0.8).normalize(),
            Vector3::new(0.05, -0.02, 0.01),
        )
        .unwrap();
        for theta in [-0.5, 0.0, 0.4, 1.2] {
            let eps = 1e-6;
            let (g0, s) = base_embedding(rod, &axis, theta);
            let (g1, _) = base_embedding(rod, &axis, theta + eps);
            let fd = (g0.inverse() * g1).log().unwrap() / eps;
            assert!((fd - s).abs().max() < 1e-6, "theta {theta}");
        }
    }

    #[test]
    fn platform_embedding_examples() {
        let mut rod = single_rod(1).rods()[0].clone();
        let ee = Pose::exp(&Twist::new(0.2, -0.1, 0.3, 0.01, 0.02, 0.2));
        rod.platform_attachment = Pose::identity();
        let (g, map) = platform_embedding(&rod, &ee);
        assert_eq!(g, ee);
        assert_eq!(map, Matrix6::identity());

        rod.platform_attachment = Pose::from_translation(Vector3::new(0.01, -0.02, 0.03));
        let (_, map) = platform_embedding(&rod, &ee);
        assert_eq!(map.fixed_view::<3, 3>(0, 0), Matrix3::identity());
        assert_eq!(map, rod.platform_attachment.inverse().adjoint());

        rod.platform_attachment = Pose::exp(&Twist::new(0.4, 0.1, -0.3, 0.02, 0.0, -0.01));
        let (g, map) = platform_embedding(&rod, &ee);
        let eps = 1e-6;
        for i in 0..6 {
            let mut v = Twist::zeros();
            v[i] = eps;
            let (gp, _) = platform_embedding(&rod, &(ee * Pose::exp(&v)));
            let fd = (g.inverse() * gp).log().unwrap() / eps;
            assert!((fd - map.column(i)).abs().max() < 1e-6);
        }
    }

    #[test]
    fn pulley_wrench_examples() {
        let load = PulleyLoad {
            node: NodeRef::EndEffector,
            anchor: Vector3::new(0.0, 0.0, 1.0),
            magnitude: 1.0,
        };
        let w = pulley_wrench(&load, &Pose::identity()).unwrap();
        assert_eq!(w, Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0));

        let zero = PulleyLoad { magnitude: 0.0, ..load };
        assert_eq!(pulley_wrench(&zero, &Pose::identity()).unwrap(), Twist::zeros());

        let r = so3_exp(&Vector3::new(0.3, -0.7, 0.2));
        let w = pulley_wrench(&load, &Pose::from_rotation(r)).unwrap();
        let expected = r.transpose() * Vector3::z();
        assert!((crate::lie::linear(&w) - expected).norm() < 1e-15);
        assert_eq!(crate::lie::angular(&w), Vector3::zeros());

        let coincident = PulleyLoad {
            anchor: Vector3::new(0.0, 0.0, 1e-10),
            ..load
        };
        assert!(matches!(
            pulley_wrench(&coincident, &Pose::identity()),
            Err(AssemblyError::PulleyCoincident { .. })
        ));
    }

    #[test]
    fn clamped_natural_rod_has_zero_residual() {
        for n in 1..4 {
            let model = single_rod(n);
            let q = natural(&model);
            let r = assemble_residual(&model, &q, &LoadSet::none()).unwrap();
            assert!(r.amax() < 1e-12, "n = {n}: {}", r.amax());
        }
    }

    #[test]
    fn interior_projection_is_identity_scatter() {
        let model = single_rod(3);
        let q = natural(&model);
        let p = ElementProjection::new(&model, &q, 0, 1);
        assert!(matches!(p.blocks[0], BlockTarget::Direct { .. }));
        assert!(matches!(p.blocks[1], BlockTarget::Direct { .. }));
        let local = ElementVector::from_fn(|i, _| i as f64 + 1.0);
        let mut global = DVector::zeros(model.tangent_dim());
        p.scatter_vector(&local, &mut global);
        let idx = model.index();
        for i in 0..6 {
            assert_eq!(global[idx.interior_offset(0, 1) + i], local[i]);
            assert_eq!(global[idx.interior_offset(0, 2) + i], local[6 + i]);
            assert_eq!(global[idx.slope_offset(0, 1) + i], local[12 + i]);
        }
    }

    #[test]
    fn first_element_contracts_into_motor_slot() {
        let model = single_rod(2);
        let mut q = natural(&model);
        q.motor_angles[0] = 0.3;
        let p = ElementProjection::new(&model, &q, 0, 0);
        let BlockTarget::Motor { slot, jacobian } = p.blocks[0] else {
            panic!("expected motor block")
        };
        assert_eq!(slot, 0);
        let local = ElementVector::from_fn(|i, _| (i as f64).sin());
        let mut global = DVector::zeros(model.tangent_dim());
        p.scatter_vector(&local, &mut global);
        assert_eq!(global[0], jacobian.dot(&local.fixed_rows::<6>(0)));
    }

    #[test]
    fn scatter_matches_dense_projection() {
        for n in [1, 2] {
            let model = single_rod(n);
            let mut q = natural(&model);
            q.motor_angles[0] = 0.2;
            q.ee_pose = q.ee_pose * Pose::exp(&Twist::new(0.05, 0.02, -0.03, 0.01, 0.0, 0.005));
            for s in q.slopes[0].iter_mut() {
                *s = Twist::new(0.1, -0.2, 0.05, 0.01, 0.02, -0.01);
            }
            let dim = model.tangent_dim();
            let assembled = assemble(&model, &q, &LoadSet::none(), Some(TangentKind::Frozen)).unwrap();
            let mut r_dense = DVector::zeros(dim);
            let mut k_dense = DMatrix::zeros(dim, dim);
            for c in element_contributions(&model, &q).unwrap() {
                let m = &model.rods()[c.rod].material;
                let p = c.projection.to_dense(dim);
                let gamma = element_residual(&c.state, m, &c.kinematics);
                let h = element_tangent(&c.state, m, &c.kinematics);
                let gamma = DVector::from_column_slice(gamma.as_slice());
                let h = DMatrix::from_column_slice(18, 18, h.as_slice());
                let dq = DVector::from_fn(dim, |i, _| (i as f64 * 0.37).sin());
                let local = c.projection.gather(&dq);
                assert!((DVector::from_column_slice(local.as_slice()) - &p * &dq).amax() < 1e-14);
                r_dense += p.transpose() * gamma;
                k_dense += p.transpose() * h * &p;
            }
            let scale = k_dense.amax();
            assert!((assembled.residual - r_dense).amax() <= 1e-14 * scale.max(1.0));
            let tangent = assembled.tangent.unwrap();
            assert!((&tangent - k_dense).amax() <= 1e-14 * scale);
            assert_eq!(tangent, tangent.transpose());
        }
    }

    #[test]
    fn element_errors_carry_labels() {
        let model = single_rod(2);
        let mut q = natural(&model);
        q.interior_poses[0][0] = q.interior_poses[0][0] * Pose::exp(&Twist::new(2.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let err = assemble_residual(&model, &q, &LoadSet::none()).unwrap_err();
        assert!(matches!(err, AssemblyError::Element { rod: 0, element: 0, .. }));
    }

    #[test]
    fn load_validation() {
        let model = single_rod(2);
        let q = natural(&model);
        let loads = LoadSet {
            nodal_wrenches: vec![NodalWrench {
                node: NodeRef::Interior { rod: 0, node: 2 },
                wrench: Twist::zeros(),
            }],
            pulley_loads: vec![],
        };
        assert!(matches!(
            assemble_residual(&model, &q, &loads),
            Err(AssemblyError::InvalidNode(_))
        ));
        let loads = LoadSet {
            nodal_wrenches: vec![NodalWrench {
                node: NodeRef::Interior { rod: 0, node: 1 },
                wrench: Twist::new(0.0, 0.0, 0.0, 1.0, 2.0, 3.0),
            }],
            pulley_loads: vec![],
        };
        let r = assemble_residual(&model, &q, &loads).unwrap();
        let off = model.index().interior_offset(0, 1);
        assert_eq!(r[off + 3], -1.0);
        assert_eq!(r[off + 5], -3.0);
    }

    #[test]
    fn model_validation() {
        let model = single_rod(2);
        let mut rod = model.rods()[0].clone();
        rod.motor_index = 3;
        let err = RobotModel::new(model.motors().to_vec(), vec![rod.clone()]).unwrap_err();
        assert!(err.to_string().contains("rod 0"));
        rod.motor_index = 0;
        rod.element_count = 0;
        assert!(RobotModel::new(model.motors().to_vec(), vec![rod]).is_err());
    }
}
