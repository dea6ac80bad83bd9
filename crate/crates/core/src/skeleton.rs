//! Articulated skeleton, joint coordinate containers and the pinhole camera.
//!
//! Conventions used throughout the crate:
//!
//! * 3D coordinates are millimeters, 2D coordinates are pixels.
//! * World frame is Y-up. Camera frame is x right, y down, z forward.
//! * A world point `p` maps to camera coordinates as `R · (p − t)`, so `t`
//!   is the camera center expressed in world coordinates.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("joint {joint} has non-positive camera depth {depth}")]
    NonPositiveDepth { joint: usize, depth: f64 },
    #[error("camera rotation is not a proper rotation (|RᵀR − I| = {0:e})")]
    NotARotation(f64),
    #[error("focal lengths must be positive, got ({0}, {1})")]
    NonPositiveFocal(f64, f64),
    #[error("joint count mismatch: expected {expected}, got {got}")]
    JointCount { expected: usize, got: usize },
    #[error("invalid topology: {0:?}")]
    InvalidTopology(Vec<TopologyViolation>),
    #[error("topology document: {0}")]
    Parse(String),
}

/// Limb groups used for per-group error breakdown.
pub const LIMB_GROUPS: [&str; 4] = ["U.Arms", "L.Arms", "U.Legs", "L.Legs"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub names: Vec<String>,
    pub parent: Vec<usize>,
    pub symmetry_pairs: Vec<(usize, usize)>,
    pub limb_groups: BTreeMap<String, Vec<usize>>,
    pub head_segment: (usize, usize),
    pub root: usize,
}

/// A single violated topology invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyViolation {
    LengthMismatch,
    NotATree,
    ParentOutOfRange(usize),
    LeftEqualsRight(usize),
    OverlappingPairs(usize),
    PairOutOfRange(usize),
    GroupOutOfRange(String),
    HeadSegmentDegenerate,
    RootOutOfRange,
}

impl fmt::Display for TopologyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LengthMismatch => write!(f, "names and parent arrays differ in length"),
            Self::NotATree => write!(f, "not a tree"),
            Self::ParentOutOfRange(j) => write!(f, "parent of joint {j} out of range"),
            Self::LeftEqualsRight(i) => write!(f, "left equals right in symmetry pair {i}"),
            Self::OverlappingPairs(i) => write!(f, "symmetry pair {i} shares a joint with another pair"),
            Self::PairOutOfRange(i) => write!(f, "symmetry pair {i} out of range"),
            Self::GroupOutOfRange(g) => write!(f, "limb group {g} references a joint out of range"),
            Self::HeadSegmentDegenerate => write!(f, "head segment joints invalid or equal"),
            Self::RootOutOfRange => write!(f, "root out of range"),
        }
    }
}

impl SkeletonTopology {
    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    /// The shipped 16-joint body (MPII-style joint set).
    ///
    /// Joint order: pelvis, spine, neck, head_top, l_hip, l_knee, l_ankle,
    /// r_hip, r_knee, r_ankle, l_shoulder, l_elbow, l_wrist, r_shoulder,
    /// r_elbow, r_wrist.
    pub fn default_16() -> Self {
        Self::from_toml(DEFAULT_TOPOLOGY).expect("embedded topology is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, SkeletonError> {
        let doc: TopologyDoc = toml::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
        let index: BTreeMap<&str, usize> = doc.joints.iter().enumerate().map(|(i, j)| (j.name.as_str(), i)).collect();
        let lookup = |name: &str| {
            index.get(name).copied().ok_or_else(|| SkeletonError::Parse(format!("unknown joint {name:?}")))
        };
        let parent = doc
            .joints
            .iter()
            .enumerate()
            .map(|(i, j)| match &j.parent {
                Some(p) => lookup(p),
                None => Ok(i),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let roots: Vec<usize> = (0..parent.len()).filter(|&i| parent[i] == i).collect();
        let root = *roots.first().ok_or_else(|| SkeletonError::Parse("no root joint".into()))?;
        let symmetry_pairs = doc
            .symmetry_pairs
            .iter()
            .map(|[l, r]| Ok((lookup(l)?, lookup(r)?)))
            .collect::<Result<Vec<_>, SkeletonError>>()?;
        let limb_groups = doc
            .limb_groups
            .iter()
            .map(|(g, js)| Ok((g.clone(), js.iter().map(|j| lookup(j)).collect::<Result<Vec<_>, _>>()?)))
            .collect::<Result<BTreeMap<_, _>, SkeletonError>>()?;
        let head_segment = (lookup(&doc.head_segment[0])?, lookup(&doc.head_segment[1])?);
        let topo = Self {
            names: doc.joints.into_iter().map(|j| j.name).collect(),
            parent,
            symmetry_pairs,
            limb_groups,
            head_segment,
            root,
        };
        let violations = topo.validate();
        if violations.is_empty() {
            Ok(topo)
        } else {
            Err(SkeletonError::InvalidTopology(violations))
        }
    }

    pub fn to_toml(&self) -> String {
        let name = |i: usize| self.names[i].clone();
        let doc = TopologyDoc {
            joints: (0..self.joint_count())
                .map(|i| JointDoc { name: name(i), parent: (self.parent[i] != i).then(|| name(self.parent[i])) })
                .collect(),
            symmetry_pairs: self.symmetry_pairs.iter().map(|&(l, r)| [name(l), name(r)]).collect(),
            limb_groups: self
                .limb_groups
                .iter()
                .map(|(g, js)| (g.clone(), js.iter().map(|&j| name(j)).collect()))
                .collect(),
            head_segment: [name(self.head_segment.0), name(self.head_segment.1)],
        };
        toml::to_string(&doc).expect("topology serializes")
    }

    /// Returns every violated invariant; an empty list means the topology is valid.
    pub fn validate(&self) -> Vec<TopologyViolation> {
        let p = self.parent.len();
        let mut out = Vec::new();
        if self.names.len() != p {
            out.push(TopologyViolation::LengthMismatch);
        }
        if self.root >= p {
            out.push(TopologyViolation::RootOutOfRange);
        }
        let mut parents_ok = true;
        for (j, &par) in self.parent.iter().enumerate() {
            if par >= p {
                out.push(TopologyViolation::ParentOutOfRange(j));
                parents_ok = false;
            }
        }
        if parents_ok && !self.is_tree() {
            out.push(TopologyViolation::NotATree);
        }
        let mut seen = vec![false; p];
        for (i, &(l, r)) in self.symmetry_pairs.iter().enumerate() {
            if l >= p || r >= p {
                out.push(TopologyViolation::PairOutOfRange(i));
                continue;
            }
            if l == r {
                out.push(TopologyViolation::LeftEqualsRight(i));
                continue;
            }
            if seen[l] || seen[r] {
                out.push(TopologyViolation::OverlappingPairs(i));
            }
            seen[l] = true;
            seen[r] = true;
        }
        for (g, js) in &self.limb_groups {
            if js.iter().any(|&j| j >= p) {
                out.push(TopologyViolation::GroupOutOfRange(g.clone()));
            }
        }
        let (a, b) = self.head_segment;
        if a == b || a >= p || b >= p {
            out.push(TopologyViolation::HeadSegmentDegenerate);
        }
        out
    }

    fn is_tree(&self) -> bool {
        let p = self.parent.len();
        let self_parents = (0..p).filter(|&j| self.parent[j] == j).count();
        if self_parents != 1 || self.root >= p || self.parent[self.root] != self.root {
            return false;
        }
        // every joint must reach the root within p steps
        (0..p).all(|start| {
            let mut j = start;
            for _ in 0..=p {
                if j == self.root {
                    return true;
                }
                j = self.parent[j];
            }
            false
        })
    }

    /// Non-root joints in an order where every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let p = self.joint_count();
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let cur = order[i];
            order.extend((0..p).filter(|&c| c != cur && self.parent[c] == cur));
            i += 1;
        }
        order.remove(0);
        order
    }

    pub fn children(&self, joint: usize) -> Vec<usize> {
        (0..self.joint_count()).filter(|&c| c != joint && self.parent[c] == joint).collect()
    }

    /// `joint` followed by all of its descendants, parents before children.
    pub fn subtree(&self, joint: usize) -> Vec<usize> {
        let mut out = vec![joint];
        let mut i = 0;
        while i < out.len() {
            let cur = out[i];
            out.extend(self.children(cur));
            i += 1;
        }
        out
    }

    /// Mirror index of every joint (identity for unpaired joints).
    pub fn mirror_map(&self) -> Vec<usize> {
        let mut m: Vec<usize> = (0..self.joint_count()).collect();
        for &(l, r) in &self.symmetry_pairs {
            m[l] = r;
            m[r] = l;
        }
        m
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Serialize, Deserialize)]
struct JointDoc {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TopologyDoc {
    joints: Vec<JointDoc>,
    symmetry_pairs: Vec<[String; 2]>,
    head_segment: [String; 2],
    limb_groups: BTreeMap<String, Vec<String>>,
}

pub const DEFAULT_TOPOLOGY: &str = include_str!("default_skeleton.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    World,
    Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub coords: Vec<[f64; 3]>,
    pub frame: Frame,
}

impl Pose3D {
    pub fn new(coords: Vec<[f64; 3]>, frame: Frame) -> Self {
        Self { coords, frame }
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }

    pub fn joint(&self, j: usize) -> Vector3<f64> {
        Vector3::from(self.coords[j])
    }

    pub fn bone_length(&self, child: usize, parent: usize) -> f64 {
        (self.joint(child) - self.joint(parent)).norm()
    }

    /// Camera-frame depth of every joint minus the root's depth.
    pub fn root_relative_depths(&self, root: usize) -> Vec<f64> {
        let rz = self.coords[root][2];
        self.coords.iter().map(|c| c[2] - rz).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    pub coords: Vec<[f64; 2]>,
}

impl Pose2D {
    pub fn new(coords: Vec<[f64; 2]>) -> Self {
        Self { coords }
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(
        (fx, fy): (f64, f64),
        (cx, cy): (f64, f64),
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, SkeletonError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(SkeletonError::NonPositiveFocal(fx, fy));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(SkeletonError::NotARotation(ortho));
        }
        Ok(Self { fx, fy, cx, cy, rotation, translation })
    }

    /// Camera at `center` looking at `target`, with world +Y as up.
    pub fn look_at(
        focal: f64,
        principal: (f64, f64),
        center: Vector3<f64>,
        target: Vector3<f64>,
    ) -> Result<Self, SkeletonError> {
        let forward = (target - center).normalize();
        let right = forward.cross(&Vector3::y()).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::new((focal, focal), principal, rotation, center)
    }

    pub fn world_to_camera(&self, p: &[f64; 3]) -> [f64; 3] {
        (self.rotation * (Vector3::from(*p) - self.translation)).into()
    }

    pub fn pixel(&self, c: &[f64; 3]) -> [f64; 2] {
        [self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy]
    }
}

/// Projects a world-frame pose, returning the camera-frame pose and its pixels.
pub fn project(pose: &Pose3D, cam: &CameraModel) -> Result<(Pose3D, Pose2D), SkeletonError> {
    let cam_coords: Vec<[f64; 3]> = match pose.frame {
        Frame::World => pose.coords.iter().map(|p| cam.world_to_camera(p)).collect(),
        Frame::Camera => pose.coords.clone(),
    };
    project_camera_frame(&cam_coords, cam).map(|px| (Pose3D::new(cam_coords, Frame::Camera), px))
}

pub(crate) fn project_camera_frame(coords: &[[f64; 3]], cam: &CameraModel) -> Result<Pose2D, SkeletonError> {
    coords
        .iter()
        .enumerate()
        .map(
            |(joint, c)| {
                if c[2] <= 0.0 {
                    Err(SkeletonError::NonPositiveDepth { joint, depth: c[2] })
                } else {
                    Ok(cam.pixel(c))
                }
            },
        )
        .collect::<Result<Vec<_>, _>>()
        .map(Pose2D::new)
}

pub fn validate_topology(topology: &SkeletonTopology) -> Vec<TopologyViolation> {
    topology.validate()
}
