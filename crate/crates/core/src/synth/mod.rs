//! Two-domain synthetic corpus: an anthropometric body model driven by
//! forward kinematics, camera rigs per domain, and stick-figure renders.

mod corrupt;
mod dataset;
mod render;

pub use corrupt::{corrupt_pose, hinge_joints, hyperextend, scale_bone, swap_limbs, CorruptionMode};
pub use dataset::{
    generate_dataset, sample_seed, splitmix, Dataset, DatasetError, DatasetHeader, SyntheticSample, DATASET_VERSION,
};
pub use render::{draw_line, render_stick_figure};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::skeleton::{CameraModel, Frame, Pose3D, SkeletonTopology};

/// Euler triple `(x, y, z)` in radians, applied as `Rz · Ry · Rx`.
pub type Euler = [f64; 3];

pub fn euler_matrix(a: &Euler) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a[2]).into_inner()
        * Rotation3::from_axis_angle(&Vector3::y_axis(), a[1]).into_inner()
        * Rotation3::from_axis_angle(&Vector3::x_axis(), a[0]).into_inner()
}

/// Body proportions and joint ranges.
///
/// Per-joint arrays are indexed by the child joint of each bone; the root
/// entry of the length arrays is unused and its angles orient the whole
/// body. Angle limits are offsets from the rest angles, so a sampled angle
/// lies in `rest + scope·[min, max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnthropometricModel {
    pub topology: SkeletonTopology,
    /// Bone direction in the parent frame at rest (unit vectors).
    pub bone_direction: Vec<[f64; 3]>,
    pub bone_length_mean: Vec<f64>,
    pub bone_length_std: Vec<f64>,
    pub joint_angle_limits: Vec<(Euler, Euler)>,
    pub rest_pose_angles: Vec<Euler>,
}

/// Bone lengths and joint angles of one sampled body.
#[derive(Debug, Clone, PartialEq)]
pub struct Articulation {
    pub lengths: Vec<f64>,
    pub angles: Vec<Euler>,
}

impl AnthropometricModel {
    /// Adult proportions for [`SkeletonTopology::default_16`]. The subject
    /// faces +Z with +Y up, so its left side is +X.
    pub fn default_16() -> Self {
        let topology = SkeletonTopology::default_16();
        let up = [0.0, 1.0, 0.0];
        let down = [0.0, -1.0, 0.0];
        let left = [1.0, 0.0, 0.0];
        let right = [-1.0, 0.0, 0.0];
        // (direction, mean length, rest, min offset, max offset)
        type Row = ([f64; 3], f64, Euler, Euler, Euler);
        let rows: [Row; 16] = [
            // pelvis: global body orientation
            ([0.0; 3], 0.0, [0.0; 3], [-0.2, -0.6, -0.15], [0.2, 0.6, 0.15]),
            // spine, neck, head_top
            (up, 240.0, [0.0; 3], [-0.2, -0.35, -0.3], [0.5, 0.35, 0.3]),
            (up, 260.0, [0.0; 3], [-0.2, -0.3, -0.2], [0.3, 0.3, 0.2]),
            (up, 190.0, [0.0; 3], [-0.4, 0.0, -0.3], [0.5, 0.0, 0.3]),
            // left leg
            (left, 110.0, [0.0; 3], [-0.1, -0.1, -0.1], [0.1, 0.1, 0.1]),
            (down, 430.0, [0.0; 3], [-1.6, -0.3, -0.2], [0.4, 0.3, 0.7]),
            (down, 420.0, [0.1, 0.0, 0.0], [-0.1, 0.0, 0.0], [2.0, 0.0, 0.0]),
            // right leg
            (right, 110.0, [0.0; 3], [-0.1, -0.1, -0.1], [0.1, 0.1, 0.1]),
            (down, 430.0, [0.0; 3], [-1.6, -0.3, -0.7], [0.4, 0.3, 0.2]),
            (down, 420.0, [0.1, 0.0, 0.0], [-0.1, 0.0, 0.0], [2.0, 0.0, 0.0]),
            // left arm
            (left, 160.0, [0.0; 3], [-0.1, 0.0, -0.2], [0.1, 0.0, 0.2]),
            (down, 290.0, [0.0, 0.0, 0.1], [-2.5, -0.5, -0.3], [0.6, 0.5, 2.4]),
            (down, 260.0, [-0.1, 0.0, 0.0], [-2.2, 0.0, 0.0], [0.1, 0.0, 0.0]),
            // right arm
            (right, 160.0, [0.0; 3], [-0.1, 0.0, -0.2], [0.1, 0.0, 0.2]),
            (down, 290.0, [0.0, 0.0, -0.1], [-2.5, -0.5, -2.4], [0.6, 0.5, 0.3]),
            (down, 260.0, [-0.1, 0.0, 0.0], [-2.2, 0.0, 0.0], [0.1, 0.0, 0.0]),
        ];
        Self {
            topology,
            bone_direction: rows.iter().map(|r| r.0).collect(),
            bone_length_mean: rows.iter().map(|r| r.1).collect(),
            bone_length_std: rows.iter().map(|r| 0.04 * r.1).collect(),
            rest_pose_angles: rows.iter().map(|r| r.2).collect(),
            joint_angle_limits: rows.iter().map(|r| (r.3, r.4)).collect(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.topology.joint_count()
    }

    /// Returns a description of every violated invariant.
    pub fn validate(&self) -> Vec<String> {
        let p = self.joint_count();
        let mut out = Vec::new();
        for (name, len) in [
            ("bone_direction", self.bone_direction.len()),
            ("bone_length_mean", self.bone_length_mean.len()),
            ("bone_length_std", self.bone_length_std.len()),
            ("joint_angle_limits", self.joint_angle_limits.len()),
            ("rest_pose_angles", self.rest_pose_angles.len()),
        ] {
            if len != p {
                out.push(format!("{name} has {len} entries for {p} joints"));
            }
        }
        if !out.is_empty() {
            return out;
        }
        for j in self.topology.topological_order() {
            if !(self.bone_length_mean[j] > 0.0) {
                out.push(format!("bone {j} mean length not positive"));
            }
            if !(self.bone_length_std[j] >= 0.0) {
                out.push(format!("bone {j} length std negative"));
            }
        }
        for (j, (lo, hi)) in self.joint_angle_limits.iter().enumerate() {
            if (0..3).any(|k| lo[k] > hi[k]) {
                out.push(format!("joint {j} angle limits inverted"));
            }
        }
        for &(l, r) in &self.topology.symmetry_pairs {
            if self.bone_length_mean[l] != self.bone_length_mean[r]
                || self.bone_length_std[l] != self.bone_length_std[r]
            {
                out.push(format!("symmetric bones {l}/{r} differ"));
            }
        }
        out
    }

    /// Draws bone lengths (Gaussian truncated at ±2σ) and joint angles.
    pub fn sample_articulation<R: Rng + ?Sized>(&self, scope: f64, rng: &mut R) -> Articulation {
        assert!(scope > 0.0 && scope <= 1.0, "pose scope must lie in (0, 1], got {scope}");
        let p = self.joint_count();
        let mut lengths = vec![0.0; p];
        for j in self.topology.topological_order() {
            lengths[j] = truncated_gaussian(self.bone_length_mean[j], self.bone_length_std[j], rng);
        }
        let angles = (0..p)
            .map(|j| {
                let (lo, hi) = self.joint_angle_limits[j];
                let rest = self.rest_pose_angles[j];
                std::array::from_fn(|k| {
                    let (a, b) = (scope * lo[k], scope * hi[k]);
                    rest[k] + if a < b { rng.random_range(a..b) } else { a }
                })
            })
            .collect();
        Articulation { lengths, angles }
    }

    /// World-frame joint positions with the root at the origin.
    pub fn forward_kinematics(&self, art: &Articulation) -> Pose3D {
        let p = self.joint_count();
        let root = self.topology.root;
        let mut global = vec![Matrix3::identity(); p];
        let mut pos = vec![Vector3::zeros(); p];
        global[root] = euler_matrix(&art.angles[root]);
        for j in self.topology.topological_order() {
            let parent = self.topology.parent[j];
            global[j] = global[parent] * euler_matrix(&art.angles[j]);
            pos[j] = pos[parent] + global[j] * Vector3::from(self.bone_direction[j]) * art.lengths[j];
        }
        Pose3D::new(pos.iter().map(|v| [v.x, v.y, v.z]).collect(), Frame::World)
    }
}

fn truncated_gaussian<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return mean;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return mean + std * z;
        }
    }
}

/// Samples a world-frame pose by forward kinematics.
pub fn sample_pose<R: Rng + ?Sized>(model: &AnthropometricModel, scope: f64, rng: &mut R) -> Pose3D {
    model.forward_kinematics(&model.sample_articulation(scope, rng))
}

/// Camera position on a sphere around the subject; angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPlacement {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

impl CameraPlacement {
    pub fn center(&self) -> Vector3<f64> {
        let (a, e) = (self.azimuth.to_radians(), self.elevation.to_radians());
        self.distance * Vector3::new(e.cos() * a.sin(), e.sin(), e.cos() * a.cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum CameraMode {
    FixedList { cameras: Vec<CameraPlacement> },
    Sampled { azimuth: (f64, f64), elevation: (f64, f64), distance: (f64, f64) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub camera: CameraMode,
    /// Focal length in pixels (square pixels).
    pub focal: f64,
    pub pose_scope: f64,
    pub has_3d_labels: bool,
    /// (height, width)
    pub image_size: (usize, usize),
}

impl DomainSpec {
    /// Constrained capture: four fixed cameras, reduced pose range, 3D labels.
    pub fn lab() -> Self {
        let cam = |azimuth, elevation| CameraPlacement { azimuth, elevation, distance: 4000.0 };
        Self {
            name: "lab".into(),
            camera: CameraMode::FixedList {
                cameras: vec![cam(-45.0, 10.0), cam(-15.0, 5.0), cam(15.0, 15.0), cam(45.0, 0.0)],
            },
            focal: 48.0,
            pose_scope: 0.6,
            has_3d_labels: true,
            image_size: (32, 32),
        }
    }

    /// Unconstrained capture: sampled viewpoints, full pose range, 2D labels only.
    pub fn wild() -> Self {
        Self {
            name: "wild".into(),
            camera: CameraMode::Sampled {
                azimuth: (-90.0, 90.0),
                elevation: (-10.0, 35.0),
                distance: (3500.0, 5000.0),
            },
            focal: 48.0,
            pose_scope: 1.0,
            has_3d_labels: false,
            image_size: (32, 32),
        }
    }

    /// Held-out transfer target; its 3D labels are used for measurement only.
    pub fn xfer() -> Self {
        Self {
            name: "xfer".into(),
            camera: CameraMode::Sampled { azimuth: (-80.0, 80.0), elevation: (-5.0, 30.0), distance: (3800.0, 4800.0) },
            focal: 48.0,
            pose_scope: 0.9,
            has_3d_labels: true,
            image_size: (32, 32),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        match &self.camera {
            CameraMode::FixedList { cameras } if cameras.is_empty() => out.push("empty camera list".to_string()),
            CameraMode::FixedList { cameras } => {
                if cameras.iter().any(|c| !(c.distance > 0.0)) {
                    out.push("camera distance must be positive".into());
                }
            }
            CameraMode::Sampled { azimuth, elevation, distance } => {
                for (n, (a, b)) in [("azimuth", azimuth), ("elevation", elevation), ("distance", distance)] {
                    if !(a <= b) {
                        out.push(format!("{n} range empty"));
                    }
                }
                if !(distance.0 > 0.0) {
                    out.push("camera distance must be positive".into());
                }
                if elevation.0 <= -90.0 || elevation.1 >= 90.0 {
                    out.push("elevation must stay inside (-90, 90)".into());
                }
            }
        }
        if !(self.pose_scope > 0.0 && self.pose_scope <= 1.0) {
            out.push(format!("pose_scope {} outside (0, 1]", self.pose_scope));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            out.push("image size below 8x8".into());
        }
        if !(self.focal > 0.0) {
            out.push("focal must be positive".into());
        }
        out
    }

    pub fn principal_point(&self) -> (f64, f64) {
        ((self.image_size.1 as f64 - 1.0) / 2.0, (self.image_size.0 as f64 - 1.0) / 2.0)
    }

    pub fn camera_for(&self, placement: &CameraPlacement) -> CameraModel {
        CameraModel::look_at(self.focal, self.principal_point(), placement.center(), Vector3::zeros())
            .expect("look-at camera is a proper rotation")
    }
}

/// Picks a camera for one sample; all cameras look at the skeleton root.
pub fn sample_camera<R: Rng + ?Sized>(domain: &DomainSpec, rng: &mut R) -> CameraModel {
    let placement = sample_placement(domain, rng);
    domain.camera_for(&placement)
}

pub fn sample_placement<R: Rng + ?Sized>(domain: &DomainSpec, rng: &mut R) -> CameraPlacement {
    let uniform = |rng: &mut R, (a, b): (f64, f64)| if a < b { rng.random_range(a..b) } else { a };
    match &domain.camera {
        CameraMode::FixedList { cameras } => cameras[rng.random_range(0..cameras.len())],
        CameraMode::Sampled { azimuth, elevation, distance } => CameraPlacement {
            azimuth: uniform(rng, *azimuth),
            elevation: uniform(rng, *elevation),
            distance: uniform(rng, *distance),
        },
    }
}
