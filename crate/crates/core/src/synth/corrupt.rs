//! Anthropometrically invalid variants of valid poses, used as negatives
//! when checking that the discriminator learns body constraints.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::skeleton::{Pose3D, SkeletonTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    LimbSwap,
    LengthScale,
    AngleViolation,
}

impl CorruptionMode {
    pub const ALL: [CorruptionMode; 3] = [Self::LimbSwap, Self::LengthScale, Self::AngleViolation];
}

/// Applies one random corruption of the given kind.
///
/// * `LimbSwap` exchanges the subtrees of one random symmetry pair.
/// * `LengthScale` multiplies one random bone by `1 + magnitude`.
/// * `AngleViolation` bends one random hinge (knee or elbow) backwards
///   past straight by `magnitude` radians.
pub fn corrupt_pose<R: Rng + ?Sized>(
    pose: &Pose3D,
    topology: &SkeletonTopology,
    mode: CorruptionMode,
    magnitude: f64,
    rng: &mut R,
) -> Pose3D {
    assert!(magnitude > 0.0, "corruption magnitude must be positive");
    match mode {
        CorruptionMode::LimbSwap => swap_limbs(pose, topology, rng.random_range(0..topology.symmetry_pairs.len())),
        CorruptionMode::LengthScale => {
            let bones = topology.topological_order();
            scale_bone(pose, topology, bones[rng.random_range(0..bones.len())], 1.0 + magnitude)
        }
        CorruptionMode::AngleViolation => {
            let hinges = hinge_joints(topology);
            hyperextend(pose, topology, hinges[rng.random_range(0..hinges.len())], magnitude)
        }
    }
}

/// Swaps the positions of the subtrees rooted at symmetry pair `pair`.
pub fn swap_limbs(pose: &Pose3D, topology: &SkeletonTopology, pair: usize) -> Pose3D {
    let (left, _) = topology.symmetry_pairs[pair];
    let mirror = topology.mirror_map();
    let mut out = pose.clone();
    for j in topology.subtree(left) {
        out.coords.swap(j, mirror[j]);
    }
    out
}

/// Scales the bone ending at `joint` by `factor`, carrying its subtree along.
pub fn scale_bone(pose: &Pose3D, topology: &SkeletonTopology, joint: usize, factor: f64) -> Pose3D {
    let parent = topology.parent[joint];
    let shift = (pose.joint(joint) - pose.joint(parent)) * (factor - 1.0);
    let mut out = pose.clone();
    for j in topology.subtree(joint) {
        let v = pose.joint(j) + shift;
        out.coords[j] = [v.x, v.y, v.z];
    }
    out
}

/// Paired joints with a paired parent and exactly one child: knees and
/// elbows on the default body.
pub fn hinge_joints(topology: &SkeletonTopology) -> Vec<usize> {
    let mirror = topology.mirror_map();
    let paired = |j: usize| mirror[j] != j;
    (0..topology.joint_count())
        .filter(|&j| j != topology.root && paired(j) && paired(topology.parent[j]) && topology.children(j).len() == 1)
        .collect()
}

/// Rotates the distal segment at `hinge` within the limb plane so that it
/// ends up bent `magnitude` radians to the opposite side of straight.
pub fn hyperextend(pose: &Pose3D, topology: &SkeletonTopology, hinge: usize, magnitude: f64) -> Pose3D {
    let child = topology.children(hinge)[0];
    let pivot = pose.joint(hinge);
    let upper = pivot - pose.joint(topology.parent[hinge]);
    let lower = pose.joint(child) - pivot;
    let flex = upper.angle(&lower);
    let normal = upper.cross(&lower);
    let axis = if normal.norm() > 1e-9 * upper.norm() * lower.norm() {
        Unit::new_normalize(normal)
    } else {
        // straight limb: any axis perpendicular to the upper segment
        let helper = if upper.x.abs() < 0.9 * upper.norm() { Vector3::x() } else { Vector3::y() };
        Unit::new_normalize(upper.cross(&helper))
    };
    let rot = Rotation3::from_axis_angle(&axis, -(flex + magnitude));
    let mut out = pose.clone();
    for j in topology.subtree(child) {
        let v = pivot + rot * (pose.joint(j) - pivot);
        out.coords[j] = [v.x, v.y, v.z];
    }
    out
}
