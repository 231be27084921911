use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{IMAGE_SIZE, K};

pub const FINGERS: usize = 5;

/// Joints closer than this to the image border are rejected by the sampler.
pub const JOINT_MARGIN: f64 = 3.0;

pub type Joints = [[f64; 2]; K];

/// Rest geometry of one finger in palm units: base position relative to
/// the wrist (x right, y down), rest direction (radians from "up", positive
/// toward +x) and the two segment lengths.
#[derive(Clone, Copy, Debug)]
pub struct FingerGeometry {
    pub base: [f64; 2],
    pub rest_angle: f64,
    pub lengths: [f64; 2],
}

/// Thumb to little finger.
pub const FINGER_GEOMETRY: [FingerGeometry; FINGERS] = [
    FingerGeometry { base: [-0.55, -0.45], rest_angle: -0.9, lengths: [0.5, 0.42] },
    FingerGeometry { base: [-0.38, -1.0], rest_angle: -0.12, lengths: [0.55, 0.45] },
    FingerGeometry { base: [-0.12, -1.1], rest_angle: 0.0, lengths: [0.6, 0.5] },
    FingerGeometry { base: [0.14, -1.05], rest_angle: 0.1, lengths: [0.55, 0.45] },
    FingerGeometry { base: [0.38, -0.9], rest_angle: 0.25, lengths: [0.45, 0.38] },
];

pub const ROOT_X: (f64, f64) = (20.0, 44.0);
pub const ROOT_Y: (f64, f64) = (36.0, 50.0);
pub const ROTATION: (f64, f64) = (-0.7, 0.7);
pub const PALM_SCALE: (f64, f64) = (9.0, 13.0);
pub const BASE_BEND: (f64, f64) = (-0.5, 0.9);
pub const MID_BEND: (f64, f64) = (-0.3, 1.1);
pub const SPREAD: (f64, f64) = (0.0, 0.3);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// Wrist position in pixels.
    pub root: [f64; 2],
    pub rotation: f64,
    /// Pixels per palm unit.
    pub palm_scale: f64,
    /// Per finger: bend at the base joint, then at the middle joint.
    pub bends: [[f64; 2]; FINGERS],
    /// Extra fan-out per finger index away from the middle finger.
    pub spread: f64,
}

/// Joint positions in palm units relative to the wrist, before the global
/// rotation, scale and translation. Order: wrist, then base, middle and tip
/// of each finger from thumb to little finger.
pub fn local_joints(pose: &PoseParams) -> Joints {
    let mut j = [[0.0; 2]; K];
    for (f, g) in FINGER_GEOMETRY.iter().enumerate() {
        let fan = pose.spread * (f as f64 - 2.0);
        let a1 = g.rest_angle + fan + pose.bends[f][0];
        let a2 = a1 + pose.bends[f][1];
        let base = g.base;
        let mid = [base[0] + g.lengths[0] * a1.sin(), base[1] - g.lengths[0] * a1.cos()];
        let tip = [mid[0] + g.lengths[1] * a2.sin(), mid[1] - g.lengths[1] * a2.cos()];
        j[1 + 3 * f] = base;
        j[2 + 3 * f] = mid;
        j[3 + 3 * f] = tip;
    }
    j
}

/// Maps a palm-unit point into pixel coordinates.
pub fn to_image(pose: &PoseParams, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = pose.rotation.sin_cos();
    let k = pose.palm_scale;
    [pose.root[0] + k * (c * p[0] - s * p[1]), pose.root[1] + k * (s * p[0] + c * p[1])]
}

/// Forward kinematics: the 16 joints in pixel coordinates.
pub fn joints(pose: &PoseParams) -> Joints {
    local_joints(pose).map(|p| to_image(pose, p))
}

pub fn joints_in_frame(joints: &Joints, margin: f64) -> bool {
    let hi = (IMAGE_SIZE - 1) as f64 - margin;
    joints.iter().all(|&[x, y]| x >= margin && x <= hi && y >= margin && y <= hi)
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..hi)
}

/// Uniform sample within the documented ranges, redrawn until every joint
/// is at least [`JOINT_MARGIN`] pixels inside the frame.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R) -> PoseParams {
    loop {
        let root = [draw(rng, ROOT_X), draw(rng, ROOT_Y)];
        let rotation = draw(rng, ROTATION);
        let palm_scale = draw(rng, PALM_SCALE);
        let mut bends = [[0.0; 2]; FINGERS];
        for b in &mut bends {
            *b = [draw(rng, BASE_BEND), draw(rng, MID_BEND)];
        }
        let spread = draw(rng, SPREAD);
        let pose = PoseParams { root, rotation, palm_scale, bends, spread };
        if joints_in_frame(&joints(&pose), JOINT_MARGIN) {
            return pose;
        }
    }
}
