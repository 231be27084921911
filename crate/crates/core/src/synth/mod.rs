//! Procedural 64x64 monochrome hand images with known pose and appearance.

mod dataset;
pub mod pgm;
mod pose;
mod render;

pub use dataset::{generate, generate_dataset, load_dataset, Dataset, Manifest, SampleRecord, MANIFEST_VERSION};
pub use pose::{
    joints, joints_in_frame, local_joints, sample_pose, FingerGeometry, Joints, PoseParams, FINGERS,
    FINGER_GEOMETRY, JOINT_MARGIN,
};
pub use render::{render, render_heatmaps, sample_appearance, AppearanceParams, HeatmapSpec, Rendered};

pub const K: usize = 16;
pub const IMAGE_SIZE: usize = 64;
pub const SIGMA: f64 = 6.0;
