//! 17-joint keypoint layout shared by annotation files, standing-person
//! selection and OKS.

use serde::{Deserialize, Serialize};

use crate::geometry::Pixel;

pub const JOINT_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const NUM_JOINTS: usize = JOINT_NAMES.len();

pub const LEFT_SHOULDER: usize = 5;
pub const RIGHT_SHOULDER: usize = 6;
pub const LEFT_HIP: usize = 11;
pub const RIGHT_HIP: usize = 12;
pub const LEFT_ANKLE: usize = 15;
pub const RIGHT_ANKLE: usize = 16;

/// Per-joint standard deviations of the common 17-keypoint benchmark.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// OKS falloff constants `k_i = 2σ_i`, so that `exp(−d²/(2 s² k_i²))` equals
/// the benchmark's `exp(−d²/(2·area·(2σ_i)²))` with `s² = area`.
pub fn default_falloff() -> [f64; 17] {
    COCO_SIGMAS.map(|s| 2.0 * s)
}

/// Image keypoint with a detection confidence; zero confidence means not visible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub conf: f64,
}

impl From<[f64; 3]> for Keypoint {
    fn from(a: [f64; 3]) -> Self {
        Keypoint { u: a[0], v: a[1], conf: a[2] }
    }
}

impl From<Keypoint> for [f64; 3] {
    fn from(k: Keypoint) -> Self {
        [k.u, k.v, k.conf]
    }
}

impl Keypoint {
    pub fn pixel(&self) -> Pixel {
        Pixel::new(self.u, self.v)
    }

    pub fn visible(&self) -> bool {
        self.conf > 0.0
    }
}

pub fn midpoint(a: &Keypoint, b: &Keypoint) -> Pixel {
    Pixel::new(0.5 * (a.u + b.u), 0.5 * (a.v + b.v))
}
