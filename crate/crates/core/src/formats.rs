//! On-disk JSON documents exchanged between the CLI subcommands.
//!
//! Pixels are `[u, v]`, 3D points are `[x, y, z]` in meters in the scene
//! camera frame, boxes are `[x, y, w, h]` and keypoints `[u, v, confidence]`.
//! All coordinates are in the global image frame.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{CalibrationResult, CalibrationWarning};
use crate::cropping::{BBox, CropLayout, CropParams, Patch};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, GroundPlane, Pixel, Point3};
use crate::skeleton::{Keypoint, JOINT_NAMES};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_NAME: &str = "crowdloc";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance header embedded in every output document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    /// SHA-256 of the configuration or inputs that produced the document.
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<String>,
}

impl Provenance {
    pub fn new(config_digest: String) -> Self {
        Self {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            config_digest,
            seed: None,
            rng: None,
        }
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the canonical JSON form of `value`.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    digest_bytes(&serde_json::to_vec(value).expect("serializable"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Keypoints in [`JOINT_NAMES`] order.
    #[serde(default)]
    pub keypoints: Vec<Keypoint>,
    /// Ground projection of the torso center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hvip: Option<Pixel>,
    /// Signed pixel distance from the torso pixel to the HVIP pixel, used when
    /// `hvip` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hvip_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub torso: Option<Pixel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub schema_version: u32,
    pub image_width: u32,
    pub image_height: u32,
    pub joint_names: Vec<String>,
    pub people: Vec<PersonAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl AnnotationFile {
    pub fn new(image_width: u32, image_height: u32, people: Vec<PersonAnnotation>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            image_width,
            image_height,
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            people,
            provenance: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported annotation schema version {}",
                self.schema_version
            )));
        }
        let expected: Vec<&str> = JOINT_NAMES.to_vec();
        if self.joint_names.iter().map(String::as_str).ne(expected.iter().copied()) {
            return Err(Error::Config("annotation joint order differs from the 17-joint layout".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Standing,
    Tilted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthPerson {
    pub id: u64,
    pub stance: Stance,
    pub torso_m: Point3,
    pub hvip_m: Point3,
    pub torso_height_m: f64,
    pub torso_px: Pixel,
    pub hvip_px: Pixel,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Exact keypoint projections in [`JOINT_NAMES`] order.
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema_version: u32,
    pub camera: CameraIntrinsics,
    pub ground: GroundPlane,
    pub people: Vec<TruthPerson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchFile {
    pub schema_version: u32,
    pub params: CropParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<CropLayout>,
    /// Uniform block size when the grid is not adaptive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform_block: Option<u32>,
    pub patches: Vec<Patch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Calibrated scene: what `calibrate` writes and `localize` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    pub image_width: u32,
    pub image_height: u32,
    pub camera: CameraIntrinsics,
    /// Standing surface used for localization.
    pub ground: GroundPlane,
    pub ankle_plane: GroundPlane,
    pub residual: f64,
    pub observations_used: usize,
    pub observations_selected: usize,
    pub warnings: Vec<CalibrationWarning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl SceneFile {
    pub fn from_calibration(result: &CalibrationResult, selected: usize, image_size: (u32, u32)) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            image_width: image_size.0,
            image_height: image_size.1,
            camera: result.camera,
            ground: result.ground,
            ankle_plane: result.ankle_plane,
            residual: result.residual,
            observations_used: result.observations_used,
            observations_selected: selected,
            warnings: result.warnings.clone(),
            provenance: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Penalties {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_normal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_of_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedPerson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub patch: usize,
    pub torso_px: Pixel,
    pub hvip_px: Pixel,
    pub hvip_m: Point3,
    pub torso_height_m: f64,
    pub torso_m: Point3,
    #[serde(default)]
    pub penalties: Penalties,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collinearity_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keypoints: Vec<Keypoint>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    /// Patches this person was detected in, filled by merging.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seen_in: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionFile {
    pub schema_version: u32,
    pub camera: CameraIntrinsics,
    pub ground: GroundPlane,
    pub patches: Vec<Patch>,
    pub people: Vec<ReconstructedPerson>,
    /// Whether duplicates across overlapping patches were already removed.
    pub merged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
}

/// Writes pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| Error::Io { path: parent.to_path_buf(), source })?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}
