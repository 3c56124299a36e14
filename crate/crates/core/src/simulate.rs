//! Seeded synthetic large scenes with exact ground truth.
//!
//! A downward-pitched camera looks over a flat ground populated with people
//! modelled as 17 keypoints plus a capsule point cloud. Generation uses one
//! ChaCha20 stream per scene; rendering noise uses a separate ChaCha20 stream
//! per person, so per-person work can run in any order.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cropping::BBox;
use crate::error::{Error, Result};
use crate::formats::{AnnotationFile, PersonAnnotation, Provenance, Stance, TruthFile, TruthPerson, SCHEMA_VERSION};
use crate::geometry::{project, signed_distance, CameraIntrinsics, GroundPlane, Pixel, Point3, Vec3};
use crate::skeleton::{Keypoint, LEFT_ANKLE, LEFT_HIP, LEFT_SHOULDER, NUM_JOINTS, RIGHT_ANKLE, RIGHT_HIP, RIGHT_SHOULDER};

pub const RNG_NAME: &str = "ChaCha20";

/// Ankle joint height above the standing surface, meters.
pub const ANKLE_HEIGHT: f64 = 0.1;
/// Shoulder height as a fraction of stature.
pub const SHOULDER_FRACTION: f64 = 0.82;
const CAPSULE_RADIUS: f64 = 0.15;
const RAISED_FOOT: f64 = 0.3;
const MAX_ATTEMPTS: usize = 10_000;

/// Joint placement in the upright body frame: (height fraction of stature,
/// lateral offset m, forward offset m). Ankles use [`ANKLE_HEIGHT`] instead.
const JOINT_LAYOUT: [(f64, f64, f64); NUM_JOINTS] = [
    (0.93, 0.0, 0.08),
    (0.95, 0.03, 0.07),
    (0.95, -0.03, 0.07),
    (0.94, 0.07, 0.0),
    (0.94, -0.07, 0.0),
    (SHOULDER_FRACTION, 0.20, 0.0),
    (SHOULDER_FRACTION, -0.20, 0.0),
    (0.63, 0.23, 0.0),
    (0.63, -0.23, 0.0),
    (0.48, 0.24, 0.02),
    (0.48, -0.24, 0.02),
    (0.53, 0.10, 0.0),
    (0.53, -0.10, 0.0),
    (0.29, 0.10, 0.02),
    (0.29, -0.10, 0.02),
    (0.0, 0.10, 0.0),
    (0.0, -0.10, 0.0),
];

/// Ankle-midpoint to shoulder-midpoint distance of an upright person.
pub fn standing_segment_length(stature: f64) -> f64 {
    SHOULDER_FRACTION * stature - ANKLE_HEIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    /// Principal point; the image center when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub principal_point: Option<Pixel>,
    /// Camera height above the ground, meters.
    pub camera_height: f64,
    /// Downward pitch of the optical axis, degrees.
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub person_count: usize,
    /// People face the camera up to this many degrees off-axis.
    pub max_yaw_deg: f64,
    /// Range of camera-frame depth of each person's ground contact, meters.
    pub depth_range: [f64; 2],
    pub stature_range: [f64; 2],
    pub standing_fraction: f64,
    /// Largest torso tilt of non-standing people, degrees.
    pub max_tilt_deg: f64,
    /// Keypoint noise standard deviation, pixels.
    pub keypoint_noise: f64,
    /// Also perturb the annotated torso pixel.
    pub noise_torso: bool,
    /// Also perturb the annotated HVIP pixel.
    pub noise_hvip: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_width: 6000,
            image_height: 3000,
            focal: 6000.0,
            principal_point: None,
            camera_height: 12.0,
            pitch_deg: 20.0,
            roll_deg: 0.0,
            person_count: 100,
            max_yaw_deg: 45.0,
            depth_range: [20.0, 150.0],
            stature_range: [1.5, 1.9],
            standing_fraction: 0.8,
            max_tilt_deg: 60.0,
            keypoint_noise: 0.0,
            noise_torso: false,
            noise_hvip: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite();
        let ok = self.image_width > 0
            && self.image_height > 0
            && self.focal > 0.0
            && self.camera_height > 0.0
            && range_ok(self.depth_range)
            && range_ok(self.stature_range)
            && (0.0..=1.0).contains(&self.standing_fraction)
            && (0.0..=180.0).contains(&self.max_yaw_deg)
            && self.max_tilt_deg >= 0.0
            && self.max_tilt_deg < 90.0
            && self.keypoint_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene spec {self:?}")))
        }
    }

    pub fn camera(&self) -> Result<CameraIntrinsics> {
        let pp = self
            .principal_point
            .unwrap_or(Pixel::new(self.image_width as f64 / 2.0, self.image_height as f64 / 2.0));
        CameraIntrinsics::new(self.focal, pp.u, pp.v)
    }

    /// Ground plane of a camera `camera_height` above the floor, pitched down
    /// then rolled about its optical axis.
    pub fn ground(&self) -> Result<GroundPlane> {
        let (t, r) = (self.pitch_deg.to_radians(), self.roll_deg.to_radians());
        let up = Vector3::new(t.cos() * r.sin(), -t.cos() * r.cos(), -t.sin());
        GroundPlane::new(up, self.camera_height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPerson {
    pub id: u64,
    pub stance: Stance,
    pub stature: f64,
    /// Ground contact point below the body.
    pub base: Point3,
    pub torso: Point3,
    pub hvip: Point3,
    pub torso_height: f64,
    pub joints: Vec<Point3>,
    pub head_top: Point3,
    pub body_points: Vec<Point3>,
}

impl SimPerson {
    pub fn ankle_mid(&self) -> Point3 {
        Point3::from((self.joints[LEFT_ANKLE].coords + self.joints[RIGHT_ANKLE].coords) / 2.0)
    }

    pub fn shoulder_mid(&self) -> Point3 {
        Point3::from((self.joints[LEFT_SHOULDER].coords + self.joints[RIGHT_SHOULDER].coords) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub camera: CameraIntrinsics,
    pub ground: GroundPlane,
    pub people: Vec<SimPerson>,
}

impl Scene {
    /// Pixel bounding box of a person's joints, head top and body cloud.
    pub fn person_box(&self, person: &SimPerson) -> Result<BBox> {
        let pts = person
            .joints
            .iter()
            .chain(std::iter::once(&person.head_top))
            .chain(&person.body_points)
            .map(|p| project(p, &self.camera))
            .collect::<Result<Vec<_>>>()?;
        Ok(BBox::from_points(pts).expect("non-empty"))
    }

    pub fn truth(&self) -> Result<TruthFile> {
        let people = self
            .people
            .iter()
            .map(|p| {
                Ok(TruthPerson {
                    id: p.id,
                    stance: p.stance,
                    torso_m: p.torso,
                    hvip_m: p.hvip,
                    torso_height_m: p.torso_height,
                    torso_px: project(&p.torso, &self.camera)?,
                    hvip_px: project(&p.hvip, &self.camera)?,
                    bbox: self.person_box(p)?,
                    keypoints: p
                        .joints
                        .iter()
                        .map(|j| project(j, &self.camera).map(|px| Keypoint { u: px.u, v: px.v, conf: 1.0 }))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut provenance = Provenance::new(crate::formats::digest_of(&self.spec));
        provenance.seed = Some(self.spec.seed);
        provenance.rng = Some(RNG_NAME.into());
        Ok(TruthFile {
            schema_version: SCHEMA_VERSION,
            camera: self.camera,
            ground: self.ground,
            people,
            provenance: Some(provenance),
        })
    }
}

/// Unit vector along `v` with its component along `n` removed.
fn horizontal(v: Vec3, n: &Vec3) -> Vec3 {
    (v - n * n.dot(&v)).normalize()
}

/// 50 capsule surface samples: poles, two 8-point cap rings and four
/// 8-point cylinder rings.
fn capsule(bottom: Point3, axis: Vec3, length: f64, radius: f64) -> Vec<Point3> {
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let w1 = axis.cross(&helper).normalize();
    let w2 = axis.cross(&w1);
    let ring = |center: Point3, along: f64, out: f64| -> Vec<Point3> {
        (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 8.0;
                center + axis * along + (w1 * a.cos() + w2 * a.sin()) * out
            })
            .collect()
    };
    let top = bottom + axis * length;
    let s = std::f64::consts::FRAC_1_SQRT_2 * radius;
    let mut pts = vec![bottom - axis * radius];
    pts.extend(ring(bottom, -s, s));
    for i in 0..4 {
        pts.extend(ring(bottom, length * i as f64 / 3.0, radius));
    }
    pts.extend(ring(top, s, s));
    pts.push(top + axis * radius);
    pts
}

struct PersonBuilder<'a> {
    camera: &'a CameraIntrinsics,
    ground: &'a GroundPlane,
}

impl PersonBuilder<'_> {
    /// Ground point with camera depth `depth` seen in image column `u`.
    fn ground_point(&self, u: f64, depth: f64) -> Option<Point3> {
        let n = self.ground.normal();
        if n.y.abs() < 1e-9 {
            return None;
        }
        let x = (u - self.camera.cx) * depth / self.camera.f;
        let y = -(self.ground.offset() + n.x * x + n.z * depth) / n.y;
        Some(Point3::new(x, y, depth))
    }

    fn build(&self, id: u64, base: Point3, stature: f64, yaw: f64, tilt: Option<(f64, f64)>) -> SimPerson {
        let up = self.ground.normal();
        let lateral0 = horizontal(Vector3::x(), &up);
        let facing = Rotation3::from_axis_angle(&Unit::new_normalize(up), yaw);
        let lateral = facing * lateral0;
        let forward = up.cross(&lateral);
        let body_rot = match tilt {
            Some((angle, heading)) => {
                let axis = Rotation3::from_axis_angle(&Unit::new_normalize(up), heading) * lateral0;
                Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
            }
            None => Rotation3::identity(),
        };

        let mut joints: Vec<Point3> = JOINT_LAYOUT
            .iter()
            .enumerate()
            .map(|(i, &(frac, lat, fwd))| {
                let height = if i == LEFT_ANKLE || i == RIGHT_ANKLE { ANKLE_HEIGHT } else { frac * stature };
                let offset = up * height + lateral * lat + forward * fwd;
                if i == LEFT_ANKLE || i == RIGHT_ANKLE {
                    base + offset
                } else {
                    base + body_rot * offset
                }
            })
            .collect();
        if tilt.is_some() {
            joints[LEFT_ANKLE] += up * RAISED_FOOT;
        }
        let axis = body_rot * up;
        let head_top = base + axis * stature;
        let torso = Point3::from(
            (joints[LEFT_SHOULDER].coords
                + joints[RIGHT_SHOULDER].coords
                + joints[LEFT_HIP].coords
                + joints[RIGHT_HIP].coords)
                / 4.0,
        );
        let hvip = self.ground.project_point(&torso);
        // capsule starts vertically above the contact point so that a leaning
        // body never dips below the ground
        let lift = CAPSULE_RADIUS + 0.01;
        let bottom = base + up * lift;
        let body_points = capsule(bottom, axis, (stature - lift - CAPSULE_RADIUS).max(0.0), CAPSULE_RADIUS);
        SimPerson {
            id,
            stance: if tilt.is_some() { Stance::Tilted } else { Stance::Standing },
            stature,
            base,
            torso,
            hvip,
            torso_height: signed_distance(&torso, self.ground),
            joints,
            head_top,
            body_points,
        }
    }

    fn inside_image(&self, person: &SimPerson, width: f64, height: f64) -> bool {
        person
            .joints
            .iter()
            .chain(std::iter::once(&person.head_top))
            .chain(&person.body_points)
            .chain([&person.torso, &person.hvip])
            .all(|p| match project(p, self.camera) {
                Ok(px) => px.u >= 0.0 && px.u <= width && px.v >= 0.0 && px.v <= height,
                Err(_) => false,
            })
    }
}

/// Generates a scene; deterministic for a given spec.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let camera = spec.camera()?;
    let ground = spec.ground()?;
    let builder = PersonBuilder { camera: &camera, ground: &ground };
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let (width, height) = (spec.image_width as f64, spec.image_height as f64);
    let mut people = Vec::with_capacity(spec.person_count);
    for id in 0..spec.person_count as u64 {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let depth = rng.random_range(spec.depth_range[0]..=spec.depth_range[1]);
            let u = rng.random_range(0.0..=width);
            let stature = rng.random_range(spec.stature_range[0]..=spec.stature_range[1]);
            let yaw = rng.random_range(-spec.max_yaw_deg..=spec.max_yaw_deg).to_radians();
            let standing = rng.random_bool(spec.standing_fraction);
            let tilt = if standing {
                None
            } else {
                let angle = rng.random_range(10f64.min(spec.max_tilt_deg)..=spec.max_tilt_deg).to_radians();
                Some((angle, rng.random_range(0.0..std::f64::consts::TAU)))
            };
            let Some(base) = builder.ground_point(u, depth) else {
                break;
            };
            let person = builder.build(id, base, stature, yaw, tilt);
            if builder.inside_image(&person, width, height) {
                placed = Some(person);
                break;
            }
        }
        match placed {
            Some(p) => people.push(p),
            None => {
                return Err(Error::SceneInfeasible(format!(
                    "no visible ground position for person {id} within depth range {:?}",
                    spec.depth_range
                )))
            }
        }
    }
    Ok(Scene { spec: spec.clone(), camera, ground, people })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderNoise {
    pub keypoint_sigma: f64,
    pub torso: bool,
    pub hvip: bool,
}

impl RenderNoise {
    pub fn from_spec(spec: &SceneSpec) -> Self {
        Self { keypoint_sigma: spec.keypoint_noise, torso: spec.noise_torso, hvip: spec.noise_hvip }
    }
}

fn person_rng(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id + 1);
    rng
}

/// Projects every person into an annotation record, adding isotropic
/// Gaussian pixel noise to keypoints (and optionally torso / HVIP pixels).
pub fn render_annotations(scene: &Scene, noise: &RenderNoise) -> Result<AnnotationFile> {
    let normal = if noise.keypoint_sigma > 0.0 {
        Some(Normal::new(0.0, noise.keypoint_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut people = Vec::with_capacity(scene.people.len());
    for person in &scene.people {
        let all_visible = person.joints.iter().chain([&person.torso, &person.hvip]).all(|p| p.z > 0.0);
        if !all_visible {
            continue;
        }
        let mut rng = person_rng(scene.spec.seed, person.id);
        let mut jitter = |px: Pixel| -> Pixel {
            match &normal {
                Some(n) => Pixel::new(px.u + n.sample(&mut rng), px.v + n.sample(&mut rng)),
                None => px,
            }
        };
        let keypoints = person
            .joints
            .iter()
            .map(|j| {
                let px = jitter(project(j, &scene.camera)?);
                Ok(Keypoint { u: px.u, v: px.v, conf: 1.0 })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut torso = project(&person.torso, &scene.camera)?;
        let mut hvip = project(&person.hvip, &scene.camera)?;
        if noise.torso {
            torso = jitter(torso);
        }
        if noise.hvip {
            hvip = jitter(hvip);
        }
        people.push(PersonAnnotation {
            id: Some(person.id),
            bbox: scene.person_box(person)?,
            keypoints,
            hvip: Some(hvip),
            hvip_offset: Some(torso.distance(&hvip)),
            torso: Some(torso),
        });
    }
    let mut file = AnnotationFile::new(scene.spec.image_width, scene.spec.image_height, people);
    let mut provenance = Provenance::new(crate::formats::digest_of(&scene.spec));
    provenance.seed = Some(scene.spec.seed);
    provenance.rng = Some(RNG_NAME.into());
    file.provenance = Some(provenance);
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec { seed, person_count: 60, ..SceneSpec::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small_spec(7)).unwrap();
        let b = generate(&small_spec(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small_spec(8)).unwrap();
        assert_ne!(a.people[0].base, c.people[0].base);
    }

    #[test]
    fn empty_scene_is_valid() {
        let scene = generate(&SceneSpec { person_count: 0, ..SceneSpec::default() }).unwrap();
        assert!(scene.people.is_empty());
        assert!(render_annotations(&scene, &RenderNoise::default()).unwrap().people.is_empty());
    }

    #[test]
    fn far_crowd_projects_inside_image() {
        let spec = SceneSpec { person_count: 500, depth_range: [10.0, 200.0], ..SceneSpec::default() };
        let scene = generate(&spec).unwrap();
        assert_eq!(scene.people.len(), 500);
        for p in &scene.people {
            for j in &p.joints {
                let px = project(j, &scene.camera).unwrap();
                assert!(px.u >= 0.0 && px.u <= 6000.0 && px.v >= 0.0 && px.v <= 3000.0);
            }
        }
    }

    #[test]
    fn invisible_depth_range_is_infeasible() {
        // a 12 m high camera pitched 15° cannot see ground closer than ~20 m
        let spec = SceneSpec { depth_range: [1.0, 2.0], person_count: 3, ..SceneSpec::default() };
        assert!(matches!(generate(&spec), Err(Error::SceneInfeasible(_))));
    }

    #[test]
    fn person_invariants() {
        let scene = generate(&small_spec(3)).unwrap();
        let n = scene.ground.normal();
        for p in &scene.people {
            assert!(signed_distance(&p.hvip, &scene.ground).abs() < 1e-9);
            assert!((p.torso - (p.hvip + n * p.torso_height)).norm() < 1e-9);
            assert!(p.torso_height > 0.0);
            assert!(signed_distance(&p.base, &scene.ground).abs() < 1e-9);
            if p.stance == Stance::Standing {
                let seg = p.shoulder_mid() - p.ankle_mid();
                let angle = seg.normalize().dot(&n).clamp(-1.0, 1.0).acos().to_degrees();
                assert!(angle < 2.0, "standing person tilted {angle}°");
                assert!((seg.norm() - standing_segment_length(p.stature)).abs() < 1e-9);
            }
            assert_eq!(p.body_points.len(), 50);
            assert!(p.body_points.iter().all(|b| signed_distance(b, &scene.ground) >= 0.0));
        }
    }

    #[test]
    fn noiseless_render_is_exact_projection() {
        let scene = generate(&small_spec(4)).unwrap();
        let ann = render_annotations(&scene, &RenderNoise::default()).unwrap();
        assert_eq!(ann.people.len(), scene.people.len());
        for (a, p) in ann.people.iter().zip(&scene.people) {
            for (k, j) in a.keypoints.iter().zip(&p.joints) {
                let px = project(j, &scene.camera).unwrap();
                assert_eq!((k.u, k.v), (px.u, px.v));
            }
            assert_eq!(a.torso.unwrap(), project(&p.torso, &scene.camera).unwrap());
        }
    }

    #[test]
    fn noise_matches_rayleigh_mean() {
        let spec = SceneSpec { person_count: 400, ..small_spec(11) };
        let scene = generate(&spec).unwrap();
        let sigma = 2.0;
        let noisy = render_annotations(&scene, &RenderNoise { keypoint_sigma: sigma, ..Default::default() }).unwrap();
        let exact = render_annotations(&scene, &RenderNoise::default()).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for (a, b) in noisy.people.iter().zip(&exact.people) {
            for (k, e) in a.keypoints.iter().zip(&b.keypoints) {
                total += (k.u - e.u).hypot(k.v - e.v);
                count += 1.0;
            }
            assert_eq!(a.torso, b.torso);
        }
        let expected = sigma * (std::f64::consts::PI / 2.0).sqrt();
        // 6800 samples: standard error of the mean is ~0.013 px
        assert!((total / count - expected).abs() < 0.06, "{} vs {expected}", total / count);
    }

    #[test]
    fn render_is_order_independent_per_person() {
        let scene = generate(&small_spec(5)).unwrap();
        let noise = RenderNoise { keypoint_sigma: 1.5, torso: true, hvip: true };
        let full = render_annotations(&scene, &noise).unwrap();
        let mut sub = scene.clone();
        sub.people = scene.people[10..].to_vec();
        let partial = render_annotations(&sub, &noise).unwrap();
        assert_eq!(full.people[10..], partial.people[..]);
    }
}
