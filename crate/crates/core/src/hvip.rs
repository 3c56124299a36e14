//! Progressive position transform: torso and HVIP pixels to 3D positions.
//!
//! The HVIP (human-scene virtual interaction point) is the ground projection
//! of a person's torso center along the ground normal. Its image `p_v` lies on
//! the line joining the torso pixel `p_t` and the vanishing point of the
//! normal, so it can be given either as a pixel or as a signed 1D offset from
//! `p_t` along that line. Intersecting the HVIP ray with the ground, then
//! walking up the normal until the point projects onto `p_t`, recovers the
//! absolute torso position.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::cropping::{local_to_global, Patch};
use crate::error::{Error, Result};
use crate::formats::PersonAnnotation;
use crate::geometry::{ground_intersect, signed_distance, vanishing_point, CameraIntrinsics, GroundPlane, Pixel, Point3, Vec3};
use crate::skeleton::Keypoint;

/// Denominator magnitude below which the torso height is unrecoverable.
const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvipInput {
    /// Signed pixel distance from `p_t` toward the ground side of the
    /// vanishing line.
    Offset(f64),
    /// HVIP pixel in patch-local coordinates.
    Pixel(Pixel),
}

/// One person as seen in one patch. Pixels are patch-local.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonObservation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub patch: usize,
    pub torso_local: Pixel,
    pub hvip: HvipInput,
    /// Additive 3D refinement of the torso position, meters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_t: Option<Vec3>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keypoints: Vec<Keypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_center: Option<Pixel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatedPerson {
    pub id: Option<u64>,
    pub patch: usize,
    /// Global torso pixel.
    pub torso_px: Pixel,
    /// Global HVIP pixel.
    pub hvip_px: Pixel,
    /// HVIP on the ground plane.
    pub hvip_m: Point3,
    /// Torso height above the ground along the normal, meters.
    pub torso_height: f64,
    pub torso_m: Point3,
    /// Distance of a directly supplied HVIP pixel from the vanishing line.
    pub collinearity_px: Option<f64>,
    pub body_points: Option<Vec<Point3>>,
    /// Patches this person was detected in after merging; empty before.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seen_in: Vec<usize>,
}

/// Network-style conditioning derived from the scene focal and patch position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningInput {
    pub f_norm: f64,
    pub shift: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedHvip {
    pub torso: Pixel,
    pub hvip: Pixel,
    pub collinearity_px: Option<f64>,
}

/// Unit image direction at `p` pointing toward the ground side of the
/// normal's vanishing point. Valid for vanishing points at infinity.
pub fn ground_direction(p: Pixel, camera: &CameraIntrinsics, normal: &Vec3) -> Result<Vector2<f64>> {
    let vp = vanishing_point(camera, normal);
    let dir = Vector2::new(p.u * vp.z - vp.x, p.v * vp.z - vp.y);
    let norm = dir.norm();
    let scale = vp.norm().max(f64::MIN_POSITIVE);
    if norm <= 1e-12 * scale {
        return Err(Error::DirectionUndefined);
    }
    Ok(dir / norm)
}

/// Global torso and HVIP pixels of an observation.
pub fn resolve_hvip_pixel(
    obs: &PersonObservation,
    patch: &Patch,
    camera: &CameraIntrinsics,
    normal: &Vec3,
) -> Result<ResolvedHvip> {
    let torso = local_to_global(obs.torso_local, patch);
    match obs.hvip {
        HvipInput::Offset(offset) => {
            if offset == 0.0 {
                return Ok(ResolvedHvip { torso, hvip: torso, collinearity_px: None });
            }
            let dir = ground_direction(torso, camera, normal)?;
            let hvip = Pixel::new(torso.u + offset * dir.x, torso.v + offset * dir.y);
            Ok(ResolvedHvip { torso, hvip, collinearity_px: None })
        }
        HvipInput::Pixel(local) => {
            let hvip = local_to_global(local, patch);
            let deviation = match ground_direction(torso, camera, normal) {
                Ok(dir) => {
                    let r = (hvip - torso).to_vector();
                    (r.x * dir.y - r.y * dir.x).abs()
                }
                Err(_) => 0.0,
            };
            Ok(ResolvedHvip { torso, hvip, collinearity_px: Some(deviation) })
        }
    }
}

/// Torso height `d` such that `hvip + d·N` projects onto image row `torso_v`.
pub fn torso_height(hvip: &Point3, torso_v: f64, camera: &CameraIntrinsics, normal: &Vec3) -> Result<f64> {
    let dv = torso_v - camera.cy;
    let denom = dv * normal.z - camera.f * normal.y;
    if denom.abs() < DEGENERATE_EPS {
        return Err(Error::DegenerateRay);
    }
    Ok((camera.f * hvip.y - dv * hvip.z) / denom)
}

/// Lifts torso and HVIP pixels to the 3D torso position.
pub fn locate_pixels(
    torso: Pixel,
    hvip: Pixel,
    camera: &CameraIntrinsics,
    ground: &GroundPlane,
) -> Result<(Point3, f64, Point3)> {
    let hvip_m = ground_intersect(hvip, camera, ground)?;
    let normal = ground.normal();
    let d = torso_height(&hvip_m, torso.v, camera, &normal)?;
    Ok((hvip_m, d, hvip_m + normal * d))
}

pub fn locate(
    obs: &PersonObservation,
    patch: &Patch,
    camera: &CameraIntrinsics,
    ground: &GroundPlane,
) -> Result<LocatedPerson> {
    if obs.patch != patch.id {
        return Err(Error::ObservationInvalid(format!(
            "observation refers to patch {} but patch {} was given",
            obs.patch, patch.id
        )));
    }
    let resolved = resolve_hvip_pixel(obs, patch, camera, &ground.normal())?;
    let (hvip_m, d, torso) = locate_pixels(resolved.torso, resolved.hvip, camera, ground)?;
    Ok(LocatedPerson {
        id: obs.id,
        patch: patch.id,
        torso_px: resolved.torso,
        hvip_px: resolved.hvip,
        hvip_m,
        torso_height: d,
        torso_m: torso + obs.delta_t.unwrap_or_else(Vec3::zeros),
        collinearity_px: resolved.collinearity_px,
        body_points: None,
        seen_in: Vec::new(),
    })
}

/// Rigidly moves a model-frame point set so its torso center lands on `torso`.
pub fn place_body(points: &[Point3], model_torso: &Point3, torso: &Point3) -> Vec<Point3> {
    let shift = torso - model_torso;
    points.iter().map(|p| p + shift).collect()
}

/// Cosine distance between the body's ankle-to-shoulder direction and the
/// ground normal.
pub fn ground_normal_loss(shoulder: &Point3, ankle: &Point3, normal: &Vec3) -> Result<f64> {
    let axis = shoulder - ankle;
    let (na, nn) = (axis.norm(), normal.norm());
    if na == 0.0 || nn == 0.0 {
        return Err(Error::ObservationInvalid("coincident shoulder and ankle points".into()));
    }
    Ok(1.0 - axis.dot(normal) / (na * nn))
}

/// Depth of the deepest ground penetration, 0 when nothing penetrates.
pub fn out_of_bound_loss(points: &[Point3], ground: &GroundPlane) -> Result<f64> {
    let deepest = points
        .iter()
        .map(|p| signed_distance(p, ground))
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::ObservationInvalid("empty point set".into()))?;
    Ok(if deepest < 0.0 { -deepest } else { 0.0 })
}

pub fn conditioning(camera: &CameraIntrinsics, patch: &Patch, scene_width: f64) -> ConditioningInput {
    let c = patch.size as f64;
    let center = patch.center();
    ConditioningInput {
        f_norm: camera.f / scene_width,
        shift: ((center.u - camera.cx) / c, (center.v - camera.cy) / c),
    }
}

/// Patch-local observations of an annotated person: one per patch holding
/// both its torso and HVIP pixels, or, when none does, one in the patch where
/// both points sit deepest inside.
pub fn observations_for(person: &PersonAnnotation, patches: &[Patch]) -> Result<Vec<PersonObservation>> {
    let torso = person
        .torso
        .ok_or_else(|| Error::ObservationInvalid("annotation lacks a torso pixel".into()))?;
    let hvip_global = match (person.hvip, person.hvip_offset) {
        (Some(p), _) => Some(p),
        (None, Some(_)) => None,
        (None, None) => return Err(Error::ObservationInvalid("annotation lacks an HVIP".into())),
    };
    // offsets are located through the patch holding the torso pixel
    let anchor = hvip_global.unwrap_or(torso);
    let make = |patch: &Patch| PersonObservation {
        id: person.id,
        patch: patch.id,
        torso_local: crate::cropping::global_to_local(torso, patch),
        hvip: match hvip_global {
            Some(p) => HvipInput::Pixel(crate::cropping::global_to_local(p, patch)),
            None => HvipInput::Offset(person.hvip_offset.expect("checked above")),
        },
        delta_t: None,
        keypoints: person.keypoints.clone(),
        body_center: None,
    };
    let inside: Vec<_> = patches
        .iter()
        .filter(|p| p.contains(torso) && p.contains(anchor))
        .map(make)
        .collect();
    if !inside.is_empty() {
        return Ok(inside);
    }
    let best = patches
        .iter()
        .max_by(|a, b| {
            let score = |p: &Patch| p.boundary_distance(torso).min(p.boundary_distance(anchor));
            score(a).total_cmp(&score(b)).then(b.id.cmp(&a.id))
        })
        .ok_or_else(|| Error::Config("no patches".into()))?;
    Ok(vec![make(best)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn toy() -> (CameraIntrinsics, GroundPlane) {
        (CameraIntrinsics::new(1000.0, 0.0, 0.0).unwrap(), GroundPlane::new(Vector3::new(0.0, -1.0, 0.0), 2.0).unwrap())
    }

    fn whole(size: u32) -> Patch {
        Patch { id: 0, x: 0, y: 0, size, row: 0, overlap: false }
    }

    fn obs(torso: Pixel, hvip: HvipInput) -> PersonObservation {
        PersonObservation { id: None, patch: 0, torso_local: torso, hvip, delta_t: None, keypoints: vec![], body_center: None }
    }

    fn at(x: u32, y: u32) -> Patch {
        Patch { id: 3, x, y, size: 400, row: 1, overlap: true }
    }

    #[test]
    fn offset_follows_vanishing_direction() {
        let (k, g) = toy();
        let r = resolve_hvip_pixel(&obs(Pixel::new(0.0, 100.0), HvipInput::Offset(100.0)), &whole(10), &k, &g.normal()).unwrap();
        assert_abs_diff_eq!(r.hvip.u, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.hvip.v, 200.0, epsilon = 1e-12);
        let r = resolve_hvip_pixel(&obs(Pixel::new(0.0, 100.0), HvipInput::Offset(0.0)), &whole(10), &k, &g.normal()).unwrap();
        assert_eq!(r.hvip, r.torso);
    }

    #[test]
    fn supplied_pixel_on_line_has_no_deviation() {
        let (k, g) = toy();
        let patch = at(100, 50);
        let o = obs(Pixel::new(0.0, 50.0), HvipInput::Pixel(Pixel::new(0.0, 150.0)));
        let o = PersonObservation { patch: 3, ..o };
        let r = resolve_hvip_pixel(&o, &patch, &k, &g.normal()).unwrap();
        assert_eq!(r.torso, Pixel::new(100.0, 100.0));
        assert_eq!(r.hvip, Pixel::new(100.0, 200.0));
        assert_eq!(r.collinearity_px, Some(0.0));
        let o = PersonObservation { hvip: HvipInput::Pixel(Pixel::new(3.0, 150.0)), ..o };
        assert_abs_diff_eq!(resolve_hvip_pixel(&o, &patch, &k, &g.normal()).unwrap().collinearity_px.unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn direction_undefined_at_finite_vanishing_point() {
        let k = CameraIntrinsics::new(1000.0, 0.0, 0.0).unwrap();
        let n = Vector3::new(0.0, -0.6, -0.8);
        let vp = vanishing_point(&k, &n);
        let p = Pixel::new(vp.x / vp.z, vp.y / vp.z);
        assert!(matches!(ground_direction(p, &k, &n), Err(Error::DirectionUndefined)));
    }

    #[test]
    fn hand_example() {
        let (k, g) = toy();
        let l = locate(&obs(Pixel::new(0.0, 100.0), HvipInput::Pixel(Pixel::new(0.0, 200.0))), &whole(1000), &k, &g).unwrap();
        assert_abs_diff_eq!((l.hvip_m - Point3::new(0.0, 2.0, 10.0)).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.torso_height, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!((l.torso_m - Point3::new(0.0, 1.0, 10.0)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn torso_on_ground_and_refinement() {
        let (k, g) = toy();
        let l = locate(&obs(Pixel::new(0.0, 200.0), HvipInput::Offset(0.0)), &whole(1000), &k, &g).unwrap();
        assert_abs_diff_eq!(l.torso_height, 0.0, epsilon = 1e-12);
        assert_eq!(l.torso_m, l.hvip_m);
        let mut o = obs(Pixel::new(0.0, 100.0), HvipInput::Offset(100.0));
        o.delta_t = Some(Vector3::new(0.0, 0.0, 0.5));
        let l = locate(&o, &whole(1000), &k, &g).unwrap();
        assert_abs_diff_eq!((l.torso_m - Point3::new(0.0, 1.0, 10.5)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_denominator() {
        // normal along the optical axis with the torso on the principal row
        let k = CameraIntrinsics::new(1000.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            torso_height(&Point3::new(0.0, 1.0, 5.0), 0.0, &k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::DegenerateRay)
        ));
    }

    #[test]
    fn wrong_patch_is_rejected() {
        let (k, g) = toy();
        let o = obs(Pixel::new(0.0, 100.0), HvipInput::Offset(100.0));
        assert!(matches!(locate(&o, &at(0, 0), &k, &g), Err(Error::ObservationInvalid(_))));
    }

    #[test]
    fn hvip_above_horizon_fails() {
        let (k, g) = toy();
        let o = obs(Pixel::new(0.0, -200.0), HvipInput::Pixel(Pixel::new(0.0, -100.0)));
        let e = locate(&o, &whole(10), &k, &g).unwrap_err();
        assert!(matches!(e, Error::BehindCamera { .. } | Error::NoIntersection));
    }

    #[test]
    fn placement_is_a_translation() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 2.0, 0.5)];
        let placed = place_body(&pts, &Point3::origin(), &Point3::new(0.0, 1.0, 10.0));
        assert_eq!(placed[0], Point3::new(0.0, 1.0, 10.0));
        assert_eq!(placed[1], Point3::new(1.0, 1.0, 10.0));
        assert_eq!(place_body(&pts, &pts[2], &pts[2]), pts);
        let d = |a: &[Point3]| (a[1] - a[2]).norm();
        assert_abs_diff_eq!(d(&placed), d(&pts), epsilon = 1e-12);
    }

    #[test]
    fn ground_normal_loss_cases() {
        let n = Vector3::new(0.0, -1.0, 0.0);
        let a = Point3::new(0.0, 2.0, 10.0);
        assert_abs_diff_eq!(ground_normal_loss(&Point3::new(0.0, 0.5, 10.0), &a, &n).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ground_normal_loss(&Point3::new(1.0, 2.0, 10.0), &a, &n).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ground_normal_loss(&Point3::new(0.0, 3.0, 10.0), &a, &n).unwrap(), 2.0, epsilon = 1e-15);
        assert!(ground_normal_loss(&a, &a, &n).is_err());
    }

    #[test]
    fn out_of_bound_cases() {
        let (_, g) = toy();
        // signed distance is 2 - y
        let p = |sd: f64| Point3::new(0.3, 2.0 - sd, 7.0);
        assert_eq!(out_of_bound_loss(&[p(0.5), p(0.0), p(1.0)], &g).unwrap(), 0.0);
        assert_abs_diff_eq!(out_of_bound_loss(&[p(0.5), p(-0.05)], &g).unwrap(), 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(out_of_bound_loss(&[p(-0.02), p(-0.07), p(1.0)], &g).unwrap(), 0.07, epsilon = 1e-12);
        assert!(out_of_bound_loss(&[], &g).is_err());
    }

    #[test]
    fn conditioning_cases() {
        let k = CameraIntrinsics::new(27000.0, 9600.0, 5400.0).unwrap();
        let centered = Patch { id: 0, x: 9400, y: 5200, size: 400, row: 0, overlap: false };
        let c = conditioning(&k, &centered, 19200.0);
        assert_abs_diff_eq!(c.f_norm, 1.40625, epsilon = 1e-15);
        assert_eq!(c.shift, (0.0, 0.0));
        let right = Patch { x: 9800, ..centered };
        assert_eq!(conditioning(&k, &right, 19200.0).shift, (1.0, 0.0));
    }

    #[test]
    fn annotation_assignment() {
        let person = PersonAnnotation {
            id: Some(4),
            bbox: crate::cropping::BBox { x: 90.0, y: 40.0, w: 20.0, h: 70.0 },
            keypoints: vec![],
            hvip: Some(Pixel::new(100.0, 105.0)),
            hvip_offset: None,
            torso: Some(Pixel::new(100.0, 60.0)),
        };
        let patches = vec![
            Patch { id: 0, x: 0, y: 0, size: 200, row: 0, overlap: false },
            Patch { id: 1, x: 50, y: 0, size: 200, row: 0, overlap: true },
            Patch { id: 2, x: 0, y: 100, size: 200, row: 1, overlap: false },
        ];
        let obs = observations_for(&person, &patches).unwrap();
        assert_eq!(obs.iter().map(|o| o.patch).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(obs[1].torso_local, Pixel::new(50.0, 60.0));
        assert_eq!(obs[1].hvip, HvipInput::Pixel(Pixel::new(50.0, 105.0)));
        // straddling every patch: the deepest one is used
        let only = vec![patches[2], Patch { id: 5, x: 0, y: 0, size: 80, row: 0, overlap: false }];
        let obs = observations_for(&person, &only).unwrap();
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].patch, 5);
    }
}
