//! Scene camera and ground plane estimation from standing people.
//!
//! Each standing person contributes an ankle midpoint (assumed on the ground)
//! and a shoulder midpoint (assumed `h` meters above it along the normal).
//! Focal length, normal and plane offset are chosen so the predicted shoulder
//! pixels match the observed ones in direction and length.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::cropping::median;
use crate::error::{Error, Result};
use crate::geometry::{
    ground_intersect, offset_plane, project, CameraIntrinsics, GroundPlane, Pixel, Vec3,
};
use crate::optimize::{levenberg_marquardt, nelder_mead, NelderMeadOptions};
use crate::skeleton::{midpoint, Keypoint, LEFT_ANKLE, LEFT_SHOULDER, RIGHT_ANKLE, RIGHT_SHOULDER};

/// Loss assigned to an observation whose ankle ray misses the candidate plane.
const INVALID_OBSERVATION_LOSS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandingObservation {
    /// Midpoint of the two ankle keypoints.
    pub ankle: Pixel,
    /// Midpoint of the two shoulder keypoints.
    pub shoulder: Pixel,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub angle: f64,
    pub modulus: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { angle: 1.0, modulus: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    /// Ankle-midpoint to shoulder-midpoint height prior, meters.
    pub height_prior: f64,
    pub weights: LossWeights,
    /// Height of the ankle joints above the standing surface, meters. The
    /// fitted ankle plane is moved this far away from the camera.
    pub ankle_height: f64,
    /// Focal length seeds as multiples of the image width.
    pub focal_seeds: Vec<f64>,
    pub tolerance: f64,
    pub max_evaluations: usize,
    /// Drop observations whose loss exceeds `3 ×` the median and refit once.
    pub reweight: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            height_prior: 1.4,
            weights: LossWeights::default(),
            ankle_height: 0.1,
            focal_seeds: vec![0.5, 1.0, 2.0, 4.0],
            tolerance: 1e-10,
            max_evaluations: 10_000,
            reweight: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationWarning {
    /// Observations leave the normal under-constrained.
    DegenerateConfiguration,
    /// The optimizer hit its evaluation budget; the best iterate is reported.
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub camera: CameraIntrinsics,
    /// Standing surface, i.e. the ankle plane after the ankle-height shift.
    pub ground: GroundPlane,
    /// Plane through the ankle midpoints as fitted.
    pub ankle_plane: GroundPlane,
    /// Final mean loss over the observations kept.
    pub residual: f64,
    pub evaluations: usize,
    /// Loss of every input observation at the solution.
    pub per_observation: Vec<f64>,
    pub observations_used: usize,
    pub warnings: Vec<CalibrationWarning>,
}

/// Keeps people whose joints are confident, whose ankle-to-shoulder segment
/// is near vertical in the image and whose feet are both planted.
pub fn select_standing(people: &[Vec<Keypoint>], tau: f64) -> Vec<StandingObservation> {
    people
        .iter()
        .filter_map(|kps| {
            let get = |i: usize| kps.get(i).copied();
            let (la, ra) = (get(LEFT_ANKLE)?, get(RIGHT_ANKLE)?);
            let (ls, rs) = (get(LEFT_SHOULDER)?, get(RIGHT_SHOULDER)?);
            let confidence = la.conf.min(ra.conf).min(ls.conf).min(rs.conf);
            if confidence < tau {
                return None;
            }
            let ankle = midpoint(&la, &ra);
            let shoulder = midpoint(&ls, &rs);
            let du = (shoulder.u - ankle.u).abs();
            let dv = (shoulder.v - ankle.v).abs();
            let length = du.hypot(dv);
            if length == 0.0 || du > 0.2 * dv || (la.v - ra.v).abs() > 0.1 * length {
                return None;
            }
            if shoulder.v >= ankle.v {
                log::debug!("standing candidate with shoulders below ankles at {ankle:?}");
            }
            Some(StandingObservation { ankle, shoulder, confidence })
        })
        .collect()
}

/// Pixel of the shoulder midpoint of a person standing at `ankle` with
/// shoulders `h` meters above the ankles.
pub fn predict_shoulder(ankle: Pixel, camera: &CameraIntrinsics, ground: &GroundPlane, h: f64) -> Result<Pixel> {
    let invalid = |e: Error| Error::ObservationInvalid(format!("ankle pixel {ankle:?}: {e}"));
    let ankle_3d = ground_intersect(ankle, camera, ground).map_err(invalid)?;
    let shoulder_3d = ankle_3d + ground.normal() * h;
    project(&shoulder_3d, camera).map_err(invalid)
}

fn cosine_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let na = a.0.hypot(a.1);
    let nb = b.0.hypot(b.1);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - (a.0 * b.0 + a.1 * b.1) / (na * nb)
}

/// Angle plus relative-length loss of one observation.
pub fn observation_loss(
    camera: &CameraIntrinsics,
    ground: &GroundPlane,
    obs: &StandingObservation,
    h: f64,
    weights: &LossWeights,
) -> Result<f64> {
    let observed = (obs.shoulder.u - obs.ankle.u, obs.shoulder.v - obs.ankle.v);
    let observed_len = observed.0.hypot(observed.1);
    if observed_len == 0.0 {
        return Err(Error::ObservationInvalid(format!(
            "zero-length ankle-shoulder segment at {:?}",
            obs.ankle
        )));
    }
    let predicted = predict_shoulder(obs.ankle, camera, ground, h)?;
    let pred = (predicted.u - obs.ankle.u, predicted.v - obs.ankle.v);
    let pred_len = pred.0.hypot(pred.1);
    Ok(weights.angle * cosine_distance(pred, observed)
        + weights.modulus * (pred_len - observed_len).abs() / observed_len)
}

/// Mean of [`observation_loss`] over `obs`.
pub fn calibration_loss(
    camera: &CameraIntrinsics,
    ground: &GroundPlane,
    obs: &[StandingObservation],
    h: f64,
    weights: &LossWeights,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::InsufficientData("no observations".into()));
    }
    let mut total = 0.0;
    for o in obs {
        total += observation_loss(camera, ground, o, h, weights)?;
    }
    Ok(total / obs.len() as f64)
}

/// Local chart of the unit sphere around `center`.
#[derive(Debug, Clone, Copy)]
struct SphereChart {
    center: Vec3,
    e1: Vec3,
    e2: Vec3,
}

impl SphereChart {
    fn new(center: Vec3) -> Self {
        let center = center.normalize();
        let helper = if center.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = center.cross(&helper).normalize();
        let e2 = center.cross(&e1);
        Self { center, e1, e2 }
    }

    fn point(&self, a: f64, b: f64) -> Vec3 {
        (self.center + self.e1 * a + self.e2 * b).normalize()
    }
}

struct Problem<'a> {
    obs: &'a [StandingObservation],
    active: Vec<bool>,
    h: f64,
    weights: LossWeights,
    cx: f64,
    cy: f64,
}

impl Problem<'_> {
    fn decode(&self, chart: &SphereChart, x: &[f64]) -> Option<(CameraIntrinsics, GroundPlane)> {
        let camera = CameraIntrinsics::new(x[0].exp(), self.cx, self.cy).ok()?;
        let ground = GroundPlane::new(chart.point(x[1], x[2]), x[3].exp()).ok()?;
        Some((camera, ground))
    }

    fn per_observation(&self, camera: &CameraIntrinsics, ground: &GroundPlane) -> Vec<f64> {
        self.obs
            .iter()
            .map(|o| {
                observation_loss(camera, ground, o, self.h, &self.weights).unwrap_or(INVALID_OBSERVATION_LOSS)
            })
            .collect()
    }

    fn loss(&self, chart: &SphereChart, x: &[f64]) -> f64 {
        let Some((camera, ground)) = self.decode(chart, x) else {
            return f64::INFINITY;
        };
        let mut total = 0.0;
        let mut count = 0usize;
        for (o, &on) in self.obs.iter().zip(&self.active) {
            if on {
                total += observation_loss(&camera, &ground, o, self.h, &self.weights)
                    .unwrap_or(INVALID_OBSERVATION_LOSS);
                count += 1;
            }
        }
        total / count as f64
    }

    /// Smooth stand-in for the loss (signed angle and relative length
    /// error per person) used to seed the simplex search.
    fn residuals(&self, chart: &SphereChart, x: &[f64]) -> Vec<f64> {
        let invalid = vec![2.0; 2 * self.obs.len()];
        let Some((camera, ground)) = self.decode(chart, x) else {
            return invalid;
        };
        let (wa, wm) = (self.weights.angle.sqrt(), self.weights.modulus.sqrt());
        let mut out = Vec::with_capacity(2 * self.obs.len());
        for (o, &on) in self.obs.iter().zip(&self.active) {
            if !on {
                continue;
            }
            let Ok(pred) = predict_shoulder(o.ankle, &camera, &ground, self.h) else {
                out.extend([2.0, 2.0]);
                continue;
            };
            let (a, b) = (pred - o.ankle, o.shoulder - o.ankle);
            let angle = (a.u * b.v - a.v * b.u).atan2(a.u * b.u + a.v * b.v);
            let (la, lb) = (a.u.hypot(a.v), b.u.hypot(b.v));
            out.extend([wa * angle, wm * (la - lb) / lb]);
        }
        out
    }
}

/// Least-squares common point of the ankle-to-shoulder image lines, in
/// homogeneous pixels, with the smallest two singular values of the line
/// matrix (relative to the largest).
fn vertical_vanishing_point(obs: &[StandingObservation], cx: f64, cy: f64, scale: f64) -> (Vector3<f64>, f64) {
    let rows: Vec<Vector3<f64>> = obs
        .iter()
        .map(|o| {
            let a = Vector3::new((o.ankle.u - cx) / scale, (o.ankle.v - cy) / scale, 1.0);
            let s = Vector3::new((o.shoulder.u - cx) / scale, (o.shoulder.v - cy) / scale, 1.0);
            let l = a.cross(&s);
            l / l.xy().norm().max(f64::MIN_POSITIVE)
        })
        .collect();
    let m = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let svd = (m.transpose() * &m).svd(true, true);
    let (mut idx, mut sv) = (0, f64::INFINITY);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s < sv {
            sv = s;
            idx = i;
        }
    }
    let mut sorted: Vec<f64> = svd.singular_values.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let conditioning = sorted[1] / sorted[0].max(f64::MIN_POSITIVE);
    let v_t = svd.v_t.expect("requested");
    let n = Vector3::new(v_t[(idx, 0)], v_t[(idx, 1)], v_t[(idx, 2)]);
    // back to pixel homogeneous coordinates
    let vp = Vector3::new(n.x * scale + cx * n.z, n.y * scale + cy * n.z, n.z);
    (vp, conditioning)
}

/// Initial normal for focal `f`: back-projected vanishing point, oriented so
/// that moving along it carries ankles toward shoulders in the image.
fn initial_normal(vp: &Vector3<f64>, camera: &CameraIntrinsics, obs: &[StandingObservation]) -> Vec3 {
    let mut n = Vector3::new((vp.x - camera.cx * vp.z) / camera.f, (vp.y - camera.cy * vp.z) / camera.f, vp.z);
    n.normalize_mut();
    let agreement: f64 = obs
        .iter()
        .map(|o| {
            let r = camera.backproject(o.ankle);
            let du = n.x - r.x * n.z;
            let dv = n.y - r.y * n.z;
            let (su, sv) = (o.shoulder.u - o.ankle.u, o.shoulder.v - o.ankle.v);
            (du * su + dv * sv).signum()
        })
        .sum();
    if agreement < 0.0 {
        -n
    } else {
        n
    }
}

/// Estimates focal length and ground plane from standing observations.
pub fn calibrate(
    obs: &[StandingObservation],
    image_size: (u32, u32),
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    if obs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least 3 standing people, got {}",
            obs.len()
        )));
    }
    for o in obs {
        if o.ankle.distance(&o.shoulder) == 0.0 {
            return Err(Error::ObservationInvalid(format!("zero-length segment at {:?}", o.ankle)));
        }
    }
    let (width, height) = (image_size.0 as f64, image_size.1 as f64);
    let (cx, cy) = (width / 2.0, height / 2.0);
    let mut warnings = Vec::new();

    let (vp, conditioning) = vertical_vanishing_point(obs, cx, cy, width);
    let u_mean = obs.iter().map(|o| o.ankle.u).sum::<f64>() / obs.len() as f64;
    let u_spread = obs.iter().map(|o| (o.ankle.u - u_mean).abs()).fold(0.0, f64::max);
    if conditioning < 1e-8 || u_spread < 1e-3 * width {
        warnings.push(CalibrationWarning::DegenerateConfiguration);
    }

    let mut problem = Problem {
        obs,
        active: vec![true; obs.len()],
        h: options.height_prior,
        weights: options.weights,
        cx,
        cy,
    };
    let nm = NelderMeadOptions {
        tolerance: options.tolerance,
        max_evaluations: options.max_evaluations,
    };
    let lowest = obs
        .iter()
        .max_by(|a, b| a.ankle.v.total_cmp(&b.ankle.v))
        .expect("non-empty");

    let mut evaluations = 0usize;
    let mut best: Option<(SphereChart, Vec<f64>, f64, bool)> = None;
    for &seed in &options.focal_seeds {
        let Ok(camera) = CameraIntrinsics::new(seed * width, cx, cy) else {
            continue;
        };
        let normal = initial_normal(&vp, &camera, obs);
        let depth_coeff = normal.dot(&camera.backproject(lowest.ankle)).abs().max(1e-6);
        let chart = SphereChart::new(normal);
        let start = [camera.f.ln(), 0.0, 0.0, (10.0 * depth_coeff).ln()];
        let seeded = levenberg_marquardt(|x| problem.residuals(&chart, x), &start, &nm);
        evaluations += seeded.evaluations;
        let start = if problem.loss(&chart, &seeded.x) < problem.loss(&chart, &start) {
            [seeded.x[0], seeded.x[1], seeded.x[2], seeded.x[3]]
        } else {
            start
        };
        let (chart, x, value, evals, converged) = refine(&problem, chart, &start, &nm);
        evaluations += evals;
        if best.as_ref().is_none_or(|b| value < b.2) {
            best = Some((chart, x, value, converged));
        }
    }
    let (mut chart, mut x, mut value, mut converged) =
        best.ok_or_else(|| Error::Config("no valid focal length seed".into()))?;

    if options.reweight {
        let (camera, ground) = problem.decode(&chart, &x).expect("finite optimum");
        let losses = problem.per_observation(&camera, &ground);
        let threshold = (3.0 * median(&mut losses.clone()).unwrap_or(0.0)).max(1e-9);
        let active: Vec<bool> = losses.iter().map(|&l| l <= threshold).collect();
        let kept = active.iter().filter(|&&a| a).count();
        if kept >= 3 && kept < obs.len() {
            problem.active = active;
            let start = [x[0], x[1], x[2], x[3]];
            let (c2_chart, x2, v2, evals, c2) = refine(&problem, chart, &start, &nm);
            evaluations += evals;
            chart = c2_chart;
            x = x2;
            value = v2;
            converged = c2;
        }
    }
    if !converged {
        warnings.push(CalibrationWarning::NotConverged);
    }

    let (camera, ankle_plane) = problem.decode(&chart, &x).expect("finite optimum");
    let ground = offset_plane(&ankle_plane, -options.ankle_height)?;
    Ok(CalibrationResult {
        camera,
        ground,
        ankle_plane,
        residual: value,
        evaluations,
        per_observation: problem.per_observation(&camera, &ankle_plane),
        observations_used: problem.active.iter().filter(|&&a| a).count(),
        warnings,
    })
}

/// Nelder–Mead with restarts around the incumbent until a restart stops
/// improving it. The chart is recentered after every run, so the returned
/// parameters are relative to the returned chart.
fn refine(
    problem: &Problem<'_>,
    mut chart: SphereChart,
    start: &[f64; 4],
    nm: &NelderMeadOptions,
) -> (SphereChart, Vec<f64>, f64, usize, bool) {
    let mut x = start.to_vec();
    let mut value = problem.loss(&chart, &x);
    let mut evaluations = 1usize;
    let mut steps = [0.2, 0.1, 0.1, 0.2];
    let mut converged = false;
    for _ in 0..40 {
        let budget = NelderMeadOptions {
            tolerance: nm.tolerance,
            max_evaluations: nm.max_evaluations.saturating_sub(evaluations).max(1),
        };
        let m = nelder_mead(|p| problem.loss(&chart, p), &x, &steps, &budget);
        evaluations += m.evaluations;
        let improved = value - m.value;
        if m.value <= value {
            x = m.x;
            value = m.value;
        }
        converged = m.converged;
        chart = SphereChart::new(chart.point(x[1], x[2]));
        x[1] = 0.0;
        x[2] = 0.0;
        if evaluations >= nm.max_evaluations || (m.converged && improved <= nm.tolerance) {
            break;
        }
        if improved <= nm.tolerance {
            steps = steps.map(|s| (s * 0.5).max(1e-4));
        }
    }
    (chart, x, value, evaluations, converged)
}
