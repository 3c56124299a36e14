//! Crowd localization metrics and estimate-to-truth instance matching.
//!
//! People are located by their torso centers. PPDS compares every pairwise
//! distance of the estimated crowd with the true one, PA-PPDS does so after a
//! least-squares similarity alignment, PCOD counts pairs with the correct
//! depth order, and OKS scores 2D keypoints.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{ReconstructedPerson, TruthPerson};
use crate::geometry::{Pixel, Point3, Vec3};
use crate::skeleton::{default_falloff, Keypoint};

/// Ground-truth pairs closer than this are skipped by PPDS.
pub const COINCIDENT_EPS: f64 = 1e-9;
/// Depth differences within this band count as ties in PCOD.
pub const DEPTH_TIE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub value: f64,
    pub pairs: usize,
    pub skipped: usize,
}

fn check_lengths(est: &[Point3], gt: &[Point3]) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::Config(format!("{} estimates for {} ground-truth people", est.len(), gt.len())));
    }
    if est.len() < 2 {
        return Err(Error::Undefined(format!("pairwise metrics need 2 people, got {}", est.len())));
    }
    Ok(())
}

/// Pairwise percentual distance similarity.
pub fn ppds(est: &[Point3], gt: &[Point3]) -> Result<PairScore> {
    check_lengths(est, gt)?;
    let (mut total, mut pairs, mut skipped) = (0.0, 0usize, 0usize);
    for k in 0..gt.len() {
        for i in k + 1..gt.len() {
            let g = (gt[k] - gt[i]).norm();
            if g < COINCIDENT_EPS {
                skipped += 1;
                continue;
            }
            let e = (est[k] - est[i]).norm();
            total += 1.0 - ((e - g) / g).abs().min(1.0);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Undefined("every ground-truth pair is coincident".into()));
    }
    Ok(PairScore { value: total / pairs as f64, pairs, skipped })
}

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    /// The rotation is not unique (collinear or too few points).
    pub degenerate: bool,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vec3::zeros(), degenerate: false }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords * self.scale + self.translation)
    }
}

fn centroid(points: &[Point3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords) / points.len() as f64
}

/// Least-squares similarity taking `est` onto `gt`.
pub fn procrustes_align(est: &[Point3], gt: &[Point3]) -> Result<Similarity> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::Config(format!("cannot align {} estimates with {} ground-truth people", est.len(), gt.len())));
    }
    let n = est.len() as f64;
    let (me, mg) = (centroid(est), centroid(gt));
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let (ec, gc) = (e.coords - me, g.coords - mg);
        cov += gc * ec.transpose();
        var += ec.norm_squared();
    }
    cov /= n;
    var /= n;
    if var <= 1e-24 * (1.0 + me.norm_squared()) {
        return Err(Error::DegenerateAlignment("estimated crowd has zero spread".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let scale = sv.iter().zip(sign.diagonal().iter()).map(|(d, s)| d * s).sum::<f64>() / var;
    sv.sort_by(|a, b| b.total_cmp(a));
    let degenerate = est.len() < 3 || sv[1] <= 1e-12 * sv[0];
    Ok(Similarity { scale, rotation, translation: mg - rotation * me * scale, degenerate })
}

/// PPDS after aligning the estimates to the truth.
pub fn pa_ppds(est: &[Point3], gt: &[Point3]) -> Result<(PairScore, Similarity)> {
    check_lengths(est, gt)?;
    let t = procrustes_align(est, gt)?;
    let aligned: Vec<Point3> = est.iter().map(|p| t.apply(p)).collect();
    Ok((ppds(&aligned, gt)?, t))
}

fn depth_order(a: f64, b: f64) -> i8 {
    let diff = a - b;
    if diff.abs() <= DEPTH_TIE_EPS {
        0
    } else if diff > 0.0 {
        1
    } else {
        -1
    }
}

/// Percentage of person pairs whose depth order matches the truth.
pub fn pcod(est: &[Point3], gt: &[Point3]) -> Result<PairScore> {
    check_lengths(est, gt)?;
    let (mut correct, mut pairs) = (0usize, 0usize);
    for k in 0..gt.len() {
        for i in k + 1..gt.len() {
            pairs += 1;
            if depth_order(est[k].z, est[i].z) == depth_order(gt[k].z, gt[i].z) {
                correct += 1;
            }
        }
    }
    Ok(PairScore { value: 100.0 * correct as f64 / pairs as f64, pairs, skipped: 0 })
}

/// Object keypoint similarity over the keypoints visible in `gt`.
pub fn oks(est: &[Keypoint], gt: &[Keypoint], scale: f64, falloff: &[f64]) -> Result<f64> {
    if est.len() != gt.len() || falloff.len() < gt.len() {
        return Err(Error::Config(format!(
            "{} estimated keypoints, {} true keypoints, {} falloff constants",
            est.len(),
            gt.len(),
            falloff.len()
        )));
    }
    let (mut total, mut visible) = (0.0, 0usize);
    for ((e, g), k) in est.iter().zip(gt).zip(falloff) {
        if !g.visible() {
            continue;
        }
        let d2 = (e.u - g.u).powi(2) + (e.v - g.v).powi(2);
        total += (-d2 / (2.0 * scale * scale * k * k)).exp();
        visible += 1;
    }
    if visible == 0 {
        return Err(Error::Undefined("no visible keypoints".into()));
    }
    Ok(total / visible as f64)
}

/// Minimum-cost assignment of rows to columns. Every row is assigned when
/// there are at least as many columns as rows, and vice versa.
pub fn assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        let by_col = assignment(&transposed);
        let mut out = vec![None; rows];
        for (j, i) in by_col.into_iter().enumerate() {
            if let Some(i) = i {
                out[i] = Some(j);
            }
        }
        return out;
    }
    // shortest augmenting paths with row/column potentials; 1-based with a
    // virtual column 0
    let (mut u, mut v) = (vec![0.0; rows + 1], vec![0.0; cols + 1]);
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let (mut delta, mut j1) = (f64::INFINITY, 0);
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            out[owner[j] - 1] = Some(j - 1);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matching {
    /// `(estimate index, truth index)`, sorted by truth index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_estimates: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
}

/// Matches estimated to true torso pixels. A pair is admissible when its
/// distance is within the truth's gate; the largest admissible matching of
/// least total distance is returned.
pub fn match_instances(est: &[Pixel], gt: &[Pixel], gates: &[f64]) -> Matching {
    let admissible = |i: usize, j: usize| est[i].distance(&gt[j]) <= gates[j];
    let finite_total: f64 = (0..est.len())
        .flat_map(|i| (0..gt.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| admissible(i, j))
        .map(|(i, j)| est[i].distance(&gt[j]))
        .sum();
    let forbidden = 2.0 * finite_total + 1.0;
    let cost: Vec<Vec<f64>> = (0..est.len())
        .map(|i| (0..gt.len()).map(|j| if admissible(i, j) { est[i].distance(&gt[j]) } else { forbidden }).collect())
        .collect();
    let assigned = assignment(&cost);
    let mut m = Matching::default();
    let mut truth_used = vec![false; gt.len()];
    for (i, a) in assigned.into_iter().enumerate() {
        match a {
            Some(j) if admissible(i, j) => {
                m.pairs.push((i, j));
                truth_used[j] = true;
            }
            _ => m.unmatched_estimates.push(i),
        }
    }
    m.pairs.sort_by_key(|&(_, j)| j);
    m.unmatched_truth = (0..gt.len()).filter(|&j| !truth_used[j]).collect();
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationOptions {
    /// Matching gate as a fraction of the true torso-to-HVIP pixel length.
    pub gate_factor: f64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self { gate_factor: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub estimates: usize,
    pub truth: usize,
    pub matched: usize,
    pub unmatched_estimates: Vec<usize>,
    /// Ids of true people without an estimate.
    pub unmatched_truth: Vec<u64>,
    pub ppds: Option<PairScore>,
    pub pa_ppds: Option<PairScore>,
    pub pcod: Option<PairScore>,
    /// Mean OKS over matched people that carry keypoints.
    pub oks: Option<f64>,
    pub oks_people: usize,
    pub alignment: Option<Similarity>,
}

/// Matches a reconstruction against the truth and computes every metric
/// that is defined for the matched set.
pub fn evaluate(est: &[ReconstructedPerson], truth: &[TruthPerson], options: &EvaluationOptions) -> EvaluationReport {
    let gates: Vec<f64> = truth
        .iter()
        .map(|t| (options.gate_factor * t.torso_px.distance(&t.hvip_px)).max(1.0))
        .collect();
    let est_px: Vec<Pixel> = est.iter().map(|p| p.torso_px).collect();
    let gt_px: Vec<Pixel> = truth.iter().map(|t| t.torso_px).collect();
    let m = match_instances(&est_px, &gt_px, &gates);
    let e: Vec<Point3> = m.pairs.iter().map(|&(i, _)| est[i].torso_m).collect();
    let g: Vec<Point3> = m.pairs.iter().map(|&(_, j)| truth[j].torso_m).collect();
    let pa = pa_ppds(&e, &g).ok();

    let falloff = default_falloff();
    let mut oks_values = Vec::new();
    for &(i, j) in &m.pairs {
        let (ek, gk) = (&est[i].keypoints, &truth[j].keypoints);
        if ek.is_empty() || ek.len() != gk.len() {
            continue;
        }
        let scale = (truth[j].bbox.w * truth[j].bbox.h).sqrt();
        if let Ok(v) = oks(ek, gk, scale, &falloff) {
            oks_values.push(v);
        }
    }
    EvaluationReport {
        estimates: est.len(),
        truth: truth.len(),
        matched: m.pairs.len(),
        unmatched_estimates: m.unmatched_estimates,
        unmatched_truth: m.unmatched_truth.iter().map(|&j| truth[j].id).collect(),
        ppds: ppds(&e, &g).ok(),
        pa_ppds: pa.map(|p| p.0),
        pcod: pcod(&e, &g).ok(),
        oks: (!oks_values.is_empty()).then(|| oks_values.iter().sum::<f64>() / oks_values.len() as f64),
        oks_people: oks_values.len(),
        alignment: pa.map(|p| p.1),
    }
}
