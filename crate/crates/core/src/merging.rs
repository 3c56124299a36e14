//! Duplicate removal across overlapping patches.
//!
//! Detections from different patches whose torso and HVIP pixels both nearly
//! coincide, and whose torsos each lie inside the other's patch, are
//! clustered greedily (closest pairs first, never joining two detections
//! from the same patch); each cluster keeps the detection lying farthest
//! inside its patch, which tends to be the least truncated one.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::cropping::Patch;
use crate::error::{Error, Result};
use crate::formats::ReconstructedPerson;
use crate::geometry::{Pixel, Point3};
use crate::hvip::LocatedPerson;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    /// Match radius as a fraction of the smaller torso-to-HVIP length.
    pub match_radius_factor: f64,
    /// Match on 3D torso positions (radius relative to torso height).
    pub use_3d: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { match_radius_factor: 0.5, use_3d: false }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.match_radius_factor > 0.0 && self.match_radius_factor.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("match radius factor must be positive, got {}", self.match_radius_factor)))
        }
    }
}

/// What the matcher needs to know about a detection.
pub trait Detection {
    fn patch(&self) -> usize;
    fn torso_px(&self) -> Pixel;
    fn hvip_px(&self) -> Pixel;
    fn torso_m(&self) -> Point3;
    fn torso_height(&self) -> f64;
    /// Patches already known to show this person.
    fn seen_in(&self) -> BTreeSet<usize>;
    fn set_seen_in(&mut self, patches: Vec<usize>);
}

impl Detection for LocatedPerson {
    fn patch(&self) -> usize {
        self.patch
    }
    fn torso_px(&self) -> Pixel {
        self.torso_px
    }
    fn hvip_px(&self) -> Pixel {
        self.hvip_px
    }
    fn torso_m(&self) -> Point3 {
        self.torso_m
    }
    fn torso_height(&self) -> f64 {
        self.torso_height
    }
    fn seen_in(&self) -> BTreeSet<usize> {
        self.seen_in.iter().copied().chain([self.patch]).collect()
    }
    fn set_seen_in(&mut self, patches: Vec<usize>) {
        self.seen_in = patches;
    }
}

impl Detection for ReconstructedPerson {
    fn patch(&self) -> usize {
        self.patch
    }
    fn torso_px(&self) -> Pixel {
        self.torso_px
    }
    fn hvip_px(&self) -> Pixel {
        self.hvip_px
    }
    fn torso_m(&self) -> Point3 {
        self.torso_m
    }
    fn torso_height(&self) -> f64 {
        self.torso_height_m
    }
    fn seen_in(&self) -> BTreeSet<usize> {
        self.seen_in.iter().copied().chain([self.patch]).collect()
    }
    fn set_seen_in(&mut self, patches: Vec<usize>) {
        self.seen_in = patches;
    }
}

struct Clusters {
    parent: Vec<usize>,
    patches: Vec<BTreeSet<usize>>,
}

impl Clusters {
    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn join(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb || !self.patches[ra].is_disjoint(&self.patches[rb]) {
            return;
        }
        let (keep, drop) = (ra.min(rb), ra.max(rb));
        let moved = std::mem::take(&mut self.patches[drop]);
        self.patches[keep].extend(moved);
        self.parent[drop] = keep;
    }
}

fn patch_lookup<'a, T: Detection>(people: &[T], patches: &'a [Patch]) -> Result<Vec<&'a Patch>> {
    let by_id: HashMap<usize, &Patch> = patches.iter().map(|p| (p.id, p)).collect();
    people
        .iter()
        .enumerate()
        .map(|(i, p)| {
            by_id
                .get(&p.patch())
                .copied()
                .ok_or_else(|| Error::Config(format!("detection {i} refers to unknown patch {}", p.patch())))
        })
        .collect()
}

/// Groups detections of the same person. Clusters list detection indices in
/// ascending order and are ordered by their first index.
pub fn match_duplicates<T: Detection>(people: &[T], patches: &[Patch], cfg: &MergeConfig) -> Result<Vec<Vec<usize>>> {
    let home = patch_lookup(people, patches)?;
    let scale = |p: &T| {
        if cfg.use_3d {
            p.torso_height().abs()
        } else {
            p.torso_px().distance(&p.hvip_px())
        }
    };
    let distance = |a: &T, b: &T| {
        if cfg.use_3d {
            (a.torso_m() - b.torso_m()).norm()
        } else {
            a.torso_px().distance(&b.torso_px()).max(a.hvip_px().distance(&b.hvip_px()))
        }
    };
    let mut candidates = Vec::new();
    for i in 0..people.len() {
        for j in i + 1..people.len() {
            let (a, b) = (&people[i], &people[j]);
            // a duplicate can only come from the overlap of the two patches
            if a.patch() == b.patch() || !home[j].contains(a.torso_px()) || !home[i].contains(b.torso_px()) {
                continue;
            }
            let dist = distance(a, b);
            if dist < cfg.match_radius_factor * scale(a).min(scale(b)) {
                candidates.push((dist, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut clusters = Clusters {
        parent: (0..people.len()).collect(),
        // earlier merges are remembered, so merging again changes nothing
        patches: people.iter().map(|p| p.seen_in()).collect(),
    };
    for (_, i, j) in candidates {
        clusters.join(i, j);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = HashMap::new();
    for i in 0..people.len() {
        let root = clusters.find(i);
        let k = *slot.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[k].push(i);
    }
    Ok(groups)
}

/// Keeps one detection per cluster: the one farthest from its patch border,
/// preferring larger patches on ties. The survivor records every patch its
/// cluster was seen in.
pub fn merge<T: Detection + Clone>(people: &[T], clusters: &[Vec<usize>], patches: &[Patch]) -> Result<Vec<T>> {
    let home = patch_lookup(people, patches)?;
    let mut kept = Vec::with_capacity(clusters.len());
    for cluster in clusters {
        let mut best: Option<(usize, f64, u32)> = None;
        for &i in cluster {
            let patch = home[i];
            let margin = patch.boundary_distance(people[i].torso_px());
            let better = match best {
                None => true,
                Some((_, m, s)) => margin > m || (margin == m && patch.size > s),
            };
            if better {
                best = Some((i, margin, patch.size));
            }
        }
        let (i, _, _) = best.ok_or_else(|| Error::Config("empty cluster".into()))?;
        let mut person = people[i].clone();
        let seen: BTreeSet<usize> = cluster.iter().flat_map(|&j| people[j].seen_in()).collect();
        person.set_seen_in(seen.into_iter().collect());
        kept.push(person);
    }
    Ok(kept)
}

/// [`match_duplicates`] followed by [`merge`].
pub fn deduplicate<T: Detection + Clone>(people: &[T], patches: &[Patch], cfg: &MergeConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    let clusters = match_duplicates(people, patches, cfg)?;
    merge(people, &clusters, patches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(patch: usize, torso: (f64, f64), id: u64) -> LocatedPerson {
        LocatedPerson {
            id: Some(id),
            patch,
            torso_px: Pixel::new(torso.0, torso.1),
            hvip_px: Pixel::new(torso.0, torso.1 + 40.0),
            hvip_m: Point3::new(torso.0 / 100.0, 2.0, 10.0),
            torso_height: 1.0,
            torso_m: Point3::new(torso.0 / 100.0, 1.0, 10.0),
            collinearity_px: None,
            body_points: None,
            seen_in: vec![],
        }
    }

    fn patches() -> Vec<Patch> {
        vec![
            Patch { id: 0, x: 0, y: 0, size: 200, row: 0, overlap: false },
            Patch { id: 1, x: 100, y: 0, size: 200, row: 0, overlap: true },
            Patch { id: 2, x: 160, y: 0, size: 400, row: 1, overlap: false },
        ]
    }

    #[test]
    fn duplicate_pair_forms_one_cluster() {
        let people = vec![det(0, (150.0, 100.0), 1), det(1, (151.5, 100.0), 1)];
        assert_eq!(match_duplicates(&people, &patches(), &MergeConfig::default()).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn distant_people_stay_apart() {
        let people = vec![det(0, (50.0, 100.0), 1), det(1, (250.0, 100.0), 2)];
        let cfg = MergeConfig::default();
        assert_eq!(match_duplicates(&people, &patches(), &cfg).unwrap(), vec![vec![0], vec![1]]);
        let cfg3 = MergeConfig { use_3d: true, ..cfg };
        assert_eq!(match_duplicates(&people, &patches(), &cfg3).unwrap(), vec![vec![0], vec![1]]);
        assert!(match_duplicates::<LocatedPerson>(&[], &patches(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn same_patch_never_merges() {
        let people = vec![det(0, (150.0, 100.0), 1), det(0, (150.0, 101.0), 2)];
        assert_eq!(match_duplicates(&people, &patches(), &MergeConfig::default()).unwrap().len(), 2);
        // a third view cannot bridge two people of the same patch
        let people = vec![det(0, (150.0, 100.0), 1), det(0, (150.0, 104.0), 2), det(1, (150.0, 102.0), 1)];
        assert_eq!(match_duplicates(&people, &patches(), &MergeConfig::default()).unwrap().len(), 2);
    }

    #[test]
    fn needs_overlap_and_matching_hvip() {
        let cfg = MergeConfig::default();
        // close in the image, but the first torso lies outside the second's patch
        let people = vec![det(0, (95.0, 100.0), 1), det(1, (105.0, 100.0), 2)];
        assert_eq!(match_duplicates(&people, &patches(), &cfg).unwrap().len(), 2);
        // same torso pixel, HVIPs far apart
        let mut other = det(1, (150.0, 100.0), 2);
        other.hvip_px = Pixel::new(150.0, 190.0);
        let people = vec![det(0, (150.0, 100.0), 1), other];
        assert_eq!(match_duplicates(&people, &patches(), &cfg).unwrap().len(), 2);
    }

    #[test]
    fn keeps_detection_farthest_from_border() {
        // 10 px from patch 0's right edge, 40 px inside patch 1
        let people = vec![det(0, (190.0, 100.0), 1), det(1, (190.0, 100.0), 1)];
        let out = deduplicate(&people, &patches(), &MergeConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].patch, 1);
        assert_eq!(out[0].seen_in, vec![0, 1]);
    }

    #[test]
    fn ties_prefer_larger_patch() {
        let p = vec![
            Patch { id: 0, x: 0, y: 0, size: 100, row: 0, overlap: false },
            Patch { id: 1, x: 0, y: 0, size: 300, row: 1, overlap: false },
        ];
        let people = vec![det(0, (20.0, 50.0), 1), det(1, (20.0, 50.0), 1)];
        let out = deduplicate(&people, &p, &MergeConfig::default()).unwrap();
        assert_eq!(out[0].patch, 1);
    }

    #[test]
    fn singletons_and_idempotence() {
        let people = vec![det(0, (50.0, 100.0), 1), det(1, (190.0, 90.0), 2), det(0, (190.0, 90.0), 2), det(2, (400.0, 300.0), 3)];
        let cfg = MergeConfig::default();
        let once = deduplicate(&people, &patches(), &cfg).unwrap();
        assert_eq!(once.len(), 3);
        assert_eq!(once[0].torso_px, people[0].torso_px);
        assert_eq!(once[1].seen_in, vec![0, 1]);
        let twice = deduplicate(&once, &patches(), &cfg).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn survivors_that_shared_a_patch_stay_apart() {
        // two people in patch 0, one of them also seen in patch 1
        let people = vec![det(0, (150.0, 100.0), 1), det(0, (150.0, 110.0), 2), det(1, (150.0, 110.0), 2)];
        let cfg = MergeConfig::default();
        let once = deduplicate(&people, &patches(), &cfg).unwrap();
        assert_eq!(once.len(), 2);
        assert_eq!(deduplicate(&once, &patches(), &cfg).unwrap(), once);
    }

    #[test]
    fn unknown_patch_and_bad_config() {
        let people = vec![det(9, (50.0, 100.0), 1)];
        assert!(matches!(deduplicate(&people, &patches(), &MergeConfig::default()), Err(Error::Config(_))));
        let cfg = MergeConfig { match_radius_factor: 0.0, use_3d: false };
        assert!(deduplicate(&people, &patches(), &cfg).is_err());
    }
}
