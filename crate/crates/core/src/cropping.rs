//! Adaptive human-centric cropping.
//!
//! Rows of square blocks grow geometrically from the top of the active region
//! to the bottom so that people occupy roughly half of their block's height.
//! Overlap blocks are added between horizontally adjacent blocks and across
//! row boundaries so every person appears untruncated in some patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pixel;

/// Smallest / largest person-to-patch height ratio counted as a good scale.
pub const SCALE_RATIO_RANGE: (f64, f64) = (0.3, 0.8);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    /// Person height in pixels at the top of the active region.
    pub top_height: f64,
    /// Person height in pixels at the bottom of the active region.
    pub bottom_height: f64,
    /// First image row of the active region.
    pub upper_bound: u32,
    /// One past the last image row of the active region.
    pub lower_bound: u32,
    pub image_width: u32,
    pub image_height: u32,
}

impl CropParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.top_height > 0.0
            && self.top_height <= self.bottom_height
            && self.bottom_height.is_finite()
            && self.upper_bound < self.lower_bound
            && self.lower_bound <= self.image_height
            && self.image_width > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid crop parameters {self:?}")))
        }
    }

    pub fn span(&self) -> u32 {
        self.lower_bound - self.upper_bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropLayout {
    pub rows: usize,
    pub ratio: f64,
    /// Block side lengths from top to bottom, in pixels.
    pub sizes: Vec<u32>,
    /// `|c_n − 2·h_b|` evaluated on the unrounded sequence.
    pub objective: f64,
}

/// Square crop in the global image frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub id: usize,
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub row: usize,
    pub overlap: bool,
}

impl Patch {
    /// Upper-left corner in global pixels.
    pub fn t_crop(&self) -> Pixel {
        Pixel::new(self.x as f64, self.y as f64)
    }

    pub fn center(&self) -> Pixel {
        let half = self.size as f64 / 2.0;
        Pixel::new(self.x as f64 + half, self.y as f64 + half)
    }

    pub fn contains(&self, p: Pixel) -> bool {
        let (x0, y0) = (self.x as f64, self.y as f64);
        let s = self.size as f64;
        p.u >= x0 && p.u <= x0 + s && p.v >= y0 && p.v <= y0 + s
    }

    pub fn contains_box(&self, b: &BBox) -> bool {
        self.contains(Pixel::new(b.x, b.y)) && self.contains(Pixel::new(b.x + b.w, b.y + b.h))
    }

    /// Distance from `p` to the nearest patch edge; negative outside.
    pub fn boundary_distance(&self, p: Pixel) -> f64 {
        let (x0, y0) = (self.x as f64, self.y as f64);
        let s = self.size as f64;
        (p.u - x0).min(x0 + s - p.u).min(p.v - y0).min(y0 + s - p.v)
    }
}

/// Axis-aligned box `[x, y, w, h]` in global pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox { x: a[0], y: a[1], w: a[2], h: a[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn from_points(points: impl IntoIterator<Item = Pixel>) -> Option<BBox> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo = Pixel::new(lo.u.min(p.u), lo.v.min(p.v));
            hi = Pixel::new(hi.u.max(p.u), hi.v.max(p.v));
        }
        Some(BBox { x: lo.u, y: lo.v, w: hi.u - lo.u, h: hi.v - lo.v })
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
}

pub fn local_to_global(p_local: Pixel, patch: &Patch) -> Pixel {
    if p_local.u < 0.0 || p_local.v < 0.0 || p_local.u > patch.size as f64 || p_local.v > patch.size as f64 {
        log::debug!("local pixel {p_local:?} lies outside patch {}", patch.id);
    }
    p_local + patch.t_crop()
}

pub fn global_to_local(p: Pixel, patch: &Patch) -> Pixel {
    p - patch.t_crop()
}

fn geometric_sum(first: f64, ratio: f64, n: usize) -> f64 {
    let mut term = first;
    let mut sum = 0.0;
    for _ in 0..n {
        sum += term;
        term *= ratio;
    }
    sum
}

/// Positive ratio `q` with `first·(1 + q + … + q^{n−1}) = span`, for `n ≥ 2`
/// and `span > first`.
fn solve_ratio(first: f64, span: f64, n: usize) -> f64 {
    if (span - first * n as f64).abs() < 1e-9 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, (span / first).max(1.0));
    // bisect down to adjacent floats
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if geometric_sum(first, mid, n) < span {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (geometric_sum(first, lo, n) - span).abs() < (geometric_sum(first, hi, n) - span).abs() {
        lo
    } else {
        hi
    }
}

/// Rounds a continuous block sequence to pixels by rounding its cumulative
/// sums, so every block stays within one pixel of its continuous size and
/// the total is exactly `span`. `None` when a block would vanish.
fn round_sizes(first: f64, ratio: f64, n: usize, span: u32) -> Option<Vec<u32>> {
    let mut sizes = Vec::with_capacity(n);
    let (mut cumulative, mut placed, mut c) = (0.0, 0i64, first);
    for k in 0..n {
        cumulative += c;
        let edge = if k + 1 == n { span as i64 } else { (cumulative.round() as i64).min(span as i64) };
        let size = edge - placed;
        if size < 1 {
            return None;
        }
        sizes.push(size as u32);
        placed = edge;
        c *= ratio;
    }
    Some(sizes)
}

/// Picks the row count and ratio whose bottom block best matches twice the
/// bottom person height, scanning every feasible row count.
pub fn solve_layout(params: &CropParams) -> Result<CropLayout> {
    params.validate()?;
    let span = params.span();
    let spanf = span as f64;
    let first = 2.0 * params.top_height;
    let target = 2.0 * params.bottom_height;
    if spanf < first {
        return Err(Error::LayoutInfeasible(format!(
            "region of {span} px is shorter than one block of {first} px"
        )));
    }
    let n_max = (spanf / first).ceil() as usize;
    let mut best: Option<CropLayout> = None;
    for n in 1..=n_max.max(1) {
        let ratio = if n == 1 {
            // a single block only satisfies the span constraint up to rounding
            if (spanf - first).abs() > 0.5 {
                continue;
            }
            1.0
        } else {
            if spanf <= first {
                continue;
            }
            solve_ratio(first, spanf, n)
        };
        let last = first * ratio.powi(n as i32 - 1);
        let objective = (last - target).abs();
        if best.as_ref().is_some_and(|b| objective >= b.objective - 1e-9) {
            continue;
        }
        let Some(sizes) = round_sizes(first, ratio, n, span) else {
            continue;
        };
        best = Some(CropLayout { rows: n, ratio, sizes, objective });
    }
    best.ok_or_else(|| Error::LayoutInfeasible("no row count satisfies the span constraint".into()))
}

/// Left edges of blocks of side `size` tiling `[0, extent)`, the last one
/// shifted left to stay inside, followed by the half-shifted overlap blocks
/// between neighbours.
fn tile(size: u32, extent: u32) -> (Vec<u32>, Vec<u32>) {
    if size >= extent {
        return (vec![0], Vec::new());
    }
    let mut base = Vec::new();
    let mut x = 0u32;
    loop {
        if x + size >= extent {
            let clipped = extent - size;
            if base.last() != Some(&clipped) {
                base.push(clipped);
            }
            break;
        }
        base.push(x);
        x += size;
    }
    let overlaps = base.windows(2).map(|w| (w[0] + w[1]) / 2).collect();
    (base, overlaps)
}

/// Builds the patch grid for rows given as `(top, size)`.
fn patches_for_rows(rows: &[(u32, u32)], width: u32) -> Vec<Patch> {
    let mut patches = Vec::new();
    let mut push = |x: u32, y: u32, size: u32, row: usize, overlap: bool| {
        let id = patches.len();
        patches.push(Patch { id, x, y, size, row, overlap });
    };
    for (row, &(y, size)) in rows.iter().enumerate() {
        let (base, over) = tile(size, width);
        for x in base {
            push(x, y, size, row, false);
        }
        for x in over {
            push(x, y, size, row, true);
        }
    }
    for (row, pair) in rows.windows(2).enumerate() {
        let ((y0, c0), (y1, c1)) = (pair[0], pair[1]);
        let size = (c0 + c1) / 2;
        let y = (y0 + y1) / 2;
        let (base, over) = tile(size, width);
        for x in base.into_iter().chain(over) {
            push(x, y, size, row, true);
        }
    }
    patches
}

pub fn generate_patches(layout: &CropLayout, params: &CropParams) -> Vec<Patch> {
    let mut rows = Vec::with_capacity(layout.sizes.len());
    let mut y = params.upper_bound;
    for &c in &layout.sizes {
        rows.push((y, c));
        y += c;
    }
    patches_for_rows(&rows, params.image_width)
}

/// Constant-size grid over the active region, with the same overlap rule.
pub fn uniform_layout(params: &CropParams, block: u32) -> Result<Vec<Patch>> {
    if block == 0 {
        return Err(Error::Config("uniform block size must be positive".into()));
    }
    params.validate()?;
    let (ys, _) = tile(block, params.span());
    let rows: Vec<(u32, u32)> = ys.into_iter().map(|y| (params.upper_bound + y, block)).collect();
    Ok(patches_for_rows(&rows, params.image_width))
}

/// Fraction of people that fit untruncated in some patch at a height ratio
/// within [`SCALE_RATIO_RANGE`].
pub fn cropping_score(people: &[BBox], patches: &[Patch]) -> Result<f64> {
    if people.is_empty() {
        return Err(Error::Undefined("cropping score of an empty crowd".into()));
    }
    let (lo, hi) = SCALE_RATIO_RANGE;
    let good = people
        .iter()
        .filter(|b| {
            patches.iter().any(|p| {
                let ratio = b.h / p.size as f64;
                (lo..=hi).contains(&ratio) && p.contains_box(b)
            })
        })
        .count();
    Ok(good as f64 / people.len() as f64)
}

/// Theil–Sen slope/intercept of `ys` against `xs`.
fn theil_sen(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let mut slopes = Vec::new();
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let dx = xs[j] - xs[i];
            if dx.abs() > 1e-9 {
                slopes.push((ys[j] - ys[i]) / dx);
            }
        }
    }
    let slope = median(&mut slopes)?;
    let mut intercepts: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - slope * x).collect();
    Some((slope, median(&mut intercepts)?))
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    Some(if values.len() % 2 == 0 {
        0.5 * (values[m - 1] + values[m])
    } else {
        values[m]
    })
}

/// Estimates crop parameters from annotated person boxes: the active region
/// spans all boxes and person heights come from a robust linear fit of box
/// height against box bottom row.
pub fn estimate_crop_params(boxes: &[BBox], image_width: u32, image_height: u32) -> Result<CropParams> {
    if boxes.len() < 2 {
        return Err(Error::InsufficientData("need at least two boxes to estimate crop parameters".into()));
    }
    let top = boxes.iter().map(|b| b.y).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let bottom = boxes.iter().map(|b| b.bottom()).fold(f64::NEG_INFINITY, f64::max).ceil();
    let bottom = (bottom as u32).min(image_height);
    let rows: Vec<f64> = boxes.iter().map(|b| b.bottom()).collect();
    let heights: Vec<f64> = boxes.iter().map(|b| b.h).collect();
    let (slope, intercept) = theil_sen(&rows, &heights)
        .ok_or_else(|| Error::InsufficientData("all boxes share one row".into()))?;
    let min_h = heights.iter().copied().fold(f64::INFINITY, f64::min);
    // a person whose box top touches the upper bound: h = a + b·(top + h)
    let mut h_top = if slope < 1.0 {
        (intercept + slope * top as f64) / (1.0 - slope)
    } else {
        min_h
    };
    let mut h_bottom = intercept + slope * bottom as f64;
    if !(h_top > 0.0) {
        h_top = min_h;
    }
    if h_bottom < h_top {
        std::mem::swap(&mut h_top, &mut h_bottom);
    }
    let span = bottom.saturating_sub(top) as f64;
    h_top = h_top.min(span / 2.0).max(0.5);
    h_bottom = h_bottom.max(h_top);
    let params = CropParams {
        top_height: h_top,
        bottom_height: h_bottom,
        upper_bound: top,
        lower_bound: bottom,
        image_width,
        image_height,
    };
    params.validate()?;
    Ok(params)
}
