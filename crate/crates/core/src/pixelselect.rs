//! Hybrid point selection: a quota of Shi-Tomasi corners for place
//! recognition, topped up with gradient-grid picks for tracking.

use crate::image::GrayImage;
use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("pixel ({u}, {v}) too close to the border for window {window}")]
    BorderViolation { u: i64, v: i64, window: u32 },
    #[error("no points could be selected (image has no usable gradient)")]
    DegenerateImage,
    #[error("invalid selection parameters: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointKind {
    Corner,
    Gradient,
}

impl PointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PointKind::Corner => "corner",
            PointKind::Gradient => "gradient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedPoint {
    pub pixel: Vector2<f64>,
    pub kind: PointKind,
    /// Shi-Tomasi score for corners, gradient magnitude otherwise.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectConfig {
    pub budget: usize,
    pub corner_quota: usize,
    pub corner_threshold: f64,
    /// Half-width of the structure tensor window.
    pub window: u32,
    pub nms_radius: u32,
    /// Added to the regional median gradient to form the pick threshold.
    pub gradient_threshold_add: f64,
    pub region_size: u32,
    pub max_passes: u32,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            corner_quota: 500,
            corner_threshold: 20.0,
            window: 2,
            nms_radius: 10,
            gradient_threshold_add: 7.0,
            region_size: 32,
            max_passes: 3,
        }
    }
}

/// Radius of the descriptor patch; selected points keep clear of it.
pub const DESCRIPTOR_MARGIN: u32 = 16;

impl SelectConfig {
    pub fn border(&self) -> u32 {
        DESCRIPTOR_MARGIN.max(self.window + 1)
    }

    fn validate(&self) -> Result<(), SelectError> {
        if self.corner_quota > self.budget {
            return Err(SelectError::InvalidConfig(format!(
                "corner quota {} exceeds budget {}",
                self.corner_quota, self.budget
            )));
        }
        if self.region_size == 0 || self.nms_radius == 0 {
            return Err(SelectError::InvalidConfig(
                "region size and NMS radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Smallest eigenvalue of `[[a, b], [b, c]]`.
#[inline]
pub fn min_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    let half_trace = 0.5 * (a + c);
    let d = 0.5 * (a - c);
    (half_trace - (d * d + b * b).sqrt()).max(0.0)
}

#[inline]
fn central_gradient(img: &GrayImage, x: i64, y: i64) -> (f64, f64) {
    let gx = 0.5 * (img.get_i(x + 1, y) as f64 - img.get_i(x - 1, y) as f64);
    let gy = 0.5 * (img.get_i(x, y + 1) as f64 - img.get_i(x, y - 1) as f64);
    (gx, gy)
}

/// Sum of the gradient structure tensor over the `(2w+1)^2` window at `(u, v)`,
/// returned as `(sum gx^2, sum gx gy, sum gy^2)`.
pub fn structure_tensor(img: &GrayImage, u: i64, v: i64, window: u32) -> Result<(f64, f64, f64), SelectError> {
    let w = window as i64;
    let (width, height) = (img.width() as i64, img.height() as i64);
    if u - w - 1 < 0 || v - w - 1 < 0 || u + w + 1 >= width || v + w + 1 >= height {
        return Err(SelectError::BorderViolation { u, v, window });
    }
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for y in v - w..=v + w {
        for x in u - w..=u + w {
            let (gx, gy) = central_gradient(img, x, y);
            a += gx * gx;
            b += gx * gy;
            c += gy * gy;
        }
    }
    Ok((a, b, c))
}

pub fn shi_tomasi_score(img: &GrayImage, u: i64, v: i64, window: u32) -> Result<f64, SelectError> {
    let (a, b, c) = structure_tensor(img, u, v, window)?;
    Ok(min_eigenvalue(a, b, c))
}

/// Per-pixel gradients and derived maps for a whole image.
///
/// Gradients are stored doubled (`2 g`), which keeps them integral; every
/// derived quantity equals the one computed from [`central_gradient`].
struct GradientMaps {
    width: usize,
    height: usize,
    gx2: Vec<i32>,
    gy2: Vec<i32>,
    /// `(2 |g|)^2`
    sq: Vec<u32>,
    mag: Vec<f64>,
}

impl GradientMaps {
    fn new(img: &GrayImage) -> Self {
        let (width, height) = (img.width() as usize, img.height() as usize);
        let mut gx2 = vec![0i32; width * height];
        let mut gy2 = vec![0i32; width * height];
        let px = img.pixels();
        for y in 1..height - 1 {
            for x in 1..width - 1 {
                let i = y * width + x;
                gx2[i] = px[i + 1] as i32 - px[i - 1] as i32;
                gy2[i] = px[i + width] as i32 - px[i - width] as i32;
            }
        }
        let sq: Vec<u32> = gx2.iter().zip(&gy2).map(|(a, b)| (a * a + b * b) as u32).collect();
        // sqrt(s / 4) == sqrt(s) / 2 exactly, so this matches the f64 magnitude
        let mag = sq.iter().map(|&s| (s as f64).sqrt() * 0.5).collect();
        Self {
            width,
            height,
            gx2,
            gy2,
            sq,
            mag,
        }
    }

    #[inline]
    fn magnitude(&self, idx: usize) -> f64 {
        self.mag[idx]
    }

    /// Shi-Tomasi score for every pixel at least `window + 1` from the border
    /// (zero elsewhere). Box sums are accumulated in integers and are exact, so
    /// the scores agree bit-for-bit with [`shi_tomasi_score`].
    fn shi_tomasi_map(&self, window: u32) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let stride = w + 1;
        let mut ia = vec![0i64; stride * (h + 1)];
        let mut ib = vec![0i64; stride * (h + 1)];
        let mut ic = vec![0i64; stride * (h + 1)];
        for y in 0..h {
            let (mut ra, mut rb, mut rc) = (0i64, 0i64, 0i64);
            for x in 0..w {
                let i = y * w + x;
                let (gx, gy) = (self.gx2[i] as i64, self.gy2[i] as i64);
                ra += gx * gx;
                rb += gx * gy;
                rc += gy * gy;
                let o = (y + 1) * stride + x + 1;
                ia[o] = ra + ia[o - stride];
                ib[o] = rb + ib[o - stride];
                ic[o] = rc + ic[o - stride];
            }
        }
        let r = window as usize;
        let mut out = vec![0.0; w * h];
        for y in r + 1..h.saturating_sub(r + 1) {
            let (y0, y1) = ((y - r) * stride, (y + r + 1) * stride);
            for x in r + 1..w.saturating_sub(r + 1) {
                let (x0, x1) = (x - r, x + r + 1);
                let sum = |t: &[i64]| (t[y1 + x1] - t[y0 + x1] - t[y1 + x0] + t[y0 + x0]) as f64 * 0.25;
                out[y * w + x] = min_eigenvalue(sum(&ia), sum(&ib), sum(&ic));
            }
        }
        out
    }
}

/// Median of doubled squared magnitudes, returned as a magnitude.
fn median_magnitude(values: &mut [u32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable(mid);
    (*m as f64).sqrt() * 0.5
}

/// Corner candidates after non-maximum suppression, strongest first.
///
/// A candidate must clear `corner_threshold`, be a maximum of its 3x3
/// neighbourhood, and lie at least `nms_radius` from every stronger accepted
/// corner. Equal scores are ordered by raster index.
fn select_corners(scores: &[f64], width: usize, height: usize, border: usize, cfg: &SelectConfig) -> Vec<SelectedPoint> {
    if cfg.corner_quota == 0 {
        return Vec::new();
    }
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for y in border..height.saturating_sub(border) {
        for x in border..width.saturating_sub(border) {
            let i = y * width + x;
            let s = scores[i];
            if s < cfg.corner_threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let j = ((y as i64 + dy) as usize) * width + (x as i64 + dx) as usize;
                    // strict on earlier raster neighbours keeps plateaus single
                    let earlier = j < i;
                    if scores[j] > s || (earlier && scores[j] == s) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((s, i));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let r = cfg.nms_radius as usize;
    let r2 = (r * r) as i64;
    let cells_x = width / r + 1;
    let cells_y = height / r + 1;
    let mut grid: Vec<Vec<(i64, i64)>> = vec![Vec::new(); cells_x * cells_y];
    let mut out = Vec::with_capacity(cfg.corner_quota);
    for (s, i) in candidates {
        let (x, y) = ((i % width) as i64, (i / width) as i64);
        let (cx, cy) = (x as usize / r, y as usize / r);
        let mut clear = true;
        'cells: for ny in cy.saturating_sub(1)..=(cy + 1).min(cells_y - 1) {
            for nx in cx.saturating_sub(1)..=(cx + 1).min(cells_x - 1) {
                for &(px, py) in &grid[ny * cells_x + nx] {
                    let d2 = (px - x) * (px - x) + (py - y) * (py - y);
                    if d2 < r2 {
                        clear = false;
                        break 'cells;
                    }
                }
            }
        }
        if !clear {
            continue;
        }
        grid[cy * cells_x + cx].push((x, y));
        out.push(SelectedPoint {
            pixel: Vector2::new(x as f64, y as f64),
            kind: PointKind::Corner,
            score: s,
        });
        if out.len() == cfg.corner_quota {
            break;
        }
    }
    out
}

/// One pass of block-wise gradient picks with block size `g`.
fn gradient_pass(
    maps: &GradientMaps,
    thresholds: &[f64],
    regions_x: usize,
    taken: &[bool],
    border: usize,
    g: usize,
    cfg: &SelectConfig,
) -> Vec<(f64, usize)> {
    let (w, h) = (maps.width, maps.height);
    let rs = cfg.region_size as usize;
    let mut picks = Vec::new();
    let mut by = border;
    while by < h - border {
        let mut bx = border;
        while bx < w - border {
            let mut best: Option<(f64, usize)> = None;
            for y in by..(by + g).min(h - border) {
                for x in bx..(bx + g).min(w - border) {
                    let i = y * w + x;
                    if taken[i] {
                        continue;
                    }
                    let m = maps.magnitude(i);
                    // strict comparison keeps the smallest raster index on ties
                    if best.is_none_or(|(bm, _)| m > bm) {
                        best = Some((m, i));
                    }
                }
            }
            if let Some((m, i)) = best {
                let t = thresholds[(i / w / rs) * regions_x + (i % w) / rs];
                if m > t {
                    picks.push((m, i));
                }
            }
            bx += g;
        }
        by += g;
    }
    picks
}

/// Selects up to `budget` points: first up to `corner_quota` corners, then
/// gradient-grid picks for the rest of the budget.
pub fn select_points(img: &GrayImage, cfg: &SelectConfig) -> Result<Vec<SelectedPoint>, SelectError> {
    cfg.validate()?;
    let maps = GradientMaps::new(img);
    let (w, h) = (maps.width, maps.height);
    let border = cfg.border() as usize;
    if 2 * border >= w || 2 * border >= h {
        return Err(SelectError::DegenerateImage);
    }

    let scores = maps.shi_tomasi_map(cfg.window);
    let mut points = select_corners(&scores, w, h, border, cfg);

    let target = cfg.budget - points.len();
    if target > 0 {
        let rs = cfg.region_size as usize;
        let regions_x = w.div_ceil(rs);
        let regions_y = h.div_ceil(rs);
        let mut thresholds = Vec::with_capacity(regions_x * regions_y);
        let mut buf: Vec<u32> = Vec::with_capacity(rs * rs);
        for ry in 0..regions_y {
            for rx in 0..regions_x {
                buf.clear();
                for y in ry * rs..((ry + 1) * rs).min(h) {
                    buf.extend_from_slice(&maps.sq[y * w + rx * rs..y * w + ((rx + 1) * rs).min(w)]);
                }
                thresholds.push(median_magnitude(&mut buf) + cfg.gradient_threshold_add);
            }
        }

        let mut taken = vec![false; w * h];
        for p in &points {
            taken[p.pixel.y as usize * w + p.pixel.x as usize] = true;
        }

        let area = ((w - 2 * border) * (h - 2 * border)) as f64;
        let mut g = ((area / target as f64).sqrt().round() as usize).max(1);
        let mut best: Vec<(f64, usize)> = Vec::new();
        for pass in 0..cfg.max_passes.max(1) {
            let picks = gradient_pass(&maps, &thresholds, regions_x, &taken, border, g, cfg);
            let n = picks.len();
            let closer = best.is_empty()
                || (n as i64 - target as i64).abs() < (best.len() as i64 - target as i64).abs();
            if closer {
                best = picks;
            }
            if pass + 1 == cfg.max_passes || n == 0 {
                break;
            }
            let ratio = n as f64 / target as f64;
            let next_g = if n > target {
                ((g as f64) * ratio.sqrt()).ceil() as usize
            } else if ratio < 0.9 {
                ((g as f64) * ratio.sqrt()).floor() as usize
            } else {
                break;
            };
            let next_g = next_g.max(1);
            if next_g == g {
                break;
            }
            g = next_g;
        }
        if best.len() > target {
            best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            best.truncate(target);
            best.sort_by_key(|&(_, i)| i);
        }
        points.extend(best.into_iter().map(|(m, i)| SelectedPoint {
            pixel: Vector2::new((i % w) as f64, (i / w) as f64),
            kind: PointKind::Gradient,
            score: m,
        }));
    }

    if points.is_empty() {
        return Err(SelectError::DegenerateImage);
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, SymmetricEigen};

    fn checkerboard(size: u32, cell: u32) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| if (x / cell + y / cell) % 2 == 0 { 30 } else { 220 }).unwrap()
    }

    #[test]
    fn constant_image_scores_zero() {
        let img = GrayImage::from_fn(64, 64, |_, _| 77).unwrap();
        for (u, v) in [(3, 3), (32, 40), (60, 60)] {
            assert_eq!(shi_tomasi_score(&img, u, v, 2).unwrap(), 0.0);
        }
    }

    #[test]
    fn step_edge_is_rank_one() {
        let img = GrayImage::from_fn(64, 64, |x, _| if x < 32 { 20 } else { 200 }).unwrap();
        let s = shi_tomasi_score(&img, 32, 30, 2).unwrap();
        assert!(s.abs() < 1e-9, "{s}");
        let (a, _, c) = structure_tensor(&img, 32, 30, 2).unwrap();
        assert!(a > 1000.0 && c == 0.0);
    }

    #[test]
    fn checkerboard_corner_matches_eigen_oracle() {
        let img = checkerboard(64, 16);
        let (u, v) = (32, 32);
        let (a, b, c) = structure_tensor(&img, u, v, 2).unwrap();
        let eig = SymmetricEigen::new(Matrix2::new(a, b, b, c));
        let oracle = eig.eigenvalues.min();
        let s = shi_tomasi_score(&img, u, v, 2).unwrap();
        assert!(oracle > 1000.0);
        assert!(((s - oracle) / oracle).abs() < 1e-6);
    }

    #[test]
    fn score_map_matches_pointwise_score() {
        let img = GrayImage::from_fn(48, 40, |x, y| ((x * x * 3 + y * 17 + x * y) % 251) as u8).unwrap();
        let maps = GradientMaps::new(&img);
        let map = maps.shi_tomasi_map(2);
        for y in 3..37 {
            for x in 3..45 {
                let s = shi_tomasi_score(&img, x, y, 2).unwrap();
                assert_eq!(map[y as usize * 48 + x as usize], s);
            }
        }
    }

    #[test]
    fn border_violation() {
        let img = checkerboard(64, 16);
        assert!(matches!(
            shi_tomasi_score(&img, 2, 30, 2),
            Err(SelectError::BorderViolation { .. })
        ));
        assert!(matches!(
            shi_tomasi_score(&img, 30, 61, 2),
            Err(SelectError::BorderViolation { .. })
        ));
        assert!(shi_tomasi_score(&img, 3, 60, 2).is_ok());
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = GrayImage::from_fn(96, 96, |_, _| 120).unwrap();
        assert_eq!(select_points(&img, &SelectConfig::default()), Err(SelectError::DegenerateImage));
    }

    #[test]
    fn quota_larger_than_budget_rejected() {
        let img = checkerboard(96, 16);
        let cfg = SelectConfig {
            budget: 10,
            corner_quota: 11,
            ..Default::default()
        };
        assert!(matches!(select_points(&img, &cfg), Err(SelectError::InvalidConfig(_))));
    }

    #[test]
    fn checkerboard_corners_respect_nms_and_border() {
        let img = checkerboard(128, 16);
        let cfg = SelectConfig {
            budget: 200,
            corner_quota: 50,
            ..Default::default()
        };
        let pts = select_points(&img, &cfg).unwrap();
        let corners: Vec<_> = pts.iter().filter(|p| p.kind == PointKind::Corner).collect();
        assert!(!corners.is_empty());
        for (i, a) in corners.iter().enumerate() {
            assert!(a.score >= cfg.corner_threshold);
            for b in &corners[i + 1..] {
                assert!((a.pixel - b.pixel).norm() >= cfg.nms_radius as f64);
            }
        }
        let border = cfg.border() as f64;
        for p in &pts {
            assert!(p.pixel.x >= border && p.pixel.y >= border);
            assert!(p.pixel.x < 128.0 - border && p.pixel.y < 128.0 - border);
        }
        assert!(pts.len() <= cfg.budget);
    }
}
