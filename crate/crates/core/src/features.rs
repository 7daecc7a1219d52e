//! Oriented 256-bit binary descriptors and mutual nearest-neighbour matching.

use crate::image::GrayImage;
use nalgebra::Vector2;
use thiserror::Error;

/// Radius of the circular patch used for orientation.
pub const PATCH_RADIUS: i64 = 15;
/// Minimum distance of a described pixel from every image border.
pub const DESCRIBE_MARGIN: i64 = 16;
/// A test bit is set only if the second 3x3 sum exceeds the first by more
/// than this (a mean difference of 4 grey levels). Pairs on flat background
/// then read 0 consistently instead of following the pixel noise.
pub const COMPARE_MARGIN: u32 = 36;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("pixel ({0}, {1}) closer than {DESCRIBE_MARGIN} px to the image border")]
    BorderViolation(i64, i64),
}

pub type DescriptorBits = [u8; 32];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryDescriptor {
    pub bits: DescriptorBits,
    /// Patch orientation in radians.
    pub angle: f64,
}

impl BinaryDescriptor {
    pub fn distance(&self, other: &BinaryDescriptor) -> u32 {
        hamming(&self.bits, &other.bits)
    }
}

#[inline]
pub fn hamming(a: &DescriptorBits, b: &DescriptorBits) -> u32 {
    let mut d = 0;
    for k in 0..4 {
        let x = u64::from_le_bytes(a[k * 8..k * 8 + 8].try_into().unwrap());
        let y = u64::from_le_bytes(b[k * 8..k * 8 + 8].try_into().unwrap());
        d += (x ^ y).count_ones();
    }
    d
}

/// Test-point pairs `(x1, y1, x2, y2)`, uniform in a radius-13 disc. Generated
/// once from a fixed seed; rotated samples stay inside the orientation patch.
#[rustfmt::skip]
const PATTERN: [[i8; 4]; 256] = [
    [-5, 1, 8, 9], [12, -2, -4, -10], [4, -4, 8, 5], [-3, -12, 6, 6],
    [11, -3, 3, -12], [-3, -5, 7, 2], [-12, 0, -6, 7], [-3, -10, 6, 8],
    [4, 12, -4, 9], [-2, 0, 1, -6], [-11, -5, 4, -4], [-3, 4, -1, -12],
    [-7, -6, -1, -3], [1, 1, 0, -1], [-10, 4, -1, 3], [-5, 5, -5, -4],
    [-10, 4, -6, 0], [-7, 6, 6, 1], [3, 3, 3, 7], [-9, -9, -1, 0],
    [0, 6, 9, -5], [-5, -3, 3, -5], [4, -8, -10, 0], [-5, 9, -9, 0],
    [-3, -4, 4, -1], [4, -7, -6, 8], [3, 8, 5, -11], [6, 3, 6, -1],
    [4, 10, -3, -4], [2, -7, -1, 1], [1, -12, -2, 0], [11, -5, 7, 8],
    [0, 10, 9, 0], [-10, -7, 1, -2], [1, -12, -9, 0], [-13, 0, 5, -8],
    [-4, 6, -1, 11], [-2, 7, -11, 5], [4, 12, 1, -9], [6, -7, -8, -2],
    [-5, -10, 4, 2], [-10, -1, 0, 5], [8, 3, -2, 1], [-3, 3, 9, -9],
    [-10, 3, -1, -12], [-4, 11, -5, -10], [5, 3, -6, -4], [-3, -4, -5, -4],
    [-10, -7, 6, 0], [-12, -3, 7, -3], [3, 7, -2, 3], [-7, 3, -2, -12],
    [-4, 2, -4, -2], [-12, 4, -7, 10], [-5, 2, -11, 4], [-3, 4, -1, -8],
    [-7, -2, 9, -9], [-5, 3, -10, -6], [5, -7, 12, 5], [7, 9, 3, 7],
    [-3, -7, -12, -4], [-3, 0, 13, 0], [-1, 11, 6, 0], [-9, -9, -6, 9],
    [5, 12, 3, -9], [2, 9, -1, 7], [-11, 1, -9, 2], [-2, -8, -8, 9],
    [10, -3, 11, 0], [-12, -3, -6, 0], [-2, 1, -10, 1], [-9, 2, 4, 5],
    [0, -10, 7, -9], [-4, 6, 9, -3], [4, 9, 6, 0], [-1, 7, -6, -5],
    [2, -7, -2, -10], [-2, 11, 9, -4], [-1, 11, 2, -12], [1, 9, 8, 8],
    [4, -7, 3, -7], [12, -3, -10, -1], [5, -4, -5, -11], [-3, 7, -6, -1],
    [-5, 6, -6, 0], [9, -6, -1, 9], [2, -1, -5, 12], [0, 3, -5, 7],
    [-12, 4, 0, 0], [4, -2, -11, 4], [-7, 6, -3, 3], [5, 6, 3, 11],
    [-8, 10, -9, -6], [4, 1, -3, -10], [9, 6, -7, 3], [4, -1, -1, 4],
    [9, 1, 9, -3], [-4, 11, -4, -8], [5, -4, -4, -6], [5, -3, -9, 7],
    [-8, -10, 12, 3], [1, 0, 7, 0], [-7, -1, 1, -6], [-4, 12, 0, -7],
    [11, -6, -10, 5], [-5, 2, -4, -11], [11, 6, 0, -5], [-6, -11, -9, -5],
    [6, 7, -8, 0], [-7, -1, -4, -5], [3, -3, -3, 1], [-1, 8, 9, -4],
    [1, 12, 7, -3], [-6, -10, -2, 2], [6, -9, 0, 13], [8, -10, -2, -10],
    [-8, 6, 1, -10], [2, 7, -1, 7], [11, 4, -1, 0], [-2, 3, 1, -3],
    [-4, 3, 5, 8], [-9, 9, 8, -7], [-6, 7, 1, 5], [6, -5, -9, -6],
    [-6, -1, 2, 6], [2, -7, 1, -9], [-3, 6, 7, -4], [1, 2, 2, -5],
    [5, 12, -4, 8], [5, 7, -3, -12], [-6, -11, 0, 8], [-8, -2, -2, -9],
    [-9, 3, 9, -7], [-5, 5, -9, -7], [-3, -10, 6, 5], [-6, 4, 0, 1],
    [-4, 7, 2, -12], [-11, -6, -1, -6], [8, -9, 8, 9], [-3, -1, -1, 9],
    [-1, -4, -1, 11], [1, 10, -4, 10], [-6, -3, 6, -5], [-5, -2, 2, -12],
    [2, -11, 3, 7], [7, -6, -5, 0], [12, 2, -2, -3], [-10, 2, 8, 7],
    [-2, -4, -1, -2], [7, -10, 0, -4], [8, 8, 2, 4], [7, -4, -11, 2],
    [-2, 12, 2, -2], [12, -4, 3, 12], [2, 3, -1, 0], [6, 9, 6, -6],
    [-1, 1, 5, 7], [-10, 4, -4, -6], [-1, -10, -4, -6], [-2, -6, -1, 4],
    [9, -7, -7, 2], [8, -1, 1, 8], [-9, -9, 7, 9], [-3, -10, -8, -10],
    [-3, -11, -10, 2], [-10, -8, -2, 10], [1, 5, 1, -12], [3, -9, -7, -7],
    [6, 7, 5, -12], [3, 10, -7, 7], [7, 4, 5, 7], [-4, 1, 6, -4],
    [-3, -5, -3, 5], [5, -4, 7, 5], [5, 11, 7, 0], [2, -10, 5, 9],
    [6, -5, 0, 13], [4, 3, -8, 8], [10, 1, -12, -5], [-12, -1, -8, -4],
    [-5, 8, 10, 0], [0, -7, -3, -3], [4, -10, -4, 3], [-9, 1, 1, 12],
    [7, 0, 0, -5], [6, -2, -12, 5], [-4, -1, 3, 5], [-7, 7, -3, -8],
    [12, -3, 0, 1], [3, -3, -1, -7], [8, 7, 10, 5], [9, 8, 4, -3],
    [2, 6, 5, 0], [9, 4, 2, -5], [1, -2, -3, -1], [-2, 3, 11, -2],
    [-5, -4, 8, -4], [-3, -1, -7, 3], [-1, -4, -12, 4], [-7, -7, 1, 0],
    [5, -10, -4, 4], [-5, 3, -11, 2], [-9, 2, 2, 9], [-6, -11, 1, -6],
    [8, 7, 5, -5], [-6, 11, -2, -7], [3, -12, -2, 3], [7, 4, 10, 7],
    [2, -7, 11, 1], [7, -5, -4, 1], [5, -9, 6, 2], [0, 12, -3, 11],
    [-3, -5, 2, 1], [9, 3, -5, 4], [7, 10, 3, 6], [-8, 2, 1, 10],
    [-8, -1, 4, -8], [4, -8, -7, -1], [-6, 3, 8, 5], [-7, -7, 2, -5],
    [-2, 5, 12, 4], [-6, -3, -7, 5], [5, 0, -9, 5], [-5, 10, -2, 7],
    [-8, 2, -1, 8], [-8, -9, 6, 7], [7, 4, -2, 12], [3, 4, 0, -2],
    [8, -4, -1, -10], [5, 1, 8, 4], [3, 1, -5, 0], [8, -10, 8, 7],
    [7, -6, -5, -4], [-8, 0, -1, -2], [-5, 0, 12, 3], [-2, 6, -2, -1],
    [-10, -4, -1, 10], [-10, -1, 11, -6], [-8, 4, -7, 10], [-10, -5, 1, -2],
    [5, -12, 8, -5], [2, 2, 9, 3], [-3, 12, -5, 0], [11, -2, 0, 9],
    [-1, -5, -8, 5], [-2, -2, 2, -3], [3, 3, -12, -4], [9, -5, 6, -6],
    [1, -9, -5, 6], [2, 4, -4, -7], [-7, 2, -5, 10], [4, -7, -12, 2],
    [10, -7, -9, 5], [9, -2, -2, 11], [-3, 6, 6, -4], [-9, 8, -4, -5],
];

fn orientation(img: &GrayImage, cx: i64, cy: i64) -> f64 {
    let (mut m10, mut m01) = (0i64, 0i64);
    let r2 = PATCH_RADIUS * PATCH_RADIUS;
    let w = img.width() as usize;
    let px = img.pixels();
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        // half-width of the disc on this row
        let mut hw = PATCH_RADIUS;
        while hw * hw + dy * dy > r2 {
            hw -= 1;
        }
        let start = (cy + dy) as usize * w + (cx - hw) as usize;
        let row = &px[start..start + (2 * hw + 1) as usize];
        let mut sum = 0i64;
        for (dx, &v) in (-hw..=hw).zip(row) {
            let i = v as i64;
            sum += i;
            m10 += dx * i;
        }
        m01 += dy * sum;
    }
    if m10 == 0 && m01 == 0 {
        // flat or perfectly symmetric patch
        return 0.0;
    }
    (m01 as f64).atan2(m10 as f64)
}

#[inline]
fn box3(img: &GrayImage, x: i64, y: i64) -> u32 {
    let w = img.width() as usize;
    let px = img.pixels();
    let mut s = 0u32;
    for yy in y - 1..=y + 1 {
        let start = yy as usize * w + (x - 1) as usize;
        s += px[start..start + 3].iter().map(|&v| v as u32).sum::<u32>();
    }
    s
}

/// Round half away from zero without a libm call.
#[inline]
fn round(v: f64) -> i64 {
    (v + 0.5f64.copysign(v)) as i64
}

/// Computes the steered descriptor at the pixel nearest to `pixel`.
pub fn describe(img: &GrayImage, pixel: &Vector2<f64>) -> Result<BinaryDescriptor, FeatureError> {
    let (cx, cy) = (pixel.x.round() as i64, pixel.y.round() as i64);
    let (w, h) = (img.width() as i64, img.height() as i64);
    if cx < DESCRIBE_MARGIN || cy < DESCRIBE_MARGIN || cx >= w - DESCRIBE_MARGIN || cy >= h - DESCRIBE_MARGIN {
        return Err(FeatureError::BorderViolation(cx, cy));
    }
    let angle = orientation(img, cx, cy);
    let (s, c) = angle.sin_cos();
    let rot = |x: i8, y: i8| -> (i64, i64) {
        let (x, y) = (x as f64, y as f64);
        (round(c * x - s * y), round(s * x + c * y))
    };
    let mut bits = [0u8; 32];
    for (k, p) in PATTERN.iter().enumerate() {
        let (ax, ay) = rot(p[0], p[1]);
        let (bx, by) = rot(p[2], p[3]);
        if box3(img, cx + ax, cy + ay) + COMPARE_MARGIN < box3(img, cx + bx, cy + by) {
            bits[k / 8] |= 1 << (k % 8);
        }
    }
    Ok(BinaryDescriptor { bits, angle })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMatch {
    pub idx_ref: usize,
    pub idx_cur: usize,
    pub distance: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub max_distance: u32,
    /// Upper bound on best / second-best distance.
    pub ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_distance: 64,
            ratio: 0.9,
        }
    }
}

/// Best and second-best distances from `query` into `pool`; ties keep the lower index.
fn nearest_two(query: &DescriptorBits, pool: &[BinaryDescriptor]) -> Option<(usize, u32, u32)> {
    let mut best: Option<(usize, u32)> = None;
    let mut second = u32::MAX;
    for (j, d) in pool.iter().enumerate() {
        let dist = hamming(query, &d.bits);
        match best {
            Some((_, bd)) if dist >= bd => second = second.min(dist),
            Some((_, bd)) => {
                second = bd;
                best = Some((j, dist));
            }
            None => best = Some((j, dist)),
        }
    }
    best.map(|(j, d)| (j, d, second))
}

/// Mutual nearest neighbours under Hamming distance, filtered by absolute
/// distance and by the ratio test on the reference side.
pub fn match_descriptors(
    desc_ref: &[BinaryDescriptor],
    desc_cur: &[BinaryDescriptor],
    cfg: &MatchConfig,
) -> Vec<FeatureMatch> {
    if desc_ref.is_empty() || desc_cur.is_empty() {
        return Vec::new();
    }
    let back: Vec<usize> = desc_cur
        .iter()
        .map(|d| nearest_two(&d.bits, desc_ref).map(|x| x.0).unwrap_or(usize::MAX))
        .collect();
    let mut out = Vec::new();
    for (i, d) in desc_ref.iter().enumerate() {
        let Some((j, best, second)) = nearest_two(&d.bits, desc_cur) else {
            continue;
        };
        if back[j] != i || best > cfg.max_distance {
            continue;
        }
        if second != u32::MAX && best as f64 > cfg.ratio * second as f64 {
            continue;
        }
        out.push(FeatureMatch {
            idx_ref: i,
            idx_cur: j,
            distance: best,
        });
    }
    out
}
