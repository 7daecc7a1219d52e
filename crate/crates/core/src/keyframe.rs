//! Keyframes as seen by the loop-closing backend.

use crate::bow::{BowVector, BowVocabulary, KeyframeId};
use crate::features::{describe, BinaryDescriptor, DescriptorBits};
use crate::image::GrayImage;
use crate::liegroup::Sim3Pose;
use crate::pixelselect::{select_points, PointKind, SelectConfig, SelectError, SelectedPoint};
use nalgebra::Vector2;

/// Sparse inverse-depth map: pixels with known inverse depth, looked up by
/// nearest neighbour within a radius.
#[derive(Debug, Clone, Default)]
pub struct DepthMap {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<(Vector2<f64>, f64)>>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, samples: impl IntoIterator<Item = (Vector2<f64>, f64)>) -> Self {
        let cell = 8.0;
        let cols = (width as f64 / cell).ceil() as usize + 1;
        let rows = (height as f64 / cell).ceil() as usize + 1;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (p, d) in samples {
            if !(d > 0.0) || p.x < 0.0 || p.y < 0.0 {
                continue;
            }
            let (cx, cy) = ((p.x / cell) as usize, (p.y / cell) as usize);
            if cx < cols && cy < rows {
                buckets[cy * cols + cx].push((p, d));
            }
        }
        Self {
            cell,
            cols,
            rows,
            buckets,
        }
    }

    /// Inverse depth of the closest sample within `radius` pixels (must be <= 8).
    pub fn lookup(&self, p: &Vector2<f64>, radius: f64) -> Option<f64> {
        if self.buckets.is_empty() || p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let (cx, cy) = ((p.x / self.cell) as usize, (p.y / self.cell) as usize);
        let mut best: Option<(f64, f64)> = None;
        for y in cy.saturating_sub(1)..=(cy + 1).min(self.rows - 1) {
            for x in cx.saturating_sub(1)..=(cx + 1).min(self.cols - 1) {
                for (q, d) in &self.buckets[y * self.cols + x] {
                    let dist = (q - p).norm();
                    if dist <= radius && best.is_none_or(|(bd, _)| dist < bd) {
                        best = Some((dist, *d));
                    }
                }
            }
        }
        best.map(|(_, d)| d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub pixel: Vector2<f64>,
    pub inv_depth: Option<f64>,
    pub descriptor: BinaryDescriptor,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub timestamp: f64,
    /// Odometry estimate, world-to-camera.
    pub pose: Sim3Pose,
    pub points: Vec<SelectedPoint>,
    pub corners: Vec<Corner>,
    pub bow: BowVector,
}

impl Keyframe {
    pub fn descriptor_bits(&self) -> Vec<DescriptorBits> {
        self.corners.iter().map(|c| c.descriptor.bits).collect()
    }
}

/// Selects points and describes every corner of an image. Corner depths come
/// from `depth` when a sample lies within `depth_radius` pixels.
pub fn extract_corners(
    image: &GrayImage,
    select: &SelectConfig,
    depth: &DepthMap,
    depth_radius: f64,
) -> Result<(Vec<SelectedPoint>, Vec<Corner>), SelectError> {
    let points = select_points(image, select)?;
    let corners = points
        .iter()
        .filter(|p| p.kind == PointKind::Corner)
        .filter_map(|p| {
            describe(image, &p.pixel).ok().map(|descriptor| Corner {
                pixel: p.pixel,
                inv_depth: depth.lookup(&p.pixel, depth_radius),
                descriptor,
            })
        })
        .collect();
    Ok((points, corners))
}

/// Builds a keyframe; an empty corner set yields an empty BoW vector.
pub fn build_keyframe(
    id: KeyframeId,
    timestamp: f64,
    pose: Sim3Pose,
    points: Vec<SelectedPoint>,
    corners: Vec<Corner>,
    vocab: &BowVocabulary,
) -> Keyframe {
    let bits: Vec<DescriptorBits> = corners.iter().map(|c| c.descriptor.bits).collect();
    let bow = vocab.transform(&bits).unwrap_or_default();
    Keyframe {
        id,
        timestamp,
        pose,
        points,
        corners,
        bow,
    }
}
