//! 360 degree range scanner over road edges and vehicle rectangles.

use crate::geometry::{ray_segment, Obb, Segment, Vec2};

pub const N_BEAMS: usize = 240;
pub const LIDAR_RANGE: f64 = 50.0;

/// Direction of beam `k` relative to the sensor heading.
pub fn beam_angle(k: usize) -> f64 {
    std::f64::consts::TAU * k as f64 / N_BEAMS as f64
}

/// Normalized ranges `min(hit, 50) / 50`, beam 0 along `heading` and
/// increasing counter-clockwise.
pub fn lidar_scan(origin: Vec2, heading: f64, edges: &[Segment], boxes: &[Obb]) -> Vec<f64> {
    let near_edges: Vec<&Segment> = edges.iter().filter(|s| s.distance_to(origin) <= LIDAR_RANGE).collect();
    let near_boxes: Vec<&Obb> = boxes
        .iter()
        .filter(|b| b.center.dist(origin) - b.bounding_radius() <= LIDAR_RANGE)
        .collect();
    (0..N_BEAMS)
        .map(|k| {
            let dir = Vec2::from_angle(heading + beam_angle(k));
            let mut best = LIDAR_RANGE;
            for s in &near_edges {
                if let Some(t) = ray_segment(origin, dir, s) {
                    best = best.min(t);
                }
            }
            for b in &near_boxes {
                if let Some(t) = b.ray_hit(origin, dir) {
                    best = best.min(t);
                }
            }
            best / LIDAR_RANGE
        })
        .collect()
}
