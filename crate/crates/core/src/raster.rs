//! Binary spatial and pose maps rasterized in the union frame of a pair.

use crate::scene::{BoundingBox, NUM_KEYPOINTS};
use crate::tensor::Tensor;

pub const MAP_SIZE: usize = 64;

/// Edges over the 17-joint keypoint layout (nose, eyes, ears, shoulders,
/// elbows, wrists, hips, knees, ankles).
pub const SKELETON: [(usize, usize); 16] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (0, 5),
    (0, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

/// `[2, 64, 64]`: channel 0 the human box, channel 1 the object box.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    pub grid: Tensor,
}

/// `[1, 64, 64]` line drawing of the skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseMap {
    pub grid: Tensor,
    /// Set when no keypoints were available and the grid is all zero.
    pub missing: bool,
}

fn fill_box(plane: &mut [f64], b: &BoundingBox, frame: &BoundingBox) {
    let cw = frame.width() / MAP_SIZE as f64;
    let ch = frame.height() / MAP_SIZE as f64;
    for r in 0..MAP_SIZE {
        let cy = frame.y1 + (r as f64 + 0.5) * ch;
        if cy < b.y1 || cy > b.y2 {
            continue;
        }
        for c in 0..MAP_SIZE {
            let cx = frame.x1 + (c as f64 + 0.5) * cw;
            if cx >= b.x1 && cx <= b.x2 {
                plane[r * MAP_SIZE + c] = 1.0;
            }
        }
    }
}

/// A cell is set iff its center lies inside the box (boundary inclusive).
pub fn render_spatial_map(human: &BoundingBox, object: &BoundingBox) -> SpatialMap {
    let frame = human.union(object);
    let plane = MAP_SIZE * MAP_SIZE;
    let mut data = vec![0.0; 2 * plane];
    fill_box(&mut data[..plane], human, &frame);
    fill_box(&mut data[plane..], object, &frame);
    SpatialMap {
        grid: Tensor::raw(vec![2, MAP_SIZE, MAP_SIZE], data),
    }
}

fn to_grid(p: [f64; 2], frame: &BoundingBox) -> (f64, f64) {
    (
        (p[0] - frame.x1) / frame.width() * MAP_SIZE as f64,
        (p[1] - frame.y1) / frame.height() * MAP_SIZE as f64,
    )
}

/// Cell containing a grid coordinate in `[0, MAP_SIZE]`; the far edge belongs to the last cell.
fn to_cell((gx, gy): (f64, f64)) -> (i64, i64) {
    let last = MAP_SIZE as i64 - 1;
    ((gx.floor() as i64).min(last), (gy.floor() as i64).min(last))
}

/// Liang-Barsky clip of a segment to the `[0, MAP_SIZE]^2` square.
fn clip_segment(a: (f64, f64), b: (f64, f64)) -> Option<((f64, f64), (f64, f64))> {
    let n = MAP_SIZE as f64;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a.0), (dx, n - a.0), (-dy, a.1), (dy, n - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    let at = |t: f64| ((a.0 + t * dx).clamp(0.0, n), (a.1 + t * dy).clamp(0.0, n));
    Some((at(t0), at(t1)))
}

/// Bresenham segment between two in-grid cells.
fn draw_line(plane: &mut [f64], (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let n = MAP_SIZE as i64;
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..n).contains(&x) && (0..n).contains(&y) {
            plane[(y * n + x) as usize] = 1.0;
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws the skeleton edges in the frame of `union_box`.
pub fn render_pose_map(keypoints: Option<&[[f64; 2]]>, union_box: &BoundingBox) -> PoseMap {
    let mut data = vec![0.0; MAP_SIZE * MAP_SIZE];
    let kp = match keypoints {
        Some(kp) if kp.len() == NUM_KEYPOINTS => kp,
        _ => {
            return PoseMap {
                grid: Tensor::raw(vec![1, MAP_SIZE, MAP_SIZE], data),
                missing: true,
            }
        }
    };
    for &(a, b) in &SKELETON {
        if let Some((p, q)) = clip_segment(to_grid(kp[a], union_box), to_grid(kp[b], union_box)) {
            draw_line(&mut data, to_cell(p), to_cell(q));
        }
    }
    PoseMap {
        grid: Tensor::raw(vec![1, MAP_SIZE, MAP_SIZE], data),
        missing: false,
    }
}
