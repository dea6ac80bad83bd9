use crate::skeleton::{Pose2D, SkeletonTopology};

/// Segments longer than this (in pixels along the major axis) are clipped
/// to a margin around the frame before rasterizing.
const MAX_STEPS: i64 = 4096;

/// Draws every parent–child bone as a 1-pixel line of intensity 1 on a
/// zero background. Returns `height × width` values in row-major order.
///
/// Endpoints are rounded to the nearest pixel and rasterized with integer
/// Bresenham; pixels outside the frame are dropped.
pub fn render_stick_figure(pose: &Pose2D, topology: &SkeletonTopology, (height, width): (usize, usize)) -> Vec<f32> {
    let mut img = vec![0.0f32; height * width];
    for j in topology.topological_order() {
        let a = pose.coords[topology.parent[j]];
        let b = pose.coords[j];
        let Some((a, b)) = clip_long_segment(a, b, height, width) else { continue };
        draw_line(&mut img, (height, width), to_pixel(a), to_pixel(b));
    }
    img
}

fn to_pixel(p: [f64; 2]) -> (i64, i64) {
    (p[0].round() as i64, p[1].round() as i64)
}

/// Integer Bresenham from `(x0, y0)` to `(x1, y1)`, both endpoints inclusive.
pub fn draw_line(img: &mut [f32], (height, width): (usize, usize), (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if (0..width as i64).contains(&x0) && (0..height as i64).contains(&y0) {
            img[y0 as usize * width + x0 as usize] = 1.0;
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Liang–Barsky clip against the frame grown by a margin, applied only to
/// segments long enough to make naive rasterization wasteful.
fn clip_long_segment(a: [f64; 2], b: [f64; 2], height: usize, width: usize) -> Option<([f64; 2], [f64; 2])> {
    if !(a.iter().chain(&b).all(|v| v.is_finite())) {
        return None;
    }
    let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs());
    if steps <= MAX_STEPS as f64 {
        return Some((a, b));
    }
    let margin = 2.0;
    let (xmin, ymin) = (-margin, -margin);
    let (xmax, ymax) = (width as f64 + margin, height as f64 + margin);
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a[0] - xmin), (dx, xmax - a[0]), (-dy, a[1] - ymin), (dy, ymax - a[1])] {
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
    Some(([a[0] + t0 * dx, a[1] + t0 * dy], [a[0] + t1 * dx, a[1] + t1 * dy]))
}
