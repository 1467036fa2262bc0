//! Rotated 3D box overlap via bird's-eye polygon clipping.

use nalgebra::Vector2;

use super::boxes::{signed_area, Box3D};

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Sutherland-Hodgman clip of `subject` against a convex, counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut output: Vec<Vector2<f64>> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(&a, &b, &cur) >= 0.0;
            let prev_in = cross(&a, &b, &prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.extend(segment_line_intersection(&prev, &cur, &a, &b));
                }
                output.push(cur);
            } else if prev_in {
                output.extend(segment_line_intersection(&prev, &cur, &a, &b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: &Vector2<f64>, q: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> Option<Vector2<f64>> {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom.abs() < f64::MIN_POSITIVE {
        return None;
    }
    let t = cp / denom;
    Some(p + (q - p) * t)
}

/// Area of the intersection of two convex polygons given counter-clockwise.
pub fn convex_intersection_area(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> f64 {
    let poly = clip_convex(a, b);
    if poly.len() < 3 {
        return 0.0;
    }
    signed_area(&poly).abs()
}

/// Exact 3D IoU of two boxes rotated about the vertical axis.
pub fn box3d_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (ay0, ay1) = a.y_range();
    let (by0, by1) = b.y_range();
    let dy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    if dy <= 0.0 {
        return 0.0;
    }
    let area = convex_intersection_area(&a.bev_polygon(), &b.bev_polygon());
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dy;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Bird's-eye IoU (footprint only).
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = convex_intersection_area(&a.bev_polygon(), &b.bev_polygon());
    let union = a.size.l * a.size.w + b.size.l * b.size.w - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
