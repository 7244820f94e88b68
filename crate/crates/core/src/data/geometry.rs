//! Polyline helpers shared by the loader and the generator.

use crate::scene::{wrap_angle, Waypoint};

/// Cumulative arc length at each vertex.
fn arc_lengths(points: &[Waypoint]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(points.len());
    let mut s = 0.0;
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            let q = &points[i - 1];
            s += (p.x - q.x).hypot(p.y - q.y);
        }
        acc.push(s);
    }
    acc
}

/// Resamples a polyline to `n` points equally spaced in arc length, first
/// and last vertices included. Directions are interpolated on the circle.
///
/// A polyline that already has `n` vertices is returned as is, so a lane
/// written by the loader reads back unchanged.
pub fn resample(points: &[Waypoint], n: usize) -> Vec<Waypoint> {
    if points.len() == n || points.is_empty() {
        return points.to_vec();
    }
    if n == 1 || points.len() == 1 {
        return vec![points[0]; n];
    }
    let cum = arc_lengths(points);
    let total = *cum.last().unwrap_or(&0.0);
    if total <= 0.0 {
        return vec![points[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        while seg + 2 < points.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let (a, b) = (&points[seg], &points[seg + 1]);
        let len = cum[seg + 1] - cum[seg];
        let u = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let dpsi = wrap_angle(b.psi - a.psi);
        out.push(Waypoint { x: a.x + u * (b.x - a.x), y: a.y + u * (b.y - a.y), psi: wrap_angle(a.psi + u * dpsi) });
    }
    // Pin the end exactly.
    if let (Some(o), Some(p)) = (out.last_mut(), points.last()) {
        *o = *p;
    }
    out
}

/// Distance from `(x, y)` to the nearest point of a polyline.
pub fn distance_to_polyline(points: &[Waypoint], x: f64, y: f64) -> f64 {
    match points {
        [] => f64::INFINITY,
        [p] => (p.x - x).hypot(p.y - y),
        _ => points
            .windows(2)
            .map(|w| {
                let (ax, ay, bx, by) = (w[0].x, w[0].y, w[1].x, w[1].y);
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = dx * dx + dy * dy;
                let u = if len2 > 0.0 { (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                (ax + u * dx - x).hypot(ay + u * dy - y)
            })
            .fold(f64::INFINITY, f64::min),
    }
}
