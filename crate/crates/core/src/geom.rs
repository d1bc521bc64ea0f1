//! Planar geometry helpers: angle wrapping and convex-polygon queries.
//!
//! Polygons are stored as counter-clockwise vertex lists with the area
//! centroid at the body-frame origin (see [`crate::types::ObjectGeometry`]).

use std::f64::consts::PI;

pub type Vec2 = [f64; 2];

pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

/// Rotate 90 degrees counter-clockwise.
pub fn perp(a: Vec2) -> Vec2 {
    [-a[1], a[0]]
}

pub fn rotate(a: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * a[0] - s * a[1], s * a[0] + c * a[1]]
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Signed smallest rotation taking `b` to `a`, in (-pi, pi].
pub fn angle_diff_signed(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Unwrap an angle sequence so consecutive values never jump by more than pi,
/// keeping the first value as stored.
pub fn unwrap_angles(seq: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(seq.len());
    let mut prev = match seq.first() {
        Some(&a) => a,
        None => return out,
    };
    out.push(prev);
    for &a in &seq[1..] {
        let next = prev + angle_diff_signed(a, prev);
        out.push(next);
        prev = next;
    }
    out
}

/// Signed area of a polygon (positive for counter-clockwise winding).
pub fn signed_area(vertices: &[Vec2]) -> f64 {
    let n = vertices.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += cross(vertices[i], vertices[(i + 1) % n]);
    }
    0.5 * acc
}

/// Area centroid of a simple polygon.
pub fn area_centroid(vertices: &[Vec2]) -> Vec2 {
    let n = vertices.len();
    let a = signed_area(vertices);
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let p = vertices[i];
        let q = vertices[(i + 1) % n];
        let w = cross(p, q);
        cx += (p[0] + q[0]) * w;
        cy += (p[1] + q[1]) * w;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

/// Perimeter of a polygon.
pub fn perimeter(vertices: &[Vec2]) -> f64 {
    let n = vertices.len();
    (0..n).map(|i| dist(vertices[i], vertices[(i + 1) % n])).sum()
}

/// Second moment of area about the origin times density, i.e. the rotational
/// inertia of a uniform-density polygon with the given total mass, assuming
/// the centroid sits at the origin.
pub fn polygon_inertia(vertices: &[Vec2], mass: f64) -> f64 {
    let n = vertices.len();
    let area = signed_area(vertices);
    let mut acc = 0.0;
    for i in 0..n {
        let p = vertices[i];
        let q = vertices[(i + 1) % n];
        acc += cross(p, q) * (dot(p, p) + dot(p, q) + dot(q, q));
    }
    mass / area * acc / 12.0
}

/// True if the counter-clockwise polygon is convex (collinear edges allowed).
pub fn is_convex_ccw(vertices: &[Vec2]) -> bool {
    let n = vertices.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let c = vertices[(i + 2) % n];
        if cross(sub(b, a), sub(c, b)) < -1e-12 {
            return false;
        }
    }
    true
}

/// Point containment for a convex counter-clockwise polygon (boundary counts
/// as inside).
pub fn convex_contains(vertices: &[Vec2], p: Vec2) -> bool {
    let n = vertices.len();
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        if cross(sub(b, a), sub(p, a)) < -1e-12 {
            return false;
        }
    }
    true
}

/// Closest point on segment `ab` to `p`.
pub fn closest_on_segment(a: Vec2, b: Vec2, p: Vec2) -> Vec2 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 <= 0.0 {
        return a;
    }
    let t = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
    add(a, scale(ab, t))
}

/// Unsigned distance from a point to the polygon boundary.
pub fn boundary_distance(vertices: &[Vec2], p: Vec2) -> f64 {
    let n = vertices.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let q = closest_on_segment(vertices[i], vertices[(i + 1) % n], p);
        best = best.min(dist(p, q));
    }
    best
}

/// Distance from a point to the polygon: zero inside, boundary distance outside.
pub fn exterior_distance(vertices: &[Vec2], p: Vec2) -> f64 {
    if convex_contains(vertices, p) {
        0.0
    } else {
        boundary_distance(vertices, p)
    }
}

/// Penetration query for a convex polygon. Returns `(depth, outward_normal,
/// boundary_point)` with depth > 0 when the point is strictly inside, else None.
pub fn penetration(vertices: &[Vec2], p: Vec2) -> Option<(f64, Vec2, Vec2)> {
    if !convex_contains(vertices, p) {
        return None;
    }
    let n = vertices.len();
    let mut best_depth = f64::INFINITY;
    let mut best_normal = [0.0, 0.0];
    let mut best_point = p;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let q = closest_on_segment(a, b, p);
        let d = dist(p, q);
        if d < best_depth {
            best_depth = d;
            let edge = sub(b, a);
            // CCW winding: outward normal points right of the edge direction.
            let nrm = [edge[1], -edge[0]];
            let len = norm(nrm);
            best_normal = if len > 0.0 { scale(nrm, 1.0 / len) } else { [0.0, 1.0] };
            best_point = q;
        }
    }
    Some((best_depth, best_normal, best_point))
}

/// Distance from the centroid (origin) to the boundary along direction `angle`.
/// The polygon must contain the origin.
pub fn radial_extent(vertices: &[Vec2], angle: f64) -> f64 {
    let dir = [angle.cos(), angle.sin()];
    let n = vertices.len();
    let mut best = 0.0f64;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        // Solve origin + t*dir = a + u*(b-a) for t >= 0, u in [0,1].
        let e = sub(b, a);
        let denom = cross(dir, e);
        if denom.abs() < 1e-15 {
            continue;
        }
        let t = cross(a, e) / denom;
        let u = cross(a, dir) / denom;
        if t >= 0.0 && (-1e-12..=1.0 + 1e-12).contains(&u) {
            best = best.max(t);
        }
    }
    best
}

/// `count` points sampled on the polygon boundary, equally spaced by arc length.
pub fn boundary_samples(vertices: &[Vec2], count: usize) -> Vec<Vec2> {
    let n = vertices.len();
    let total = perimeter(vertices);
    let step = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut edge = 0usize;
    let mut offset = 0.0;
    for k in 0..count {
        let target = k as f64 * step;
        loop {
            let a = vertices[edge % n];
            let b = vertices[(edge + 1) % n];
            let len = dist(a, b);
            if target <= offset + len || edge >= 2 * n {
                let t = if len > 0.0 { (target - offset) / len } else { 0.0 };
                out.push(add(a, scale(sub(b, a), t)));
                break;
            }
            offset += len;
            edge += 1;
        }
    }
    out
}

/// Symmetric chamfer distance between two point sets: the average of the two
/// directed mean nearest-neighbor distances.
pub fn chamfer(a: &[Vec2], b: &[Vec2]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let directed = |src: &[Vec2], dst: &[Vec2]| -> f64 {
        src.iter()
            .map(|p| dst.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / src.len() as f64
    };
    0.5 * (directed(a, b) + directed(b, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_square() -> Vec<Vec2> {
        vec![[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(0.0), 0.0);
        assert_abs_diff_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI);
        assert_abs_diff_eq!(wrap_angle(2.5 * PI), 0.5 * PI, epsilon = 1e-12);
    }

    #[test]
    fn square_area_centroid_inertia() {
        let sq = unit_square();
        assert_abs_diff_eq!(signed_area(&sq), 1.0);
        let c = area_centroid(&sq);
        assert_abs_diff_eq!(c[0], 0.0);
        assert_abs_diff_eq!(c[1], 0.0);
        // Box inertia m*(w^2+h^2)/12.
        assert_abs_diff_eq!(polygon_inertia(&sq, 1.0), 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn penetration_depth_inside_square() {
        let sq = unit_square();
        let (depth, normal, _) = penetration(&sq, [0.0, 0.497]).unwrap();
        assert_abs_diff_eq!(depth, 0.003, epsilon = 1e-12);
        assert_abs_diff_eq!(normal[1], 1.0, epsilon = 1e-12);
        assert!(penetration(&sq, [0.0, 2.0]).is_none());
    }

    #[test]
    fn radial_extent_square() {
        let sq = unit_square();
        // Closed-form ray-square intersection: r = 0.5 / max(|cos|, |sin|).
        for k in 0..16 {
            let phi = 2.0 * PI * k as f64 / 16.0;
            let expect = 0.5 / phi.cos().abs().max(phi.sin().abs());
            assert_abs_diff_eq!(radial_extent(&sq, phi), expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn boundary_samples_count_and_location() {
        let sq = unit_square();
        let pts = boundary_samples(&sq, 64);
        assert_eq!(pts.len(), 64);
        for p in pts {
            assert!(boundary_distance(&sq, p) < 1e-9);
        }
    }

    #[test]
    fn chamfer_zero_on_identical_sets() {
        let sq = unit_square();
        let pts = boundary_samples(&sq, 32);
        assert_abs_diff_eq!(chamfer(&pts, &pts), 0.0);
    }
}
