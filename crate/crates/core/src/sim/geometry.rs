//! Planar geometry helpers: simple polygons, polylines, disc tests.

use crate::error::{Error, Result};

pub type Point = [f64; 2];

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

/// Closest point on segment `ab` to `p`, as the segment parameter in `[0, 1]`.
pub fn segment_param(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 == 0.0 {
        return 0.0;
    }
    (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let u = segment_param(p, a, b);
    dist(p, add(a, scale(sub(b, a), u)))
}

fn orientation(a: Point, b: Point, c: Point) -> f64 {
    cross(sub(b, a), sub(c, a))
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// A simple (non-self-intersecting) polygon with at least three vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::MalformedPolygon(format!("{n} vertices, need at least 3")));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::MalformedPolygon("non-finite vertex".into()));
        }
        let area2: f64 = (0..n).map(|i| cross(vertices[i], vertices[(i + 1) % n])).sum();
        if area2.abs() < 1e-12 {
            return Err(Error::MalformedPolygon("zero area".into()));
        }
        for i in 0..n {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            if a == b {
                return Err(Error::MalformedPolygon(format!("repeated vertex {i}")));
            }
            for j in i + 1..n {
                // Adjacent edges share a vertex by construction.
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (c, d) = (vertices[j], vertices[(j + 1) % n]);
                if segments_intersect(a, b, c, d) {
                    return Err(Error::MalformedPolygon(format!("edges {i} and {j} intersect")));
                }
            }
        }
        Ok(Polygon { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Even-odd ray casting.
    pub fn contains(&self, p: Point) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[j]);
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    pub fn boundary_distance(&self, p: Point) -> f64 {
        let v = &self.vertices;
        (0..v.len())
            .map(|i| point_segment_distance(p, v[i], v[(i + 1) % v.len()]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Disc fully inside: center inside and at least `radius` from every edge.
    pub fn contains_disc(&self, center: Point, radius: f64) -> bool {
        self.contains(center) && self.boundary_distance(center) >= radius
    }
}

/// Arc-length parameterized polyline.
#[derive(Debug, Clone)]
pub struct Polyline {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument("polyline needs at least two points".into()));
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + dist(w[0], w[1]));
        }
        Ok(Polyline { points, cumulative })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Arc length of the closest point on the polyline to `p`.
    pub fn project(&self, p: Point) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let u = segment_param(p, w[0], w[1]);
            let q = add(w[0], scale(sub(w[1], w[0]), u));
            let d = dist(p, q);
            if d < best.0 {
                best = (d, self.cumulative[i] + u * (self.cumulative[i + 1] - self.cumulative[i]));
            }
        }
        best.1
    }

    pub fn distance(&self, p: Point) -> f64 {
        self.points
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Smallest `τ ≥ 0` with `|rel + vel τ| ≤ radius`: 0 if already overlapping,
/// infinity if the discs never meet.
pub fn disc_time_to_contact(rel: Point, vel: Point, radius: f64) -> f64 {
    let c = dot(rel, rel) - radius * radius;
    if c <= 0.0 {
        return 0.0;
    }
    let a = dot(vel, vel);
    let b = 2.0 * dot(rel, vel);
    if a == 0.0 || b >= 0.0 {
        return f64::INFINITY;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    // Numerically stable smaller root.
    let q = -0.5 * (b - disc.sqrt());
    c / q
}
