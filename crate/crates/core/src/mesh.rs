//! Triangle meshes, primitive tessellation and ray/triangle intersection.

use std::f64::consts::{PI, TAU};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::geometry::{RigidTransform, Vec3};

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x
    }

    /// Overlap of the xy footprints (touching counts).
    pub fn overlaps_xy(&self, other: &Aabb) -> bool {
        self.min.x <= other.max.x && other.min.x <= self.max.x && self.min.y <= other.max.y && other.min.y <= self.max.y
    }

    /// Slab test; returns the parametric entry/exit interval clipped to `[t_min, t_max]`.
    #[inline]
    pub fn ray_interval(&self, origin: &Vec3, inv_dir: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, f64)> {
        let mut t0 = t_min;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut near = (self.min[a] - origin[a]) * inv_dir[a];
            let mut far = (self.max[a] - origin[a]) * inv_dir[a];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN (0 * inf) leaves the bound untouched
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Indexed triangle mesh. `parts` partitions the triangles into closed shells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub parts: Vec<Range<usize>>,
}

impl TriMesh {
    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            triangles: Vec::new(),
            parts: Vec::new(),
        }
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn aabb(&self) -> Aabb {
        let mut b = Aabb::empty();
        for v in &self.vertices {
            b.grow(v);
        }
        b
    }

    pub fn transformed(&self, tf: &RigidTransform) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| tf.transform_point(v)).collect(),
            triangles: self.triangles.clone(),
            parts: self.parts.clone(),
        }
    }

    /// Appends `other` as additional closed shells.
    pub fn append(&mut self, other: &TriMesh) {
        let base = self.vertices.len() as u32;
        let tri_base = self.triangles.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        self.parts
            .extend(other.parts.iter().map(|r| r.start + tri_base..r.end + tri_base));
    }

    pub fn min_triangle_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                (b - a).cross(&(c - a)).norm() * 0.5
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Unique undirected edges.
    pub fn edges(&self) -> Vec<[u32; 2]> {
        let mut edges: Vec<[u32; 2]> = self
            .triangles
            .iter()
            .flat_map(|t| [[t[0], t[1]], [t[1], t[2]], [t[2], t[0]]])
            .map(|[a, b]| if a < b { [a, b] } else { [b, a] })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Volume-weighted centroid of the closed shells (falls back to the vertex mean).
    pub fn centroid(&self) -> Vec3 {
        let mut vol = 0.0;
        let mut acc = Vec3::zeros();
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(i);
            let v = a.dot(&b.cross(&c)) / 6.0;
            vol += v;
            acc += (a + b + c) * (v / 4.0);
        }
        if vol.abs() > 1e-15 {
            acc / vol
        } else {
            self.vertices.iter().fold(Vec3::zeros(), |s, v| s + v) / self.vertices.len().max(1) as f64
        }
    }

    /// Axis-aligned box centred at the origin.
    pub fn cuboid(half: Vec3) -> TriMesh {
        let (x, y, z) = (half.x, half.y, half.z);
        let vertices = vec![
            Vec3::new(-x, -y, -z),
            Vec3::new(x, -y, -z),
            Vec3::new(x, y, -z),
            Vec3::new(-x, y, -z),
            Vec3::new(-x, -y, z),
            Vec3::new(x, -y, z),
            Vec3::new(x, y, z),
            Vec3::new(-x, y, z),
        ];
        let triangles = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        TriMesh {
            vertices,
            triangles,
            parts: vec![0..12],
        }
    }

    /// Surface of revolution about z from a profile of `(radius, z)` pairs ordered bottom to
    /// top. Zero-radius endpoints become poles.
    pub fn revolve(profile: &[(f64, f64)], segments: usize) -> TriMesh {
        assert!(profile.len() >= 2 && segments >= 3);
        let mut vertices = Vec::new();
        let mut rings: Vec<RingRef> = Vec::new();
        for &(r, z) in profile {
            if r <= 0.0 {
                rings.push(RingRef::Pole(vertices.len() as u32));
                vertices.push(Vec3::new(0.0, 0.0, z));
            } else {
                rings.push(RingRef::Ring(vertices.len() as u32));
                for s in 0..segments {
                    let a = TAU * s as f64 / segments as f64;
                    vertices.push(Vec3::new(r * a.cos(), r * a.sin(), z));
                }
            }
        }
        let mut triangles = Vec::new();
        let seg = segments as u32;
        for w in rings.windows(2) {
            match (w[0], w[1]) {
                (RingRef::Ring(a), RingRef::Ring(b)) => {
                    for s in 0..seg {
                        let s1 = (s + 1) % seg;
                        triangles.push([a + s, a + s1, b + s1]);
                        triangles.push([a + s, b + s1, b + s]);
                    }
                }
                (RingRef::Pole(p), RingRef::Ring(b)) => {
                    for s in 0..seg {
                        triangles.push([p, b + (s + 1) % seg, b + s]);
                    }
                }
                (RingRef::Ring(a), RingRef::Pole(p)) => {
                    for s in 0..seg {
                        triangles.push([a + s, a + (s + 1) % seg, p]);
                    }
                }
                (RingRef::Pole(_), RingRef::Pole(_)) => {}
            }
        }
        let n = triangles.len();
        TriMesh {
            vertices,
            triangles,
            parts: vec![0..n],
        }
    }

    pub fn cylinder(radius: f64, half_height: f64, segments: usize) -> TriMesh {
        Self::revolve(
            &[
                (0.0, -half_height),
                (radius, -half_height),
                (radius, half_height),
                (0.0, half_height),
            ],
            segments,
        )
    }

    pub fn uv_sphere(radius: f64, rings: usize, segments: usize) -> TriMesh {
        let profile: Vec<(f64, f64)> = (0..=rings)
            .map(|i| {
                let phi = -PI / 2.0 + PI * i as f64 / rings as f64;
                let r = if i == 0 || i == rings { 0.0 } else { radius * phi.cos() };
                (r, radius * phi.sin())
            })
            .collect();
        Self::revolve(&profile, segments)
    }

    /// Cylinder of `half_height` capped by hemispheres of `radius`.
    pub fn capsule(radius: f64, half_height: f64, cap_rings: usize, segments: usize) -> TriMesh {
        let mut profile = Vec::new();
        for i in 0..=cap_rings {
            let phi = -PI / 2.0 + PI / 2.0 * i as f64 / cap_rings as f64;
            let r = if i == 0 { 0.0 } else { radius * phi.cos() };
            profile.push((r, -half_height + radius * phi.sin()));
        }
        for i in 0..=cap_rings {
            let phi = PI / 2.0 * i as f64 / cap_rings as f64;
            let r = if i == cap_rings { 0.0 } else { radius * phi.cos() };
            profile.push((r, half_height + radius * phi.sin()));
        }
        Self::revolve(&profile, segments)
    }

    /// Superellipsoid with semi-axes `half` and shape exponents `e1` (latitude) and `e2`
    /// (longitude); 1 gives an ellipsoid, values toward 0 approach a box.
    pub fn superellipsoid(half: Vec3, e1: f64, e2: f64, rings: usize, segments: usize) -> TriMesh {
        let spow = |v: f64, e: f64| v.signum() * v.abs().powf(e);
        let mut vertices = vec![Vec3::new(0.0, 0.0, -half.z)];
        for i in 1..rings {
            let eta = -PI / 2.0 + PI * i as f64 / rings as f64;
            for s in 0..segments {
                let omega = TAU * s as f64 / segments as f64;
                let ce = spow(eta.cos(), e1);
                vertices.push(Vec3::new(
                    half.x * ce * spow(omega.cos(), e2),
                    half.y * ce * spow(omega.sin(), e2),
                    half.z * spow(eta.sin(), e1),
                ));
            }
        }
        vertices.push(Vec3::new(0.0, 0.0, half.z));
        let top = (vertices.len() - 1) as u32;
        let seg = segments as u32;
        let ring = |i: u32| 1 + i * seg;
        let mut triangles = Vec::new();
        for s in 0..seg {
            triangles.push([0, ring(0) + (s + 1) % seg, ring(0) + s]);
        }
        for i in 0..(rings as u32 - 2) {
            let (a, b) = (ring(i), ring(i + 1));
            for s in 0..seg {
                let s1 = (s + 1) % seg;
                triangles.push([a + s, a + s1, b + s1]);
                triangles.push([a + s, b + s1, b + s]);
            }
        }
        let last = ring(rings as u32 - 2);
        for s in 0..seg {
            triangles.push([last + s, last + (s + 1) % seg, top]);
        }
        let n = triangles.len();
        TriMesh {
            vertices,
            triangles,
            parts: vec![0..n],
        }
    }

    /// True if `p` is inside any closed shell (ray parity per shell).
    pub fn contains_point(&self, p: &Vec3) -> bool {
        // slightly irrational direction avoids grazing edges of axis-aligned geometry
        let dir = Vec3::new(0.285_143_2, 0.192_837_1, 0.938_847_3).normalize();
        self.parts.iter().any(|part| {
            let mut crossings = 0usize;
            for i in part.clone() {
                let [a, b, c] = self.triangle(i);
                if let Some(h) = intersect_triangle(p, &dir, &a, &b, &c) {
                    if h.t > 0.0 {
                        crossings += 1;
                    }
                }
            }
            crossings % 2 == 1
        })
    }
}

#[derive(Clone, Copy)]
enum RingRef {
    Pole(u32),
    Ring(u32),
}

/// Ray/triangle hit parameters: `origin + t·dir` with barycentrics `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleHit {
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

/// Two-sided Möller–Trumbore intersection. Returns hits at any `t`; callers clip the range.
#[inline]
pub fn intersect_triangle(origin: &Vec3, dir: &Vec3, v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Option<TriangleHit> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - v0;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    Some(TriangleHit { t, u, v })
}

/// Unit geometric normal following the triangle winding.
pub fn triangle_normal(a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len > 0.0 {
        n / len
    } else {
        Vec3::z()
    }
}
