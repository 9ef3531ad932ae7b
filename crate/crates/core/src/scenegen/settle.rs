//! Static settling by exact vertical drop of polyhedra.
//!
//! An object released above the clutter falls straight down until first contact. For two
//! triangle meshes the contact shift is the maximum, over all vertical lines meeting both,
//! of `top(other) − bottom(object)`; for piecewise-linear surfaces that maximum is attained
//! at a vertex of either mesh or at a crossing of two edges in the xy projection, so those
//! candidates are enumerated exactly.

use crate::geometry::Vec3;
use crate::mesh::{Aabb, TriMesh};

/// Geometry of an already-placed object, with cached bounds.
#[derive(Debug, Clone)]
pub struct Obstacle {
    pub mesh: TriMesh,
    pub aabb: Aabb,
    edges: Vec<[u32; 2]>,
    tri_boxes: Vec<Aabb>,
}

impl Obstacle {
    pub fn new(mesh: TriMesh) -> Obstacle {
        let aabb = mesh.aabb();
        let edges = mesh.edges();
        let tri_boxes = tri_boxes(&mesh);
        Obstacle {
            mesh,
            aabb,
            edges,
            tri_boxes,
        }
    }
}

fn tri_boxes(mesh: &TriMesh) -> Vec<Aabb> {
    (0..mesh.triangles.len())
        .map(|i| {
            let mut b = Aabb::empty();
            for v in mesh.triangle(i) {
                b.grow(&v);
            }
            b
        })
        .collect()
}

const XY_EPS: f64 = 1e-12;

/// Height of the triangle's plane above `(x, y)` if the point lies in its xy projection.
#[inline]
fn height_in_triangle(tri: &[Vec3; 3], x: f64, y: f64) -> Option<f64> {
    let [a, b, c] = tri;
    let det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
    if det.abs() < 1e-14 {
        // vertical triangle; its contacts are covered by edge crossings
        return None;
    }
    let l1 = ((x - a.x) * (c.y - a.y) - (c.x - a.x) * (y - a.y)) / det;
    let l2 = ((b.x - a.x) * (y - a.y) - (x - a.x) * (b.y - a.y)) / det;
    let l0 = 1.0 - l1 - l2;
    if l0 < -XY_EPS || l1 < -XY_EPS || l2 < -XY_EPS {
        return None;
    }
    Some(l0 * a.z + l1 * b.z + l2 * c.z)
}

/// Crossing of two segments' xy projections; returns the parameters along each.
#[inline]
fn segment_crossing(p0: &Vec3, p1: &Vec3, q0: &Vec3, q1: &Vec3) -> Option<(f64, f64)> {
    let r = (p1.x - p0.x, p1.y - p0.y);
    let s = (q1.x - q0.x, q1.y - q0.y);
    let den = r.0 * s.1 - r.1 * s.0;
    if den.abs() < 1e-16 {
        return None;
    }
    let qp = (q0.x - p0.x, q0.y - p0.y);
    let t = (qp.0 * s.1 - qp.1 * s.0) / den;
    let u = (qp.0 * r.1 - qp.1 * r.0) / den;
    ((-XY_EPS..=1.0 + XY_EPS).contains(&t) && (-XY_EPS..=1.0 + XY_EPS).contains(&u)).then_some((t, u))
}

/// Smallest upward shift `s` such that `object + s·ẑ` lies above `below` on every vertical
/// line meeting both. `None` when their footprints never share a vertical line.
pub fn contact_shift(object: &Obstacle, below: &Obstacle) -> Option<f64> {
    if !object.aabb.overlaps_xy(&below.aabb) {
        return None;
    }
    let mut best: Option<f64> = None;
    let mut consider = |s: f64| {
        if best.is_none_or(|b| s > b) {
            best = Some(s);
        }
    };
    let inside_xy = |p: &Vec3, b: &Aabb| {
        p.x >= b.min.x - XY_EPS && p.x <= b.max.x + XY_EPS && p.y >= b.min.y - XY_EPS && p.y <= b.max.y + XY_EPS
    };
    // object vertices over obstacle triangles
    for v in &object.mesh.vertices {
        if !inside_xy(v, &below.aabb) {
            continue;
        }
        for (i, tb) in below.tri_boxes.iter().enumerate() {
            if inside_xy(v, tb) {
                if let Some(z) = height_in_triangle(&below.mesh.triangle(i), v.x, v.y) {
                    consider(z - v.z);
                }
            }
        }
    }
    // obstacle vertices under object triangles
    for v in &below.mesh.vertices {
        if !inside_xy(v, &object.aabb) {
            continue;
        }
        for (i, tb) in object.tri_boxes.iter().enumerate() {
            if inside_xy(v, tb) {
                if let Some(z) = height_in_triangle(&object.mesh.triangle(i), v.x, v.y) {
                    consider(v.z - z);
                }
            }
        }
    }
    // edge crossings
    let below_edges: Vec<(Vec3, Vec3, Aabb)> = below
        .edges
        .iter()
        .map(|e| {
            let (a, b) = (below.mesh.vertices[e[0] as usize], below.mesh.vertices[e[1] as usize]);
            let mut bb = Aabb::empty();
            bb.grow(&a);
            bb.grow(&b);
            (a, b, bb)
        })
        .filter(|(_, _, bb)| bb.overlaps_xy(&object.aabb))
        .collect();
    for e in &object.edges {
        let (a, b) = (object.mesh.vertices[e[0] as usize], object.mesh.vertices[e[1] as usize]);
        let mut eb = Aabb::empty();
        eb.grow(&a);
        eb.grow(&b);
        if !eb.overlaps_xy(&below.aabb) {
            continue;
        }
        for (c, d, bb) in &below_edges {
            if !eb.overlaps_xy(bb) {
                continue;
            }
            if let Some((t, u)) = segment_crossing(&a, &b, c, d) {
                let za = a.z + t * (b.z - a.z);
                let zb = c.z + u * (d.z - c.z);
                consider(zb - za);
            }
        }
    }
    best
}

/// Upward shift that rests `object` on the floor plane or on the highest obstacle below it.
pub fn drop_shift(object: &Obstacle, floor_z: f64, obstacles: &[Obstacle]) -> f64 {
    let mut s = floor_z - object.aabb.min.z;
    for o in obstacles {
        if let Some(c) = contact_shift(object, o) {
            s = s.max(c);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;

    fn at(mesh: &TriMesh, x: f64, y: f64, z: f64) -> Obstacle {
        Obstacle::new(mesh.transformed(&RigidTransform::from_translation(Vec3::new(x, y, z))))
    }

    #[test]
    fn box_rests_on_floor() {
        let b = TriMesh::cuboid(Vec3::new(0.02, 0.03, 0.015));
        let o = at(&b, 0.0, 0.0, 0.5);
        let s = drop_shift(&o, 0.0, &[]);
        assert!((o.aabb.min.z + s).abs() < 1e-15);
    }

    #[test]
    fn box_stacks_on_box() {
        let b = TriMesh::cuboid(Vec3::new(0.05, 0.05, 0.02));
        let base = at(&b, 0.0, 0.0, 0.02);
        let top = at(&b, 0.03, 0.01, 0.5);
        let s = drop_shift(&top, 0.0, &[base]);
        assert!((top.aabb.min.z + s - 0.04).abs() < 1e-12);
    }

    #[test]
    fn crossing_edges_are_detected() {
        // two thin bars crossing at right angles: only edges overlap in projection
        let bar_x = TriMesh::cuboid(Vec3::new(0.1, 0.005, 0.005));
        let bar_y = TriMesh::cuboid(Vec3::new(0.005, 0.1, 0.005));
        let tilt = RigidTransform::from_axis_angle(Vec3::y(), 0.3, Vec3::new(0.0, 0.0, 0.005));
        let lower = Obstacle::new(bar_x.transformed(&tilt));
        let upper = at(&bar_y, 0.0, 0.0, 0.3);
        let s = drop_shift(&upper, 0.0, std::slice::from_ref(&lower));
        let placed = upper
            .mesh
            .transformed(&RigidTransform::from_translation(Vec3::new(0.0, 0.0, s)));
        // no vertex of either is strictly inside the other after the drop
        for v in &placed.vertices {
            assert!(!lower.mesh.contains_point(&(v - Vec3::new(0.0, 0.0, 1e-7))));
        }
        assert!(placed.aabb().min.z > 0.0);
    }

    #[test]
    fn sphere_on_sphere_contacts_at_the_top() {
        let s = TriMesh::uv_sphere(0.03, 8, 16);
        let base = at(&s, 0.0, 0.0, 0.03);
        let top = at(&s, 0.0, 0.0, 0.5);
        let shift = drop_shift(&top, 0.0, &[base]);
        // pole on pole
        assert!((top.aabb.min.z + shift - 0.06).abs() < 1e-12);
    }
}
