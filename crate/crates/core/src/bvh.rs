//! Bounding volume hierarchy over a triangle soup.
//!
//! Built by median split of triangle centroids along the longest centroid axis, with
//! leaves of at most [`LEAF_SIZE`] triangles. Traversal returns exactly the same hit as
//! [`brute_force_intersect`]: nearest `t`, ties resolved toward the lower triangle index.

use crate::geometry::Vec3;
use crate::mesh::{intersect_triangle, Aabb, TriangleHit};

pub const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// First child (inner) or first index into `order` (leaf).
    first: u32,
    /// Number of triangles for a leaf; 0 marks an inner node whose children are
    /// `first` and `first + 1`.
    count: u32,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

/// Nearest-hit record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub triangle: u32,
    pub hit: TriangleHit,
}

#[inline]
fn closer(t: f64, tri: u32, best: &Option<RayHit>, t_max: f64) -> bool {
    match best {
        None => t <= t_max,
        Some(b) => t < b.hit.t || (t == b.hit.t && tri < b.triangle),
    }
}

#[inline]
fn test_triangle(
    vertices: &[Vec3],
    tri: &[u32; 3],
    index: u32,
    origin: &Vec3,
    dir: &Vec3,
    t_min: f64,
    t_max: f64,
    best: &mut Option<RayHit>,
) {
    let (a, b, c) = (
        &vertices[tri[0] as usize],
        &vertices[tri[1] as usize],
        &vertices[tri[2] as usize],
    );
    if let Some(h) = intersect_triangle(origin, dir, a, b, c) {
        if h.t >= t_min && closer(h.t, index, best, t_max) {
            *best = Some(RayHit {
                triangle: index,
                hit: h,
            });
        }
    }
}

/// Reference nearest-hit query over every triangle.
pub fn brute_force_intersect(
    vertices: &[Vec3],
    triangles: &[[u32; 3]],
    origin: &Vec3,
    dir: &Vec3,
    t_min: f64,
    t_max: f64,
) -> Option<RayHit> {
    let mut best = None;
    for (i, tri) in triangles.iter().enumerate() {
        test_triangle(vertices, tri, i as u32, origin, dir, t_min, t_max, &mut best);
    }
    best
}

fn triangle_bounds(vertices: &[Vec3], tri: &[u32; 3]) -> Aabb {
    let mut b = Aabb::empty();
    for &i in tri {
        b.grow(&vertices[i as usize]);
    }
    // padding keeps slab tests conservative for hits on box faces
    let pad = 1e-9 * (1.0 + b.extent().amax());
    b.min -= Vec3::repeat(pad);
    b.max += Vec3::repeat(pad);
    b
}

impl Bvh {
    pub fn build(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Bvh {
        let bounds: Vec<Aabb> = triangles.iter().map(|t| triangle_bounds(vertices, t)).collect();
        let centroids: Vec<Vec3> = bounds.iter().map(Aabb::center).collect();
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let mut nodes = vec![Node {
            bounds: Aabb::empty(),
            first: 0,
            count: 0,
        }];
        if triangles.is_empty() {
            nodes[0].count = 0;
            nodes[0].first = 0;
            return Bvh { nodes, order };
        }
        // explicit stack of (node index, start, end)
        let mut stack = vec![(0usize, 0usize, order.len())];
        while let Some((node, start, end)) = stack.pop() {
            let mut b = Aabb::empty();
            let mut cb = Aabb::empty();
            for &i in &order[start..end] {
                b = b.union(&bounds[i as usize]);
                cb.grow(&centroids[i as usize]);
            }
            nodes[node].bounds = b;
            let n = end - start;
            if n <= LEAF_SIZE {
                nodes[node].first = start as u32;
                nodes[node].count = n as u32;
                continue;
            }
            let ext = cb.extent();
            let axis = if ext.x >= ext.y && ext.x >= ext.z {
                0
            } else if ext.y >= ext.z {
                1
            } else {
                2
            };
            order[start..end].sort_unstable_by(|&a, &c| {
                centroids[a as usize][axis]
                    .total_cmp(&centroids[c as usize][axis])
                    .then(a.cmp(&c))
            });
            let mid = start + n / 2;
            let left = nodes.len();
            nodes.push(Node {
                bounds: Aabb::empty(),
                first: 0,
                count: 0,
            });
            nodes.push(Node {
                bounds: Aabb::empty(),
                first: 0,
                count: 0,
            });
            nodes[node].first = left as u32;
            nodes[node].count = 0;
            stack.push((left + 1, mid, end));
            stack.push((left, start, mid));
        }
        Bvh { nodes, order }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Nearest hit with `t ∈ [t_min, t_max]`.
    pub fn intersect(
        &self,
        vertices: &[Vec3],
        triangles: &[[u32; 3]],
        origin: &Vec3,
        dir: &Vec3,
        t_min: f64,
        t_max: f64,
    ) -> Option<RayHit> {
        if self.order.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<RayHit> = None;
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            let limit = best.map_or(t_max, |b| b.hit.t);
            if node.bounds.ray_interval(origin, &inv, t_min, limit).is_none() {
                continue;
            }
            if node.count > 0 {
                let s = node.first as usize;
                for &ti in &self.order[s..s + node.count as usize] {
                    test_triangle(
                        vertices,
                        &triangles[ti as usize],
                        ti,
                        origin,
                        dir,
                        t_min,
                        t_max,
                        &mut best,
                    );
                }
            } else {
                let (l, r) = (node.first, node.first + 1);
                // visit the nearer child first
                let tl = self.nodes[l as usize].bounds.ray_interval(origin, &inv, t_min, limit);
                let tr = self.nodes[r as usize].bounds.ray_interval(origin, &inv, t_min, limit);
                match (tl, tr) {
                    (Some(a), Some(b)) => {
                        if a.0 <= b.0 {
                            stack.push(r);
                            stack.push(l);
                        } else {
                            stack.push(l);
                            stack.push(r);
                        }
                    }
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(r),
                    (None, None) => {}
                }
            }
        }
        best
    }
}
