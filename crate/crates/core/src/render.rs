//! Deterministic raycasting RGB-D renderer.
//!
//! One primary ray per pixel, nearest hit wins. Color is Lambertian shading of the hit
//! texture under one fixed directional light plus an ambient term; no shadows and no
//! anti-aliasing. Depth is the axis depth of the hit, the mask carries the hit instance id
//! (0 for the workspace or a miss) and the world-coordinate buffer stores the hit point.

use rayon::prelude::*;

use crate::bvh::{brute_force_intersect, Bvh};
use crate::geometry::{unproject_unchecked, CameraView, Pixel, Vec3};
use crate::grid::Grid;
use crate::mesh::triangle_normal;
use crate::scenegen::Scene;

const AMBIENT: f32 = 0.35;
const DIFFUSE: f32 = 0.65;

fn light_direction() -> Vec3 {
    Vec3::new(0.3, 0.2, 1.0).normalize()
}

/// One rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct RGBDFrame {
    pub view: CameraView,
    pub rgb: Grid<[u8; 3]>,
    /// Axis depth in meters; 0 marks a miss.
    pub depth: Grid<f64>,
    /// Instance id of the hit object; 0 for workspace or miss.
    pub instance_mask: Grid<u32>,
    /// World-frame hit point; zero where depth is 0.
    pub world_coords: Grid<Vec3>,
}

impl RGBDFrame {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    #[inline]
    pub fn has_depth(&self, p: Pixel) -> bool {
        self.depth.contains(p.x as i64, p.y as i64) && *self.depth.get(p.x as usize, p.y as usize) > 0.0
    }

    #[inline]
    pub fn instance_at(&self, p: Pixel) -> u32 {
        *self.instance_mask.get(p.x as usize, p.y as usize)
    }

    #[inline]
    pub fn world_at(&self, p: Pixel) -> Option<Vec3> {
        self.has_depth(p)
            .then(|| *self.world_coords.get(p.x as usize, p.y as usize))
    }

    /// Rebuilds a frame from stored color, depth and mask; world coordinates are
    /// recomputed by unprojection.
    pub fn from_buffers(view: CameraView, rgb: Grid<[u8; 3]>, depth: Grid<f64>, instance_mask: Grid<u32>) -> RGBDFrame {
        let world_coords = Grid::from_fn(depth.width(), depth.height(), |x, y| {
            let d = *depth.get(x, y);
            if d > 0.0 {
                unproject_unchecked(x as f64, y as f64, d, &view)
            } else {
                Vec3::zeros()
            }
        });
        RGBDFrame {
            view,
            rgb,
            depth,
            instance_mask,
            world_coords,
        }
    }

    /// Sorted distinct non-zero instance ids in the mask.
    pub fn visible_instances(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .instance_mask
            .as_slice()
            .iter()
            .copied()
            .filter(|&i| i > 0)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Which scene element a triangle belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Workspace,
    /// Index into `Scene::objects`.
    Object(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneHit {
    pub t: f64,
    pub triangle: u32,
    pub instance_id: u32,
    pub point: Vec3,
}

/// World-space triangle soup of a scene with a BVH.
#[derive(Debug, Clone)]
pub struct RayScene {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub owners: Vec<Owner>,
    pub instance_ids: Vec<u32>,
    bvh: Bvh,
}

impl RayScene {
    pub fn build(scene: &Scene) -> RayScene {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut owners = Vec::new();
        let mut instance_ids = Vec::new();
        let mut push = |mesh: &crate::mesh::TriMesh, owner: Owner, id: u32| {
            let base = vertices.len() as u32;
            vertices.extend_from_slice(&mesh.vertices);
            for t in &mesh.triangles {
                triangles.push([t[0] + base, t[1] + base, t[2] + base]);
                owners.push(owner);
                instance_ids.push(id);
            }
        };
        push(&scene.workspace.mesh(), Owner::Workspace, 0);
        for (i, obj) in scene.objects.iter().enumerate() {
            push(&obj.world_mesh(), Owner::Object(i), obj.instance_id);
        }
        let bvh = Bvh::build(&vertices, &triangles);
        RayScene {
            vertices,
            triangles,
            owners,
            instance_ids,
            bvh,
        }
    }

    /// Nearest hit with `t ∈ [t_min, t_max]` along `origin + t·dir`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<SceneHit> {
        self.bvh
            .intersect(&self.vertices, &self.triangles, origin, dir, t_min, t_max)
            .map(|h| self.scene_hit(origin, dir, h.triangle, h.hit.t))
    }

    /// Same query over every triangle without the BVH.
    pub fn cast_brute_force(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<SceneHit> {
        brute_force_intersect(&self.vertices, &self.triangles, origin, dir, t_min, t_max)
            .map(|h| self.scene_hit(origin, dir, h.triangle, h.hit.t))
    }

    fn scene_hit(&self, origin: &Vec3, dir: &Vec3, triangle: u32, t: f64) -> SceneHit {
        SceneHit {
            t,
            triangle,
            instance_id: self.instance_ids[triangle as usize],
            point: origin + dir * t,
        }
    }

    pub fn triangle_normal(&self, triangle: u32) -> Vec3 {
        let [a, b, c] = self.triangles[triangle as usize];
        triangle_normal(
            &self.vertices[a as usize],
            &self.vertices[b as usize],
            &self.vertices[c as usize],
        )
    }
}

/// Renders `scene` from `view`.
pub fn render_frame(scene: &Scene, view: &CameraView) -> RGBDFrame {
    let rays = RayScene::build(scene);
    render_with(scene, &rays, view)
}

/// Renders with a prebuilt [`RayScene`]; `rays` must have been built from `scene`'s geometry
/// (textures may differ).
pub fn render_with(scene: &Scene, rays: &RayScene, view: &CameraView) -> RGBDFrame {
    let w = view.intrinsics.width as usize;
    let h = view.intrinsics.height as usize;
    let origin = view.center();
    let light = light_direction();
    let rows: Vec<Vec<([u8; 3], f64, u32, Vec3)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let dir = view.ray_direction(x as f64, y as f64);
                    match rays.cast(&origin, &dir, 0.0, f64::INFINITY) {
                        None => ([0, 0, 0], 0.0, 0, Vec3::zeros()),
                        Some(hit) => {
                            let albedo = match rays.owners[hit.triangle as usize] {
                                Owner::Workspace => scene.workspace_texture.color_at(&hit.point),
                                Owner::Object(i) => {
                                    let obj = &scene.objects[i];
                                    let local = obj.pose.inverse().transform_point(&hit.point);
                                    obj.texture.color_at(&local)
                                }
                            };
                            let mut n = rays.triangle_normal(hit.triangle);
                            if n.dot(&dir) > 0.0 {
                                n = -n;
                            }
                            let shade = AMBIENT + DIFFUSE * (n.dot(&light).max(0.0) as f32);
                            let rgb = albedo.map(|c| ((c * shade).clamp(0.0, 1.0) * 255.0).round() as u8);
                            (rgb, hit.t, hit.instance_id, hit.point)
                        }
                    }
                })
                .collect()
        })
        .collect();
    let mut rgb = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    let mut world = Vec::with_capacity(w * h);
    for row in rows {
        for (c, d, m, p) in row {
            rgb.push(c);
            depth.push(d);
            mask.push(m);
            world.push(p);
        }
    }
    RGBDFrame {
        view: *view,
        rgb: Grid::from_vec(w, h, rgb),
        depth: Grid::from_vec(w, h, depth),
        instance_mask: Grid::from_vec(w, h, mask),
        world_coords: Grid::from_vec(w, h, world),
    }
}
