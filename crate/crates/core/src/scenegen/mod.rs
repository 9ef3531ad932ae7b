//! Procedural cluttered scenes: object library, drop-and-settle placement, texture
//! randomization, camera sampling and the on-disk descriptor dataset.

mod dataset;
mod library;
pub mod settle;

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_descriptor_dataset, render_dataset_view, sha256_hex, CameraShell, Dataset, DatasetConfig, DatasetManifest,
    SceneRecord, TextureMode, ViewRecord, DATASET_SCHEMA_VERSION,
};
pub use library::{
    splits_disjoint, FamilyRange, ObjectLibrary, ObjectModel, ShapeFamily, Split, MAX_EXTENT, MIN_EXTENT, SPLIT_TABLE,
};

use crate::error::{config_err, Result};
use crate::geometry::{axis_angle_matrix, RigidTransform, Vec3};
use crate::mesh::{Aabb, TriMesh};
use crate::texture::Texture;
use settle::{drop_shift, Obstacle};

/// Placement attempts per object before the scene is declared full.
pub const MAX_PLACEMENT_RETRIES: usize = 50;
/// Largest tilt tried by the resting-orientation relaxation.
pub const MAX_RELAX_TILT_DEG: f64 = 30.0;

/// The surface objects are dropped onto.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workspace {
    /// Flat table at z = 0; objects are placed inside `extent` around the origin.
    Table { extent: [f64; 2], table_size: f64 },
    /// Open-top box standing on the table; `interior` is the inner floor size.
    Basket {
        interior: [f64; 2],
        wall_height: f64,
        wall_thickness: f64,
        table_size: f64,
    },
}

impl Workspace {
    pub fn table(extent: [f64; 2]) -> Workspace {
        Workspace::Table {
            extent,
            table_size: 1.6,
        }
    }

    pub fn basket(interior: [f64; 2]) -> Workspace {
        Workspace::Basket {
            interior,
            wall_height: 0.10,
            wall_thickness: 0.01,
            table_size: 1.6,
        }
    }

    /// Region (centred on the origin) that object footprints must stay inside.
    pub fn placement_extent(&self) -> [f64; 2] {
        match self {
            Workspace::Table { extent, .. } => *extent,
            Workspace::Basket { interior, .. } => *interior,
        }
    }

    pub fn floor_z(&self) -> f64 {
        0.0
    }

    pub fn max_stack_height(&self) -> f64 {
        match self {
            Workspace::Table { .. } => 0.25,
            Workspace::Basket { wall_height, .. } => wall_height + 0.08,
        }
    }

    /// Basket walls as boxes; empty for a table.
    pub fn walls(&self) -> Vec<Aabb> {
        match self {
            Workspace::Table { .. } => Vec::new(),
            Workspace::Basket {
                interior,
                wall_height,
                wall_thickness,
                ..
            } => {
                let (ix, iy, h, t) = (interior[0] / 2.0, interior[1] / 2.0, *wall_height, *wall_thickness);
                let aabb = |min: Vec3, max: Vec3| Aabb { min, max };
                vec![
                    aabb(Vec3::new(ix, -iy - t, 0.0), Vec3::new(ix + t, iy + t, h)),
                    aabb(Vec3::new(-ix - t, -iy - t, 0.0), Vec3::new(-ix, iy + t, h)),
                    aabb(Vec3::new(-ix, iy, 0.0), Vec3::new(ix, iy + t, h)),
                    aabb(Vec3::new(-ix, -iy - t, 0.0), Vec3::new(ix, -iy, h)),
                ]
            }
        }
    }

    pub fn wall_top(&self) -> Option<f64> {
        match self {
            Workspace::Table { .. } => None,
            Workspace::Basket { wall_height, .. } => Some(*wall_height),
        }
    }

    /// Renderable geometry: table plane plus walls.
    pub fn mesh(&self) -> TriMesh {
        let size = match self {
            Workspace::Table { table_size, .. } | Workspace::Basket { table_size, .. } => *table_size,
        };
        let s = size / 2.0;
        let mut mesh = TriMesh {
            vertices: vec![
                Vec3::new(-s, -s, 0.0),
                Vec3::new(s, -s, 0.0),
                Vec3::new(s, s, 0.0),
                Vec3::new(-s, s, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            parts: vec![0..2],
        };
        for wall in self.walls() {
            let half = wall.extent() / 2.0;
            mesh.append(&TriMesh::cuboid(half).transformed(&RigidTransform::from_translation(wall.center())));
        }
        mesh
    }
}

/// Request for one cluttered scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub object_count: usize,
    pub rng_seed: u64,
    pub split: Split,
    pub workspace: Workspace,
}

/// An object instance posed in a scene.
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub instance_id: u32,
    pub model: Arc<ObjectModel>,
    pub pose: RigidTransform,
    pub texture: Texture,
}

impl SceneObject {
    pub fn world_mesh(&self) -> TriMesh {
        self.model.mesh.transformed(&self.pose)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub workspace: Workspace,
    pub workspace_texture: Texture,
    /// Set when the workspace filled up before `object_count` objects were placed.
    pub placement_shortfall: bool,
}

impl Scene {
    pub fn empty(workspace: Workspace, workspace_texture: Texture) -> Scene {
        Scene {
            objects: Vec::new(),
            workspace,
            workspace_texture,
            placement_shortfall: false,
        }
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        self.objects.iter().map(|o| o.instance_id).collect()
    }

    pub fn object(&self, instance_id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }

    pub fn remove(&mut self, instance_id: u32) -> Option<SceneObject> {
        let idx = self.objects.iter().position(|o| o.instance_id == instance_id)?;
        Some(self.objects.remove(idx))
    }

    /// Vertical gap between each object and what supports it (earlier objects or the floor).
    /// Zero for exact contact; positive when hovering, negative when sunk in.
    pub fn support_residuals(&self) -> Vec<f64> {
        let obstacles: Vec<Obstacle> = self.objects.iter().map(|o| Obstacle::new(o.world_mesh())).collect();
        (0..obstacles.len())
            .map(|i| -drop_shift(&obstacles[i], self.workspace.floor_z(), &obstacles[..i]))
            .collect()
    }

    /// Fingerprint of the geometric content (poses and model names), ignoring textures.
    pub fn geometry_eq(&self, other: &Scene) -> bool {
        self.workspace == other.workspace
            && self.objects.len() == other.objects.len()
            && self
                .objects
                .iter()
                .zip(&other.objects)
                .all(|(a, b)| a.instance_id == b.instance_id && a.pose == b.pose && a.model.mesh == b.model.mesh)
    }
}

/// Builds a scene by dropping objects one at a time at uniform random `(x, y, yaw)`.
/// Deterministic in `spec.rng_seed`.
pub fn build_scene(spec: &SceneSpec, library: &ObjectLibrary) -> Result<Scene> {
    if spec.object_count == 0 || spec.object_count > 30 {
        return Err(config_err!("object_count {} outside [1, 30]", spec.object_count));
    }
    let models = library.models(spec.split);
    if models.is_empty() {
        return Err(config_err!("object library has no models for split {}", spec.split));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut scene = Scene::empty(spec.workspace.clone(), Texture::random(&mut rng));
    let mut obstacles: Vec<Obstacle> = Vec::new();
    for k in 0..spec.object_count {
        let model = models[rng.random_range(0..models.len())].clone();
        let texture = Texture::random(&mut rng);
        match place_object(&model, &spec.workspace, &obstacles, &mut rng) {
            Some((pose, obstacle)) => {
                obstacles.push(obstacle);
                scene.objects.push(SceneObject {
                    instance_id: k as u32 + 1,
                    model,
                    pose,
                    texture,
                });
            }
            None => {
                log::warn!(
                    "workspace full after {} of {} objects (seed {})",
                    k,
                    spec.object_count,
                    spec.rng_seed
                );
                scene.placement_shortfall = true;
                break;
            }
        }
    }
    Ok(scene)
}

fn footprint_inside(aabb: &Aabb, extent: [f64; 2]) -> bool {
    let (hx, hy) = (extent[0] / 2.0 + 1e-12, extent[1] / 2.0 + 1e-12);
    aabb.min.x >= -hx && aabb.max.x <= hx && aabb.min.y >= -hy && aabb.max.y <= hy
}

/// Drops `model` with rotation `rotation` at `(x, y)`; returns the resting pose, its
/// obstacle and whether it rests on the floor alone.
fn drop_at(
    model: &ObjectModel,
    rotation: Matrix3<f64>,
    x: f64,
    y: f64,
    workspace: &Workspace,
    obstacles: &[Obstacle],
) -> Option<(RigidTransform, Obstacle, bool)> {
    let pose = RigidTransform::new(rotation, Vec3::new(x, y, 0.0)).ok()?;
    let candidate = Obstacle::new(model.mesh.transformed(&pose));
    if !footprint_inside(&candidate.aabb, workspace.placement_extent()) {
        return None;
    }
    let floor_shift = workspace.floor_z() - candidate.aabb.min.z;
    let shift = drop_shift(&candidate, workspace.floor_z(), obstacles);
    let on_floor = shift <= floor_shift;
    let pose = RigidTransform::new(rotation, Vec3::new(x, y, shift)).ok()?;
    let placed = Obstacle::new(model.mesh.transformed(&pose));
    Some((pose, placed, on_floor))
}

fn place_object(
    model: &ObjectModel,
    workspace: &Workspace,
    obstacles: &[Obstacle],
    rng: &mut ChaCha8Rng,
) -> Option<(RigidTransform, Obstacle)> {
    let extent = workspace.placement_extent();
    let orientations = model.resting_orientations();
    for _ in 0..MAX_PLACEMENT_RETRIES {
        let base = orientations[rng.random_range(0..orientations.len())];
        let yaw = rng.random_range(0.0..TAU);
        let rotation = axis_angle_matrix(Vec3::z(), yaw) * base;
        let ux: f64 = rng.random_range(-0.5..0.5);
        let uy: f64 = rng.random_range(-0.5..0.5);
        // sample the position inside the region the rotated footprint allows
        let footprint = model
            .mesh
            .transformed(&RigidTransform::new(rotation, Vec3::zeros()).ok()?)
            .aabb();
        let room_x = extent[0] - footprint.extent().x;
        let room_y = extent[1] - footprint.extent().y;
        if room_x < 0.0 || room_y < 0.0 {
            continue;
        }
        let x = ux * room_x - footprint.center().x;
        let y = uy * room_y - footprint.center().y;
        let Some((mut pose, mut placed, on_floor)) = drop_at(model, rotation, x, y, workspace, obstacles) else {
            continue;
        };
        if !on_floor {
            // settle toward the tilt that lowers the centre of mass the most
            let mut best_height = pose.translation().z;
            for tilt_deg in [MAX_RELAX_TILT_DEG / 2.0, MAX_RELAX_TILT_DEG] {
                for k in 0..8 {
                    let phi = TAU * k as f64 / 8.0;
                    let axis = Vec3::new(phi.cos(), phi.sin(), 0.0);
                    let r = axis_angle_matrix(axis, tilt_deg.to_radians()) * rotation;
                    if let Some((p, o, _)) = drop_at(model, r, x, y, workspace, obstacles) {
                        if p.translation().z < best_height - 1e-9 {
                            best_height = p.translation().z;
                            pose = p;
                            placed = o;
                        }
                    }
                }
            }
        }
        if placed.aabb.max.z > workspace.max_stack_height() {
            continue;
        }
        return Some((pose, placed));
    }
    None
}

/// Fresh random textures for every object and the workspace; geometry is untouched.
pub fn randomize_textures<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Scene {
    let mut out = scene.clone();
    out.workspace_texture = Texture::random(rng);
    for obj in &mut out.objects {
        obj.texture = Texture::random(rng);
    }
    out
}

/// Derives an independent stream seed from a base seed and an index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lib() -> ObjectLibrary {
        ObjectLibrary::procedural(3, 12)
    }

    #[test]
    fn single_box_rests_at_half_height() {
        let mut lib = lib();
        // a library with only one flat box in the train split
        let model = lib
            .all()
            .iter()
            .find(|m| m.family == ShapeFamily::Box && m.split == Split::Train)
            .unwrap()
            .clone();
        lib = ObjectLibrary::from_models(vec![model.clone()]);
        let spec = SceneSpec {
            object_count: 1,
            rng_seed: 9,
            split: Split::Train,
            workspace: Workspace::table([0.4, 0.4]),
        };
        let scene = build_scene(&spec, &lib).unwrap();
        assert_eq!(scene.objects.len(), 1);
        let obj = &scene.objects[0];
        let bb = obj.world_mesh().aabb();
        assert!(bb.min.z.abs() < 1e-12);
        // rests on one of its faces: centre height equals half of the vertical extent
        assert!((obj.pose.translation().z - bb.extent().z / 2.0).abs() < 2e-3);
    }

    #[test]
    fn same_seed_same_scene() {
        let lib = lib();
        let spec = SceneSpec {
            object_count: 8,
            rng_seed: 42,
            split: Split::Train,
            workspace: Workspace::basket([0.3, 0.3]),
        };
        let a = build_scene(&spec, &lib).unwrap();
        let b = build_scene(&spec, &lib).unwrap();
        assert!(a.geometry_eq(&b));
        assert_eq!(a.workspace_texture, b.workspace_texture);
        for (x, y) in a.objects.iter().zip(&b.objects) {
            assert_eq!(x.texture, y.texture);
        }
    }

    #[test]
    fn cluttered_scenes_are_supported() {
        let lib = lib();
        for seed in 0..4 {
            let spec = SceneSpec {
                object_count: 15,
                rng_seed: seed,
                split: Split::Novel,
                workspace: Workspace::table([0.3, 0.3]),
            };
            let scene = build_scene(&spec, &lib).unwrap();
            for r in scene.support_residuals() {
                assert!(r.abs() <= 2e-3, "support residual {r}");
            }
            for o in &scene.objects {
                assert!(o.world_mesh().aabb().min.z >= -1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let lib = lib();
        let mut spec = SceneSpec {
            object_count: 0,
            rng_seed: 1,
            split: Split::Train,
            workspace: Workspace::table([0.3, 0.3]),
        };
        assert!(build_scene(&spec, &lib).is_err());
        spec.object_count = 3;
        assert!(build_scene(&spec, &ObjectLibrary::from_models(vec![])).is_err());
    }

    #[test]
    fn overflow_sets_the_shortfall_flag() {
        let lib = lib();
        let spec = SceneSpec {
            object_count: 30,
            rng_seed: 5,
            split: Split::Test,
            workspace: Workspace::basket([0.14, 0.14]),
        };
        let scene = build_scene(&spec, &lib).unwrap();
        assert!(scene.placement_shortfall);
        assert!(scene.objects.len() < 30);
    }

    #[test]
    fn retexturing_keeps_geometry() {
        let lib = lib();
        let spec = SceneSpec {
            object_count: 5,
            rng_seed: 8,
            split: Split::Train,
            workspace: Workspace::table([0.3, 0.3]),
        };
        let scene = build_scene(&spec, &lib).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randomize_textures(&scene, &mut rng);
        assert!(a.geometry_eq(&scene));
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let b = randomize_textures(&scene, &mut rng2);
        assert_ne!(a.workspace_texture, b.workspace_texture);
    }
}
