//! Procedural object library with disjoint train / test / novel splits.

use std::fmt;
use std::sync::Arc;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::{axis_angle_matrix, RigidTransform, Vec3};
use crate::mesh::TriMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Novel];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Novel => "novel",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "novel" => Ok(Split::Novel),
            other => Err(config_err!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Box,
    Cylinder,
    Sphere,
    Capsule,
    Superellipsoid,
    /// Two primitives fused into one rigid object.
    Union,
}

/// One row of the split table: a family and the range of its largest extent (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyRange {
    pub split: Split,
    pub family: ShapeFamily,
    pub min_size: f64,
    pub max_size: f64,
}

/// Families and size ranges per split. Same-family rows never overlap across splits.
pub const SPLIT_TABLE: [FamilyRange; 10] = [
    FamilyRange {
        split: Split::Train,
        family: ShapeFamily::Box,
        min_size: 0.05,
        max_size: 0.09,
    },
    FamilyRange {
        split: Split::Train,
        family: ShapeFamily::Cylinder,
        min_size: 0.05,
        max_size: 0.09,
    },
    FamilyRange {
        split: Split::Train,
        family: ShapeFamily::Sphere,
        min_size: 0.05,
        max_size: 0.07,
    },
    FamilyRange {
        split: Split::Train,
        family: ShapeFamily::Capsule,
        min_size: 0.06,
        max_size: 0.09,
    },
    FamilyRange {
        split: Split::Test,
        family: ShapeFamily::Box,
        min_size: 0.095,
        max_size: 0.13,
    },
    FamilyRange {
        split: Split::Test,
        family: ShapeFamily::Cylinder,
        min_size: 0.095,
        max_size: 0.13,
    },
    FamilyRange {
        split: Split::Test,
        family: ShapeFamily::Sphere,
        min_size: 0.075,
        max_size: 0.09,
    },
    FamilyRange {
        split: Split::Test,
        family: ShapeFamily::Capsule,
        min_size: 0.095,
        max_size: 0.13,
    },
    FamilyRange {
        split: Split::Novel,
        family: ShapeFamily::Superellipsoid,
        min_size: 0.05,
        max_size: 0.12,
    },
    FamilyRange {
        split: Split::Novel,
        family: ShapeFamily::Union,
        min_size: 0.06,
        max_size: 0.14,
    },
];

/// True when no two rows of different splits share a family with overlapping ranges.
pub fn splits_disjoint(table: &[FamilyRange]) -> bool {
    table.iter().enumerate().all(|(i, a)| {
        table[i + 1..]
            .iter()
            .all(|b| a.split == b.split || a.family != b.family || a.max_size < b.min_size || b.max_size < a.min_size)
    })
}

pub const MIN_EXTENT: f64 = 0.02;
pub const MAX_EXTENT: f64 = 0.15;

/// A rigid object shape in its canonical frame (bounding box centred at the origin).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub name: String,
    pub family: ShapeFamily,
    pub split: Split,
    /// Largest extent the model was generated for; lies in its split's range.
    pub size: f64,
    pub mesh: TriMesh,
    pub extent: Vec3,
}

impl ObjectModel {
    fn new(name: String, family: ShapeFamily, split: Split, size: f64, mesh: TriMesh) -> ObjectModel {
        let bb = mesh.aabb();
        let mesh = mesh.transformed(&RigidTransform::from_translation(-bb.center()));
        let extent = bb.extent();
        ObjectModel {
            name,
            family,
            split,
            size,
            mesh,
            extent,
        }
    }

    /// Candidate resting orientations before yaw: canonical, and lying on either side.
    pub fn resting_orientations(&self) -> Vec<Matrix3<f64>> {
        match self.family {
            ShapeFamily::Sphere => vec![Matrix3::identity()],
            _ => vec![
                Matrix3::identity(),
                axis_angle_matrix(Vec3::x(), std::f64::consts::FRAC_PI_2),
                axis_angle_matrix(Vec3::y(), std::f64::consts::FRAC_PI_2),
            ],
        }
    }
}

/// Generated models grouped by split.
#[derive(Debug, Clone)]
pub struct ObjectLibrary {
    models: Vec<Arc<ObjectModel>>,
    seed: u64,
}

impl ObjectLibrary {
    /// `per_split` models per split, spread evenly over the split's families.
    pub fn procedural(seed: u64, per_split: usize) -> ObjectLibrary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0B1E_C7u64);
        let mut models = Vec::new();
        for split in Split::ALL {
            let rows: Vec<&FamilyRange> = SPLIT_TABLE.iter().filter(|r| r.split == split).collect();
            for i in 0..per_split {
                let row = rows[i % rows.len()];
                let size = rng.random_range(row.min_size..=row.max_size);
                let mesh = generate_mesh(row.family, size, &mut rng);
                let name = format!("{}_{:?}_{i:03}", split.name(), row.family).to_lowercase();
                models.push(Arc::new(ObjectModel::new(name, row.family, split, size, mesh)));
            }
        }
        ObjectLibrary { models, seed }
    }

    /// Library made of the given models (seed 0).
    pub fn from_models(models: Vec<Arc<ObjectModel>>) -> ObjectLibrary {
        ObjectLibrary { models, seed: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn models(&self, split: Split) -> Vec<Arc<ObjectModel>> {
        self.models.iter().filter(|m| m.split == split).cloned().collect()
    }

    pub fn all(&self) -> &[Arc<ObjectModel>] {
        &self.models
    }
}

fn generate_mesh<R: Rng>(family: ShapeFamily, size: f64, rng: &mut R) -> TriMesh {
    let clamp = |v: f64| v.clamp(MIN_EXTENT, MAX_EXTENT);
    match family {
        ShapeFamily::Box => {
            let b = clamp(size * rng.random_range(0.4..=1.0));
            let c = clamp(size * rng.random_range(0.3..=1.0));
            TriMesh::cuboid(Vec3::new(size, b, c) / 2.0)
        }
        ShapeFamily::Cylinder => {
            let other = clamp(size * rng.random_range(0.45..=1.0));
            let (diameter, height) = if rng.random_bool(0.5) {
                (other.max(0.03), size)
            } else {
                (size, other)
            };
            TriMesh::cylinder(diameter / 2.0, height / 2.0, 16)
        }
        ShapeFamily::Sphere => TriMesh::uv_sphere(size / 2.0, 8, 16),
        ShapeFamily::Capsule => {
            let radius = (size * rng.random_range(0.2..=0.35)).max(MIN_EXTENT / 2.0);
            let half = (size / 2.0 - radius).max(0.0);
            TriMesh::capsule(radius, half, 4, 16)
        }
        ShapeFamily::Superellipsoid => {
            let half = Vec3::new(
                size,
                clamp(size * rng.random_range(0.45..=1.0)),
                clamp(size * rng.random_range(0.35..=1.0)),
            ) / 2.0;
            let e1 = rng.random_range(0.3..=1.0);
            let e2 = rng.random_range(0.3..=1.0);
            TriMesh::superellipsoid(half, e1, e2, 10, 16)
        }
        ShapeFamily::Union => {
            // a box base with a cylinder or sphere attached on top
            let base = Vec3::new(
                size * rng.random_range(0.6..=1.0),
                clamp(size * rng.random_range(0.4..=0.8)),
                clamp(size * rng.random_range(0.25..=0.5)),
            );
            let mut mesh = TriMesh::cuboid(base / 2.0);
            let room = (size - base.z).max(MIN_EXTENT);
            let r = (base.x.min(base.y) / 2.0 * rng.random_range(0.5..=0.9)).max(0.01);
            let offset = Vec3::new(
                rng.random_range(-0.5..=0.5) * (base.x / 2.0 - r).max(0.0),
                rng.random_range(-0.5..=0.5) * (base.y / 2.0 - r).max(0.0),
                0.0,
            );
            let part = if rng.random_bool(0.5) {
                let hh = room / 2.0;
                TriMesh::cylinder(r, hh, 16).transformed(&RigidTransform::from_translation(
                    offset + Vec3::new(0.0, 0.0, base.z / 2.0 + hh * 0.9),
                ))
            } else {
                let rs = r.min(room / 2.0).max(0.01);
                TriMesh::uv_sphere(rs, 8, 16).transformed(&RigidTransform::from_translation(
                    offset + Vec3::new(0.0, 0.0, base.z / 2.0 + rs * 0.6),
                ))
            };
            mesh.append(&part);
            mesh
        }
    }
}
