//! Procedural surface textures, evaluated in an object's local frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid {
        color: Rgb,
    },
    /// 3D checkerboard with cubic cells of side `cell` meters.
    Checker {
        a: Rgb,
        b: Rgb,
        cell: f64,
    },
    /// Trilinear value noise blending two colors; `scale` is the lattice spacing in meters.
    ValueNoise {
        a: Rgb,
        b: Rgb,
        scale: f64,
        seed: u64,
    },
}

impl Texture {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Texture {
        let color = |rng: &mut R| -> Rgb { [rng.random(), rng.random(), rng.random()] };
        match rng.random_range(0..3) {
            0 => Texture::Solid { color: color(rng) },
            1 => {
                let a = color(rng);
                let b = color(rng);
                Texture::Checker {
                    a,
                    b,
                    cell: rng.random_range(0.005..0.03),
                }
            }
            _ => {
                let a = color(rng);
                let b = color(rng);
                Texture::ValueNoise {
                    a,
                    b,
                    scale: rng.random_range(0.004..0.03),
                    seed: rng.random(),
                }
            }
        }
    }

    pub fn color_at(&self, p: &Vec3) -> Rgb {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { a, b, cell } => {
                let k = (p.x / cell).floor() as i64 + (p.y / cell).floor() as i64 + (p.z / cell).floor() as i64;
                if k.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::ValueNoise { a, b, scale, seed } => {
                let w = value_noise(p / *scale, *seed) as f32;
                [
                    a[0] + (b[0] - a[0]) * w,
                    a[1] + (b[1] - a[1]) * w,
                    a[2] + (b[2] - a[2]) * w,
                ]
            }
        }
    }
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    // splitmix64 over the packed lattice coordinate
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (iz as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: Vec3, seed: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty, tz) = (smooth(p.x - fx), smooth(p.y - fy), smooth(p.z - fz));
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { tx } else { 1.0 - tx })
                    * (if dy == 1 { ty } else { 1.0 - ty })
                    * (if dz == 1 { tz } else { 1.0 - tz });
                acc += w * lattice(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}
