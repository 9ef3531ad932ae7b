//! Ground-truth pixel correspondences between views of one scene and the match /
//! non-match pair sampler used for descriptor training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};
use crate::geometry::{project, Pixel, Projection};
use crate::render::RGBDFrame;

/// Default world-point agreement tolerance (meters).
pub const DEFAULT_TOLERANCE: f64 = 0.003;

/// Outcome of reprojecting one pixel into another view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reprojection {
    Match(Pixel),
    BehindCamera,
    OutOfBounds,
    InvalidDepth(Pixel),
    /// The target pixel sees a different surface point, `distance` meters away.
    Occluded {
        pixel: Pixel,
        distance: f64,
    },
}

/// Reprojects `u_a` into `frame_b` and reports why it does or does not correspond.
pub fn reproject(u_a: Pixel, frame_a: &RGBDFrame, frame_b: &RGBDFrame, tol: f64) -> Result<Reprojection> {
    let Some(p) = frame_a.world_at(u_a) else {
        return Err(domain_err!(
            "pixel ({}, {}) has no valid depth in the source frame",
            u_a.x,
            u_a.y
        ));
    };
    let u_b = match project(&p, &frame_b.view) {
        Projection::BehindCamera => return Ok(Reprojection::BehindCamera),
        visible => visible.rounded().expect("visible projection"),
    };
    if !frame_b.view.intrinsics.contains(u_b) {
        return Ok(Reprojection::OutOfBounds);
    }
    let Some(q) = frame_b.world_at(u_b) else {
        return Ok(Reprojection::InvalidDepth(u_b));
    };
    let distance = (p - q).norm();
    Ok(if distance <= tol {
        Reprojection::Match(u_b)
    } else {
        Reprojection::Occluded { pixel: u_b, distance }
    })
}

/// The pixel in `frame_b` showing the same surface point as `u_a`, if visible.
pub fn find_correspondence(u_a: Pixel, frame_a: &RGBDFrame, frame_b: &RGBDFrame, tol: f64) -> Result<Option<Pixel>> {
    Ok(match reproject(u_a, frame_a, frame_b, tol)? {
        Reprojection::Match(u) => Some(u),
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSamplingConfig {
    pub n_match: usize,
    pub n_nonmatch_per_type: usize,
    /// Attempts allowed per requested pair.
    pub retry_factor: usize,
    pub tolerance: f64,
    /// When set, non-match pairs within this many pixels of the true correspondence are
    /// rejected.
    pub nonmatch_exclusion_px: Option<f64>,
}

impl Default for PairSamplingConfig {
    fn default() -> Self {
        PairSamplingConfig {
            n_match: 100,
            n_nonmatch_per_type: 1500,
            retry_factor: 10,
            tolerance: DEFAULT_TOLERANCE,
            nonmatch_exclusion_px: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameId {
    pub scene: usize,
    pub view: usize,
}

pub type PixelPair = (Pixel, Pixel);

/// Sampled supervision for one ordered image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelMatchSet {
    pub matches: Vec<PixelPair>,
    /// Object pixel in A, object pixel in B.
    pub nonmatch_oo: Vec<PixelPair>,
    /// Object pixel in A, background pixel in B.
    pub nonmatch_ob: Vec<PixelPair>,
    /// Background pixel in A, background pixel in B.
    pub nonmatch_bb: Vec<PixelPair>,
    pub frame_ids: Option<[FrameId; 2]>,
    /// Some list came out shorter than requested.
    pub shortfall: bool,
    /// No match could be found; the pair should be skipped.
    pub empty: bool,
}

impl PixelMatchSet {
    pub fn nonmatch_classes(&self) -> [&[PixelPair]; 3] {
        [&self.nonmatch_oo, &self.nonmatch_ob, &self.nonmatch_bb]
    }
}

/// Object (mask > 0) and background (mask 0) pixels with valid depth.
fn pixel_classes(frame: &RGBDFrame) -> (Vec<Pixel>, Vec<Pixel>) {
    let (mut objects, mut background) = (Vec::new(), Vec::new());
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let p = Pixel::new(x as i32, y as i32);
            if !frame.has_depth(p) {
                continue;
            }
            if frame.instance_at(p) > 0 {
                objects.push(p);
            } else {
                background.push(p);
            }
        }
    }
    (objects, background)
}

/// Draws matches and the three non-match classes (pixels of A paired with pixels of B).
/// Only pixels with valid depth are eligible.
pub fn sample_training_pairs<R: Rng + ?Sized>(
    frame_a: &RGBDFrame,
    frame_b: &RGBDFrame,
    config: &PairSamplingConfig,
    rng: &mut R,
) -> PixelMatchSet {
    let (obj_a, bg_a) = pixel_classes(frame_a);
    let (obj_b, bg_b) = pixel_classes(frame_b);
    let tol = config.tolerance;
    let correspondence = |u: Pixel| find_correspondence(u, frame_a, frame_b, tol).expect("valid source depth");

    let mut matches = Vec::with_capacity(config.n_match);
    if !obj_a.is_empty() {
        for _ in 0..config.n_match * config.retry_factor {
            if matches.len() == config.n_match {
                break;
            }
            let u_a = obj_a[rng.random_range(0..obj_a.len())];
            if let Some(u_b) = correspondence(u_a) {
                if frame_b.instance_at(u_b) > 0 {
                    matches.push((u_a, u_b));
                }
            }
        }
    }

    let nonmatches = |from: &[Pixel], to: &[Pixel], rng: &mut R| -> Vec<PixelPair> {
        let mut out = Vec::with_capacity(config.n_nonmatch_per_type);
        if from.is_empty() || to.is_empty() {
            return out;
        }
        for _ in 0..config.n_nonmatch_per_type * config.retry_factor {
            if out.len() == config.n_nonmatch_per_type {
                break;
            }
            let u_a = from[rng.random_range(0..from.len())];
            let u_b = to[rng.random_range(0..to.len())];
            let rejected = match correspondence(u_a) {
                Some(true_b) => match config.nonmatch_exclusion_px {
                    Some(r) => true_b.distance(&u_b) <= r,
                    None => true_b == u_b,
                },
                None => false,
            };
            if !rejected {
                out.push((u_a, u_b));
            }
        }
        out
    };
    let nonmatch_oo = nonmatches(&obj_a, &obj_b, rng);
    let nonmatch_ob = nonmatches(&obj_a, &bg_b, rng);
    let nonmatch_bb = nonmatches(&bg_a, &bg_b, rng);

    let shortfall = matches.len() < config.n_match
        || [&nonmatch_oo, &nonmatch_ob, &nonmatch_bb]
            .iter()
            .any(|l| l.len() < config.n_nonmatch_per_type);
    PixelMatchSet {
        empty: matches.is_empty(),
        matches,
        nonmatch_oo,
        nonmatch_ob,
        nonmatch_bb,
        frame_ids: None,
        shortfall,
    }
}
