//! Pixel-to-pick resolution, the 7-ray suction seal test and the arm clearance proxy.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Result};
use crate::geometry::{estimate_normal_at, unproject, Pixel, Vec3};
use crate::mesh::Aabb;
use crate::render::{RGBDFrame, RayScene, SceneHit};
use crate::scenegen::Workspace;

/// Sensor rays start this far in front of the pad face so a surface touching the face is hit.
pub const SENSOR_STANDOFF: f64 = 0.001;
/// Centre sensor plus six on the pad rim.
pub const SENSOR_COUNT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuctionPadModel {
    pub pad_radius: f64,
    pub sensor_range: f64,
    /// Radius of the cylinder standing in for the arm during the approach.
    pub approach_clearance_radius: f64,
    pub max_tilt_deg: f64,
}

impl Default for SuctionPadModel {
    fn default() -> Self {
        SuctionPadModel {
            pad_radius: 0.015,
            sensor_range: 0.007,
            approach_clearance_radius: 0.04,
            max_tilt_deg: 60.0,
        }
    }
}

impl SuctionPadModel {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(self.pad_radius) && positive(self.sensor_range) && self.approach_clearance_radius >= 0.0) {
            return Err(config_err!("suction pad dimensions must be positive"));
        }
        if !(self.max_tilt_deg > 0.0 && self.max_tilt_deg <= 90.0) {
            return Err(config_err!("max_tilt_deg must be in (0, 90]"));
        }
        Ok(())
    }

    /// Sensor positions on the pad face centred at `p` with face normal `n`:
    /// the centre first, then six rim points 60° apart.
    pub fn sensor_positions(&self, p: &Vec3, n: &Vec3) -> [Vec3; SENSOR_COUNT] {
        let (u, v) = face_basis(n);
        let mut out = [*p; SENSOR_COUNT];
        for (k, s) in out.iter_mut().enumerate().skip(1) {
            let a = std::f64::consts::FRAC_PI_3 * (k - 1) as f64;
            *s = p + (u * a.cos() + v * a.sin()) * self.pad_radius;
        }
        out
    }
}

/// Orthonormal pair spanning the plane perpendicular to `n`.
fn face_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = helper.cross(n).normalize();
    let v = n.cross(&u);
    (u, v)
}

/// Limits `n` to at most `max_deg` from +z, keeping its azimuth.
pub fn clip_normal(n: &Vec3, max_deg: f64) -> Vec3 {
    let n = n.normalize();
    let max = max_deg.to_radians();
    let tilt = n.z.clamp(-1.0, 1.0).acos();
    if tilt <= max {
        return n;
    }
    let horizontal = Vec3::new(n.x, n.y, 0.0);
    let h = horizontal.norm();
    // straight down has no azimuth; fall back to +x
    let dir = if h > 1e-12 { horizontal / h } else { Vec3::x() };
    dir * max.sin() + Vec3::z() * max.cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolvedAction {
    Target {
        point: [f64; 3],
        /// Clipped approach normal (unit, pointing away from the surface).
        normal: [f64; 3],
        raw_normal: [f64; 3],
    },
    /// Invalid depth or no usable normal at the pixel.
    InvalidTarget,
}

/// Turns a pixel into a contact point and clipped approach normal using only the
/// observation's depth.
pub fn resolve_action(
    frame: &RGBDFrame,
    pixel: Pixel,
    normal_radius: f64,
    max_tilt_deg: f64,
) -> Result<ResolvedAction> {
    if !frame.view.intrinsics.contains(pixel) {
        return Err(domain_err!("action ({}, {}) outside the observation", pixel.x, pixel.y));
    }
    let d = *frame.depth.get(pixel.x as usize, pixel.y as usize);
    if !(d > 0.0) {
        return Ok(ResolvedAction::InvalidTarget);
    }
    let point = unproject(pixel, d, &frame.view)?;
    let Some(raw) = estimate_normal_at(&frame.depth, &frame.view, pixel, normal_radius)? else {
        return Ok(ResolvedAction::InvalidTarget);
    };
    let n = clip_normal(&raw, max_tilt_deg);
    Ok(ResolvedAction::Target {
        point: point.into(),
        normal: n.into(),
        raw_normal: raw.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PickKind {
    Success,
    PartialSeal,
    Miss,
    Collision,
    Unreachable,
}

impl PickKind {
    pub const ALL: [PickKind; 5] = [
        PickKind::Success,
        PickKind::PartialSeal,
        PickKind::Miss,
        PickKind::Collision,
        PickKind::Unreachable,
    ];

    /// Outcomes that end the episode as unsafe.
    pub fn is_unsafe(self) -> bool {
        matches!(self, PickKind::Collision | PickKind::Unreachable)
    }

    pub fn name(self) -> &'static str {
        match self {
            PickKind::Success => "success",
            PickKind::PartialSeal => "partial_seal",
            PickKind::Miss => "miss",
            PickKind::Collision => "collision",
            PickKind::Unreachable => "unreachable",
        }
    }
}

/// Result of the contact test, before rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactResult {
    pub kind: PickKind,
    /// Present iff `kind` is success.
    pub picked_id: Option<u32>,
    /// Object id seen by each sensor within range (0 when none).
    pub sensor_ids: [u32; SENSOR_COUNT],
}

impl ContactResult {
    fn without_sensors(kind: PickKind) -> ContactResult {
        ContactResult {
            kind,
            picked_id: None,
            sensor_ids: [0; SENSOR_COUNT],
        }
    }
}

/// Axis segment of the arm proxy: from `p` along `n` until the basket rim height.
/// `None` when `p` is already at or above the rim or there are no walls.
pub fn approach_segment(p: &Vec3, n: &Vec3, workspace: &Workspace) -> Option<(Vec3, Vec3)> {
    let top = workspace.wall_top()?;
    if p.z >= top || n.z <= 0.0 {
        return None;
    }
    let s = (top - p.z) / n.z;
    Some((*p, p + n * s))
}

/// Distance between a point and a box (0 inside).
fn point_box_distance(q: &Vec3, b: &Aabb) -> f64 {
    let dx = (b.min.x - q.x).max(0.0).max(q.x - b.max.x);
    let dy = (b.min.y - q.y).max(0.0).max(q.y - b.max.y);
    let dz = (b.min.z - q.z).max(0.0).max(q.z - b.max.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Minimum distance between segment `a→b` and a box. The distance along a segment is
/// convex, so golden-section search converges to the minimum.
pub fn segment_box_distance(a: &Vec3, b: &Vec3, bx: &Aabb) -> f64 {
    let f = |t: f64| point_box_distance(&(a + (b - a) * t), bx);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..120 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    f(0.0).min(f(1.0)).min(f1).min(f2)
}

/// True when the arm proxy cylinder around the approach segment touches a wall.
pub fn approach_collides(p: &Vec3, n: &Vec3, workspace: &Workspace, radius: f64) -> bool {
    let Some((a, b)) = approach_segment(p, n, workspace) else {
        return false;
    };
    workspace
        .walls()
        .iter()
        .any(|w| segment_box_distance(&a, &b, w) < radius)
}

/// Whether `p` lies inside the basket's interior footprint (or the table extent).
pub fn inside_workspace(p: &Vec3, workspace: &Workspace) -> bool {
    let [ex, ey] = workspace.placement_extent();
    p.x.abs() <= ex / 2.0
        && p.y.abs() <= ey / 2.0
        && p.z >= workspace.floor_z() - 1e-6
        && p.z <= workspace.max_stack_height() + 0.05
}

/// Full contact test with an explicit ray caster; `cast(origin, dir, t_min, t_max)`.
pub(crate) fn contact_test(
    p: &Vec3,
    n: &Vec3,
    workspace: &Workspace,
    pad: &SuctionPadModel,
    collides: impl Fn(&Vec3, &Vec3) -> bool,
    cast: impl Fn(&Vec3, &Vec3, f64, f64) -> Option<SceneHit>,
) -> ContactResult {
    if !inside_workspace(p, workspace) {
        return ContactResult::without_sensors(PickKind::Unreachable);
    }
    if collides(p, n) {
        return ContactResult::without_sensors(PickKind::Collision);
    }
    let dir = -n;
    let t_max = pad.sensor_range + SENSOR_STANDOFF;
    let mut ids = [0u32; SENSOR_COUNT];
    for (k, s) in pad.sensor_positions(p, n).iter().enumerate() {
        let origin = s + n * SENSOR_STANDOFF;
        if let Some(hit) = cast(&origin, &dir, 0.0, t_max) {
            ids[k] = hit.instance_id;
        }
    }
    let center = ids[0];
    let kind = if center == 0 {
        PickKind::Miss
    } else if ids.iter().all(|id| *id == center) {
        PickKind::Success
    } else {
        PickKind::PartialSeal
    };
    ContactResult {
        kind,
        picked_id: (kind == PickKind::Success).then_some(center),
        sensor_ids: ids,
    }
}

/// Runs the clearance check and the seal test against the scene's BVH.
pub fn attempt_pick(
    p: &Vec3,
    n: &Vec3,
    rays: &RayScene,
    workspace: &Workspace,
    pad: &SuctionPadModel,
) -> ContactResult {
    contact_test(
        p,
        n,
        workspace,
        pad,
        |p, n| approach_collides(p, n, workspace, pad.approach_clearance_radius),
        |o, d, t0, t1| rays.cast(o, d, t0, t1),
    )
}

/// Exact segment-box distance from the piecewise-quadratic structure of the squared
/// distance; used as an independent oracle for [`segment_box_distance`].
pub fn segment_box_distance_exact(a: &Vec3, b: &Vec3, bx: &Aabb) -> f64 {
    let d = b - a;
    let mut cuts = vec![0.0, 1.0];
    for i in 0..3 {
        if d[i].abs() > 0.0 {
            for plane in [bx.min[i], bx.max[i]] {
                let t = (plane - a[i]) / d[i];
                if t > 0.0 && t < 1.0 {
                    cuts.push(t);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    let sq = |t: f64| point_box_distance(&(a + d * t), bx).powi(2);
    let mut best = f64::INFINITY;
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let mid = 0.5 * (t0 + t1);
        // on this piece each axis is either inside its slab or clamped to one face
        let q = a + d * mid;
        let (mut qa, mut qb) = (0.0, 0.0);
        for i in 0..3 {
            let face = if q[i] < bx.min[i] {
                Some(bx.min[i])
            } else if q[i] > bx.max[i] {
                Some(bx.max[i])
            } else {
                None
            };
            if let Some(f) = face {
                qa += d[i] * d[i];
                qb += 2.0 * d[i] * (a[i] - f);
            }
        }
        let mut cands = vec![t0, t1];
        if qa > 0.0 {
            let t = -qb / (2.0 * qa);
            if t > t0 && t < t1 {
                cands.push(t);
            }
        }
        for t in cands {
            best = best.min(sq(t));
        }
    }
    best.sqrt()
}

/// Independent oracle: every sensor ray is tested against every triangle and the wall
/// clearance uses the exact segment-box distance.
pub fn attempt_pick_oracle(
    p: &Vec3,
    n: &Vec3,
    rays: &RayScene,
    workspace: &Workspace,
    pad: &SuctionPadModel,
) -> ContactResult {
    contact_test(
        p,
        n,
        workspace,
        pad,
        |p, n| match approach_segment(p, n, workspace) {
            None => false,
            Some((a, b)) => workspace
                .walls()
                .iter()
                .any(|w| segment_box_distance_exact(&a, &b, w) < pad.approach_clearance_radius),
        },
        |o, d, t0, t1| rays.cast_brute_force(o, d, t0, t1),
    )
}
