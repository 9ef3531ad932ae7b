//! Bin-picking environment: a basket of settled objects seen by a fixed overhead RGB-D
//! camera, picked one pixel action at a time with a suction pad.

mod suction;

pub use suction::{
    approach_collides, approach_segment, attempt_pick, attempt_pick_oracle, clip_normal, inside_workspace,
    resolve_action, segment_box_distance, segment_box_distance_exact, ContactResult, PickKind, ResolvedAction,
    SuctionPadModel, SENSOR_COUNT, SENSOR_STANDOFF,
};

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::{CameraIntrinsics, CameraView, Pixel, RigidTransform, Vec3};
use crate::grid::Grid;
use crate::render::{render_with, RGBDFrame, RayScene};
use crate::scenegen::settle::{drop_shift, Obstacle};
use crate::scenegen::{build_scene, derive_seed, ObjectLibrary, Scene, SceneSpec, Split, Workspace};

pub const REWARD_SUCCESS: f64 = 0.1;
pub const REWARD_FAILURE: f64 = -0.1;
pub const REWARD_TERMINAL: f64 = -1.0;
/// Every reward the environment can emit.
pub const REWARD_VALUES: [f64; 3] = [REWARD_SUCCESS, REWARD_FAILURE, REWARD_TERMINAL];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinEnvConfig {
    pub object_count: usize,
    pub split: Split,
    pub basket: Workspace,
    pub image_size: u32,
    pub fov_y_deg: f64,
    /// Camera height above the basket floor; the camera looks straight down.
    pub camera_height: f64,
    pub pad: SuctionPadModel,
    /// Neighbourhood radius for surface normals at the picked pixel.
    pub normal_radius: f64,
    /// Gaussian noise on observed depth (meters); contact always uses exact geometry.
    pub depth_noise_std: f64,
    /// Re-drop the remaining objects after each removal.
    pub settle_after_removal: bool,
    pub library_seed: u64,
    pub models_per_split: usize,
}

impl BinEnvConfig {
    /// 10 training objects at 128×128.
    pub fn paper() -> BinEnvConfig {
        BinEnvConfig {
            object_count: 10,
            split: Split::Train,
            basket: Workspace::basket([0.3, 0.3]),
            image_size: 128,
            fov_y_deg: 45.0,
            camera_height: 0.5,
            pad: SuctionPadModel::default(),
            normal_radius: 0.008,
            depth_noise_std: 0.0,
            settle_after_removal: false,
            library_seed: 7,
            models_per_split: 24,
        }
    }

    /// 5 objects at 64×64.
    pub fn desk() -> BinEnvConfig {
        BinEnvConfig {
            object_count: 5,
            image_size: 64,
            normal_radius: 0.012,
            ..BinEnvConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_count == 0 || self.object_count > 30 {
            return Err(config_err!("object_count {} outside [1, 30]", self.object_count));
        }
        if !matches!(self.basket, Workspace::Basket { .. }) {
            return Err(config_err!("the picking workspace must be a basket"));
        }
        if self.image_size < 8 {
            return Err(config_err!("image_size must be at least 8"));
        }
        if !(self.camera_height > self.basket.max_stack_height()) {
            return Err(config_err!("camera must sit above the tallest possible stack"));
        }
        if !(self.normal_radius > 0.0) || !(self.depth_noise_std >= 0.0) {
            return Err(config_err!(
                "normal_radius must be positive and depth noise non-negative"
            ));
        }
        if self.models_per_split == 0 {
            return Err(config_err!("models_per_split must be positive"));
        }
        self.pad.validate()?;
        self.camera_view().map(|_| ())
    }

    pub fn camera_view(&self) -> Result<CameraView> {
        let k = CameraIntrinsics::from_fov(self.image_size, self.image_size, self.fov_y_deg)?;
        let eye = Vec3::new(0.0, 0.0, self.basket.floor_z() + self.camera_height);
        let pose = RigidTransform::look_at(eye, Vec3::new(0.0, 0.0, self.basket.floor_z()), Vec3::y())?;
        Ok(CameraView::new(k, pose))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    AllPicked,
    StepBudget,
    Unsafe,
}

/// One executed pick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickOutcome {
    pub step: usize,
    pub action: [i32; 2],
    pub kind: PickKind,
    pub picked_id: Option<u32>,
    pub reward: f64,
    pub done: bool,
    pub remaining: usize,
    /// Contact point and clipped normal; absent for invalid targets.
    pub point: Option<[f64; 3]>,
    pub normal: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub initial_count: usize,
    pub steps: Vec<PickOutcome>,
    pub termination: Option<TerminationReason>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Start { seed: u64, initial_count: usize },
    Step(PickOutcome),
    End { termination: TerminationReason },
}

impl EpisodeLog {
    pub fn successes(&self) -> usize {
        self.steps.iter().filter(|s| s.kind == PickKind::Success).count()
    }

    pub fn attempts(&self) -> usize {
        self.steps.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn completed(&self) -> bool {
        self.termination == Some(TerminationReason::AllPicked)
    }

    /// One JSON object per line: a start record, one record per step and an end record.
    pub fn to_jsonl(&self) -> Result<String> {
        let enc = |l: &LogLine| serde_json::to_string(l).map_err(|e| Error::Format(e.to_string()));
        let mut out = enc(&LogLine::Start {
            seed: self.seed,
            initial_count: self.initial_count,
        })?;
        out.push('\n');
        for s in &self.steps {
            out.push_str(&enc(&LogLine::Step(s.clone()))?);
            out.push('\n');
        }
        if let Some(t) = self.termination {
            out.push_str(&enc(&LogLine::End { termination: t })?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses every episode in a JSON-lines stream.
    pub fn parse_jsonl(text: &str) -> Result<Vec<EpisodeLog>> {
        let mut out: Vec<EpisodeLog> = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: LogLine = serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            match rec {
                LogLine::Start { seed, initial_count } => out.push(EpisodeLog {
                    seed,
                    initial_count,
                    steps: Vec::new(),
                    termination: None,
                }),
                LogLine::Step(s) => out
                    .last_mut()
                    .ok_or_else(|| Error::Format(format!("line {}: step before start", i + 1)))?
                    .steps
                    .push(s),
                LogLine::End { termination } => {
                    let ep = out
                        .last_mut()
                        .ok_or_else(|| Error::Format(format!("line {}: end before start", i + 1)))?;
                    ep.termination = Some(termination);
                }
            }
        }
        Ok(out)
    }
}

/// Mutable episode state.
#[derive(Debug, Clone)]
pub struct BinState {
    pub scene: Scene,
    pub initial_count: usize,
    pub remaining_ids: BTreeSet<u32>,
    pub step_count: usize,
    pub log: EpisodeLog,
}

impl BinState {
    pub fn done(&self) -> bool {
        self.log.termination.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    pub outcome: PickOutcome,
    pub termination: Option<TerminationReason>,
}

/// One environment instance; single-threaded, cheap to clone.
#[derive(Debug, Clone)]
pub struct BinEnv {
    config: BinEnvConfig,
    library: ObjectLibrary,
    view: CameraView,
    state: Option<BinState>,
    rays: Option<RayScene>,
    observation: Option<RGBDFrame>,
    noise_rng: ChaCha8Rng,
}

impl BinEnv {
    pub fn new(config: BinEnvConfig) -> Result<BinEnv> {
        config.validate()?;
        let library = ObjectLibrary::procedural(config.library_seed, config.models_per_split);
        Self::with_library(config, library)
    }

    /// Uses a caller-provided object library (shared across workers).
    pub fn with_library(config: BinEnvConfig, library: ObjectLibrary) -> Result<BinEnv> {
        config.validate()?;
        let view = config.camera_view()?;
        Ok(BinEnv {
            config,
            library,
            view,
            state: None,
            rays: None,
            observation: None,
            noise_rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &BinEnvConfig {
        &self.config
    }

    pub fn view(&self) -> &CameraView {
        &self.view
    }

    pub fn state(&self) -> Option<&BinState> {
        self.state.as_ref()
    }

    pub fn rays(&self) -> Option<&RayScene> {
        self.rays.as_ref()
    }

    /// Drops `object_count` objects into the basket with `seed` and renders the first observation.
    pub fn reset(&mut self, seed: u64) -> Result<&RGBDFrame> {
        let spec = SceneSpec {
            object_count: self.config.object_count,
            rng_seed: seed,
            split: self.config.split,
            workspace: self.config.basket.clone(),
        };
        let scene = build_scene(&spec, &self.library)?;
        let ids: BTreeSet<u32> = scene.instance_ids().into_iter().collect();
        self.noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6e6f_6973_65));
        self.state = Some(BinState {
            initial_count: ids.len(),
            remaining_ids: ids,
            step_count: 0,
            log: EpisodeLog {
                seed,
                initial_count: scene.objects.len(),
                steps: Vec::new(),
                termination: None,
            },
            scene,
        });
        self.refresh_observation();
        Ok(self.observation.as_ref().expect("rendered above"))
    }

    fn refresh_observation(&mut self) {
        let state = self.state.as_ref().expect("episode in progress");
        let rays = RayScene::build(&state.scene);
        let mut frame = render_with(&state.scene, &rays, &self.view);
        if self.config.depth_noise_std > 0.0 {
            let normal = Normal::new(0.0, self.config.depth_noise_std).expect("validated std");
            let view = frame.view;
            let depth = frame.depth.map(|d| {
                if *d > 0.0 {
                    (d + normal.sample(&mut self.noise_rng)).max(1e-4)
                } else {
                    0.0
                }
            });
            frame = RGBDFrame::from_buffers(view, frame.rgb, depth, frame.instance_mask);
        }
        self.rays = Some(rays);
        self.observation = Some(frame);
    }

    pub fn observation(&self) -> Option<&RGBDFrame> {
        self.observation.as_ref()
    }

    /// Pixels whose observed point lies inside the basket interior with valid depth.
    pub fn action_mask(&self) -> Result<Grid<bool>> {
        let frame = self
            .observation
            .as_ref()
            .ok_or_else(|| Error::Contract("reset before querying the action mask".into()))?;
        Ok(action_mask(frame, &self.config.basket))
    }

    /// Executes one pick.
    pub fn step(&mut self, action: Pixel) -> Result<StepResult> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Contract("step before reset".into()))?;
        if state.done() {
            return Err(Error::Contract("step on a finished episode".into()));
        }
        let frame = self
            .observation
            .as_ref()
            .expect("observation exists while an episode runs");
        let resolved = resolve_action(frame, action, self.config.normal_radius, self.config.pad.max_tilt_deg)?;
        let rays = self.rays.as_ref().expect("ray scene exists while an episode runs");
        let (contact, point, normal) = match resolved {
            ResolvedAction::InvalidTarget => (
                ContactResult {
                    kind: PickKind::Unreachable,
                    picked_id: None,
                    sensor_ids: [0; SENSOR_COUNT],
                },
                None,
                None,
            ),
            ResolvedAction::Target { point, normal, .. } => {
                let p = Vec3::from(point);
                let n = Vec3::from(normal);
                (
                    attempt_pick(&p, &n, rays, &self.config.basket, &self.config.pad),
                    Some(point),
                    Some(normal),
                )
            }
        };

        let state = self.state.as_mut().expect("checked above");
        state.step_count += 1;
        let mut reward = if contact.kind == PickKind::Success {
            REWARD_SUCCESS
        } else {
            REWARD_FAILURE
        };
        let mut removed = false;
        if let Some(id) = contact.picked_id {
            state.scene.remove(id);
            state.remaining_ids.remove(&id);
            removed = true;
        }
        let termination = if state.remaining_ids.is_empty() {
            Some(TerminationReason::AllPicked)
        } else if contact.kind.is_unsafe() {
            Some(TerminationReason::Unsafe)
        } else if state.step_count >= 2 * state.initial_count {
            Some(TerminationReason::StepBudget)
        } else {
            None
        };
        if matches!(
            termination,
            Some(TerminationReason::Unsafe | TerminationReason::StepBudget)
        ) {
            reward = REWARD_TERMINAL;
        }
        let outcome = PickOutcome {
            step: state.step_count,
            action: [action.x, action.y],
            kind: contact.kind,
            picked_id: contact.picked_id,
            reward,
            done: termination.is_some(),
            remaining: state.remaining_ids.len(),
            point,
            normal,
        };
        state.log.steps.push(outcome.clone());
        state.log.termination = termination;
        if removed {
            if self.config.settle_after_removal {
                settle_in_place(&mut state.scene);
            }
            self.refresh_observation();
        }
        Ok(StepResult {
            reward,
            done: termination.is_some(),
            outcome,
            termination,
        })
    }

    pub fn episode_log(&self) -> Option<&EpisodeLog> {
        self.state.as_ref().map(|s| &s.log)
    }
}

/// Observed pixels inside the basket interior with valid depth.
pub fn action_mask(frame: &RGBDFrame, basket: &Workspace) -> Grid<bool> {
    let [ex, ey] = basket.placement_extent();
    Grid::from_fn(frame.width(), frame.height(), |x, y| {
        let d = *frame.depth.get(x, y);
        if !(d > 0.0) {
            return false;
        }
        let p = frame.world_coords.get(x, y);
        p.x.abs() < ex / 2.0 && p.y.abs() < ey / 2.0
    })
}

/// Lowers every object, bottom first, until it rests on the floor or an object below.
fn settle_in_place(scene: &mut Scene) {
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    let bottoms: Vec<f64> = scene.objects.iter().map(|o| o.world_mesh().aabb().min.z).collect();
    order.sort_by(|a, b| bottoms[*a].total_cmp(&bottoms[*b]));
    let mut placed: Vec<Obstacle> = Vec::new();
    for i in order {
        let obj = &mut scene.objects[i];
        let current = Obstacle::new(obj.world_mesh());
        let shift = drop_shift(&current, scene.workspace.floor_z(), &placed);
        if shift < 0.0 {
            let t = *obj.pose.translation() + Vec3::new(0.0, 0.0, shift);
            obj.pose = RigidTransform::new(*obj.pose.rotation(), t).expect("rotation unchanged");
        }
        placed.push(Obstacle::new(obj.world_mesh()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic_and_walls_carry_mask_zero() {
        let mut a = BinEnv::new(BinEnvConfig::desk()).unwrap();
        let mut b = BinEnv::new(BinEnvConfig::desk()).unwrap();
        let fa = a.reset(42).unwrap().clone();
        let fb = b.reset(42).unwrap().clone();
        assert_eq!(fa, fb);
        assert_eq!(a.state().unwrap().initial_count, 5);
        // pixels whose point lies on a wall top
        let mut wall_pixels = 0;
        for y in 0..fa.height() {
            for x in 0..fa.width() {
                let p = fa.world_coords.get(x, y);
                if (p.z - 0.10).abs() < 1e-9 {
                    wall_pixels += 1;
                    assert_eq!(*fa.instance_mask.get(x, y), 0);
                    assert!(fa.depth.get(x, y).is_finite() && *fa.depth.get(x, y) > 0.0);
                }
            }
        }
        assert!(wall_pixels > 0);
    }

    #[test]
    fn ten_object_scene_has_ten_objects() {
        let mut env = BinEnv::new(BinEnvConfig {
            image_size: 32,
            ..BinEnvConfig::paper()
        })
        .unwrap();
        env.reset(3).unwrap();
        assert_eq!(env.state().unwrap().scene.objects.len(), 10);
    }

    #[test]
    fn stepping_before_reset_or_after_done_is_a_contract_error() {
        let mut env = BinEnv::new(BinEnvConfig::desk()).unwrap();
        assert_eq!(env.step(Pixel::new(0, 0)).unwrap_err().kind(), "contract");
        env.reset(1).unwrap();
        // corner pixels look at the table outside the basket: unreachable ends the episode
        let r = env.step(Pixel::new(0, 0)).unwrap();
        assert_eq!(r.outcome.kind, PickKind::Unreachable);
        assert!(r.done);
        assert_eq!(r.reward, REWARD_TERMINAL);
        assert_eq!(r.termination, Some(TerminationReason::Unsafe));
        assert_eq!(env.step(Pixel::new(1, 1)).unwrap_err().kind(), "contract");
        assert!(env.step(Pixel::new(99, 0)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut env = BinEnv::new(BinEnvConfig::desk()).unwrap();
        env.reset(5).unwrap();
        env.step(Pixel::new(32, 32)).unwrap();
        let log = env.episode_log().unwrap().clone();
        let text = log.to_jsonl().unwrap();
        assert_eq!(
            text.lines().count(),
            log.steps.len() + 1 + usize::from(log.termination.is_some())
        );
        let back = EpisodeLog::parse_jsonl(&(text.clone() + &text)).unwrap();
        assert_eq!(back, vec![log.clone(), log]);
    }

    #[test]
    fn settle_refresh_lowers_a_floating_object() {
        let mut env = BinEnv::new(BinEnvConfig {
            object_count: 1,
            ..BinEnvConfig::desk()
        })
        .unwrap();
        env.reset(9).unwrap();
        let mut scene = env.state().unwrap().scene.clone();
        let before: Vec<f64> = scene.objects.iter().map(|o| o.pose.translation().z).collect();
        let obj = &mut scene.objects[0];
        obj.pose =
            RigidTransform::new(*obj.pose.rotation(), obj.pose.translation() + Vec3::new(0.0, 0.0, 0.05)).unwrap();
        settle_in_place(&mut scene);
        assert!((scene.objects[0].pose.translation().z - before[0]).abs() < 1e-6);
    }
}
