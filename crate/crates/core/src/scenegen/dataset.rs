//! Multi-view descriptor dataset: generation, on-disk layout and loading.
//!
//! ```text
//! <root>/manifest.json
//! <root>/scene_000/view_000.rgb.png
//! <root>/scene_000/view_000.depth.u16png   16-bit millimeters, 0 = invalid
//! <root>/scene_000/view_000.mask.u16png    instance ids
//! <root>/scene_000/view_000.cam.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_scene, derive_seed, randomize_textures, ObjectLibrary, Scene, SceneSpec, Split, Workspace};
use crate::error::{config_err, Error, Result};
use crate::geometry::{CameraIntrinsics, CameraView, RigidTransform, Vec3};
use crate::imageio;
use crate::render::{render_with, RGBDFrame, RayScene};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Spherical shell of camera positions around the workspace centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraShell {
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    /// Look-at point is jittered uniformly by up to this much in x and y.
    pub look_at_jitter: f64,
}

impl Default for CameraShell {
    fn default() -> Self {
        CameraShell {
            min_radius: 0.5,
            max_radius: 0.9,
            min_elevation_deg: 30.0,
            max_elevation_deg: 90.0,
            look_at_jitter: 0.03,
        }
    }
}

impl CameraShell {
    /// Samples a camera-to-world pose looking at the jittered origin.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(RigidTransform, ViewRecord)> {
        let radius = rng.random_range(self.min_radius..=self.max_radius);
        let elevation = rng.random_range(self.min_elevation_deg..=self.max_elevation_deg);
        let azimuth = rng.random_range(0.0..360.0);
        let j = self.look_at_jitter;
        let target = Vec3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), 0.0);
        let record = ViewRecord {
            radius,
            elevation_deg: elevation,
            azimuth_deg: azimuth,
            look_at: [target.x, target.y, target.z],
        };
        Ok((record.pose()?, record))
    }

    pub fn contains(&self, record: &ViewRecord) -> bool {
        let tol = 1e-9;
        record.radius >= self.min_radius - tol
            && record.radius <= self.max_radius + tol
            && record.elevation_deg >= self.min_elevation_deg - tol
            && record.elevation_deg <= self.max_elevation_deg + tol
            && record.look_at[0].abs() <= self.look_at_jitter + tol
            && record.look_at[1].abs() <= self.look_at_jitter + tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    /// Fresh textures for every view.
    PerView,
    /// One texture assignment per scene.
    PerScene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub split: Split,
    pub scene_count: usize,
    /// The first this-many scenes contain a single object.
    pub single_object_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub views_per_scene: usize,
    pub width: u32,
    pub height: u32,
    pub fov_y_deg: f64,
    pub camera: CameraShell,
    pub texture_mode: TextureMode,
    pub workspace: Workspace,
    pub library_seed: u64,
    pub models_per_split: usize,
}

impl DatasetConfig {
    /// 170 scenes (20 with one object), 80 views each at 256×256.
    pub fn paper() -> DatasetConfig {
        DatasetConfig {
            seed: 0,
            split: Split::Train,
            scene_count: 170,
            single_object_scenes: 20,
            min_objects: 2,
            max_objects: 15,
            views_per_scene: 80,
            width: 256,
            height: 256,
            fov_y_deg: 45.0,
            camera: CameraShell::default(),
            texture_mode: TextureMode::PerView,
            workspace: Workspace::table([0.3, 0.3]),
            library_seed: 7,
            models_per_split: 24,
        }
    }

    /// 20 scenes × 16 views at 128×128.
    pub fn desk() -> DatasetConfig {
        DatasetConfig {
            scene_count: 20,
            single_object_scenes: 2,
            views_per_scene: 16,
            width: 128,
            height: 128,
            ..DatasetConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_count == 0 || self.views_per_scene == 0 {
            return Err(config_err!("dataset needs at least one scene and one view"));
        }
        if self.single_object_scenes > self.scene_count {
            return Err(config_err!("more single-object scenes than scenes"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 15 {
            return Err(config_err!(
                "object count range [{}, {}] must lie in [1, 15]",
                self.min_objects,
                self.max_objects
            ));
        }
        let c = &self.camera;
        if !(c.min_radius > 0.0 && c.min_radius <= c.max_radius)
            || !(0.0 < c.min_elevation_deg && c.min_elevation_deg <= c.max_elevation_deg && c.max_elevation_deg <= 90.0)
            || c.look_at_jitter < 0.0
        {
            return Err(config_err!("invalid camera shell {c:?}"));
        }
        CameraIntrinsics::from_fov(self.width, self.height, self.fov_y_deg)?;
        if self.models_per_split == 0 {
            return Err(config_err!("models_per_split must be positive"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::from_fov(self.width, self.height, self.fov_y_deg)
    }

    pub fn library(&self) -> ObjectLibrary {
        ObjectLibrary::procedural(self.library_seed, self.models_per_split)
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        let seed = derive_seed(self.seed, index as u64);
        let object_count = if index < self.single_object_scenes {
            1
        } else {
            ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)).random_range(self.min_objects..=self.max_objects)
        };
        SceneSpec {
            object_count,
            rng_seed: seed,
            split: self.split,
            workspace: self.workspace.clone(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub radius: f64,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub look_at: [f64; 3],
}

impl ViewRecord {
    pub fn pose(&self) -> Result<RigidTransform> {
        let (el, az) = (self.elevation_deg.to_radians(), self.azimuth_deg.to_radians());
        let target = Vec3::from(self.look_at);
        let eye = target + self.radius * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        // image "up": world z projected off the viewing axis, well defined at the zenith
        let up = Vec3::new(-el.sin() * az.cos(), -el.sin() * az.sin(), el.cos());
        RigidTransform::look_at(eye, target, up)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub requested_objects: usize,
    pub instance_ids: Vec<u32>,
    pub placement_shortfall: bool,
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub fingerprint: String,
    pub scenes: Vec<SceneRecord>,
    /// Mean and standard deviation of valid depth (meters) over all frames.
    pub depth_mean: f64,
    pub depth_std: f64,
}

fn scene_dir(root: &Path, scene: usize) -> PathBuf {
    root.join(format!("scene_{scene:03}"))
}

fn view_stem(root: &Path, scene: usize, view: usize) -> PathBuf {
    scene_dir(root, scene).join(format!("view_{view:03}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Renders one view of `scene`; textures follow `mode`.
pub(crate) fn render_view(
    scene: &Scene,
    rays: &RayScene,
    intrinsics: CameraIntrinsics,
    shell: &CameraShell,
    mode: TextureMode,
    view_seed: u64,
) -> Result<(RGBDFrame, ViewRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed);
    let (pose, record) = shell.sample(&mut rng)?;
    let view = CameraView::new(intrinsics, pose);
    let frame = match mode {
        TextureMode::PerView => render_with(&randomize_textures(scene, &mut rng), rays, &view),
        TextureMode::PerScene => render_with(scene, rays, &view),
    };
    Ok((frame, record))
}

fn write_frame(stem: &Path, frame: &RGBDFrame) -> Result<()> {
    imageio::write_rgb(&with_suffix(stem, ".rgb.png"), &frame.rgb)?;
    let depth_mm = frame
        .depth
        .map(|&d| (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16);
    imageio::write_u16(&with_suffix(stem, ".depth.u16png"), &depth_mm)?;
    let mask = frame.instance_mask.map(|&m| m as u16);
    imageio::write_u16(&with_suffix(stem, ".mask.u16png"), &mask)?;
    let cam_path = with_suffix(stem, ".cam.json");
    let json = serde_json::to_string_pretty(&frame.view).expect("camera serializes");
    fs::write(&cam_path, json).map_err(|e| Error::io(&cam_path, e))
}

/// Generates the dataset under `root`. The manifest is written last, atomically; on
/// failure no manifest is left behind.
pub fn generate_descriptor_dataset(config: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let tmp_path = root.join("manifest.json.partial");
    let result = write_dataset(config, root, &tmp_path, &manifest_path);
    if result.is_err() {
        let _ = fs::remove_file(&tmp_path);
    }
    result
}

fn write_dataset(
    config: &DatasetConfig,
    root: &Path,
    tmp_path: &Path,
    manifest_path: &Path,
) -> Result<DatasetManifest> {
    let library = config.library();
    let intrinsics = config.intrinsics()?;
    let (mut sum, mut sum_sq, mut count) = (0.0f64, 0.0f64, 0u64);
    let mut scenes = Vec::with_capacity(config.scene_count);
    for index in 0..config.scene_count {
        let spec = config.scene_spec(index);
        let scene = build_scene(&spec, &library)?;
        let rays = RayScene::build(&scene);
        let dir = scene_dir(root, index);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut views = Vec::with_capacity(config.views_per_scene);
        for v in 0..config.views_per_scene {
            let seed = derive_seed(spec.rng_seed, v as u64);
            let (frame, record) = render_view(&scene, &rays, intrinsics, &config.camera, config.texture_mode, seed)?;
            for &d in frame.depth.as_slice() {
                if d > 0.0 {
                    // statistics of the stored (millimeter-quantized) depth
                    let q = (d * 1000.0).round() / 1000.0;
                    sum += q;
                    sum_sq += q * q;
                    count += 1;
                }
            }
            write_frame(&view_stem(root, index, v), &frame)?;
            views.push(record);
        }
        log::info!("scene {index}: {} objects, {} views", scene.objects.len(), views.len());
        scenes.push(SceneRecord {
            index,
            seed: spec.rng_seed,
            requested_objects: spec.object_count,
            instance_ids: scene.instance_ids(),
            placement_shortfall: scene.placement_shortfall,
            views,
        });
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    let var = if count > 0 {
        (sum_sq / count as f64 - mean * mean).max(0.0)
    } else {
        0.0
    };
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        config: config.clone(),
        fingerprint: config.fingerprint(),
        scenes,
        depth_mean: mean,
        depth_std: var.sqrt().max(1e-6),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(tmp_path, json).map_err(|e| Error::io(tmp_path, e))?;
    fs::rename(tmp_path, manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

/// A generated dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// sha256 of the manifest file bytes.
    pub manifest_hash: String,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "dataset schema version {} (expected {DATASET_SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest_hash: sha256_hex(&bytes),
            manifest,
        })
    }

    pub fn scene_count(&self) -> usize {
        self.manifest.scenes.len()
    }

    pub fn view_count(&self, scene: usize) -> usize {
        self.manifest.scenes[scene].views.len()
    }

    pub fn load_frame(&self, scene: usize, view: usize) -> Result<RGBDFrame> {
        let stem = view_stem(&self.root, scene, view);
        let rgb = imageio::read_rgb(&with_suffix(&stem, ".rgb.png"))?;
        let depth_mm = imageio::read_u16(&with_suffix(&stem, ".depth.u16png"))?;
        let mask = imageio::read_u16(&with_suffix(&stem, ".mask.u16png"))?;
        let cam_path = with_suffix(&stem, ".cam.json");
        let cam = fs::read(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
        let view: CameraView =
            serde_json::from_slice(&cam).map_err(|e| Error::Format(format!("{}: {e}", cam_path.display())))?;
        let (w, h) = (view.intrinsics.width as usize, view.intrinsics.height as usize);
        if [rgb.width(), depth_mm.width(), mask.width()] != [w; 3]
            || [rgb.height(), depth_mm.height(), mask.height()] != [h; 3]
        {
            return Err(Error::Format(format!(
                "{}: buffer sizes disagree with camera",
                stem.display()
            )));
        }
        let depth = depth_mm.map(|&mm| mm as f64 / 1000.0);
        Ok(RGBDFrame::from_buffers(view, rgb, depth, mask.map(|&m| m as u32)))
    }
}

/// Fixed, renderable copy of a scene for tests and tools that bypass the disk.
pub fn render_dataset_view(config: &DatasetConfig, scene_index: usize, view: usize) -> Result<(Scene, RGBDFrame)> {
    let spec = config.scene_spec(scene_index);
    let scene = build_scene(&spec, &config.library())?;
    let rays = RayScene::build(&scene);
    let (frame, _) = render_view(
        &scene,
        &rays,
        config.intrinsics()?,
        &config.camera,
        config.texture_mode,
        derive_seed(spec.rng_seed, view as u64),
    )?;
    Ok((scene, frame))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            scene_count: 2,
            single_object_scenes: 1,
            min_objects: 2,
            max_objects: 4,
            views_per_scene: 2,
            width: 32,
            height: 24,
            ..DatasetConfig::desk()
        }
    }

    #[test]
    fn pose_looks_at_target_from_shell() {
        let shell = CameraShell::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (pose, rec) = shell.sample(&mut rng).unwrap();
            assert!(shell.contains(&rec));
            let target = Vec3::from(rec.look_at);
            let to_target = (target - pose.translation()).normalize();
            let forward = pose.rotation().column(2).into_owned();
            assert!((to_target - forward).norm() < 1e-9);
            assert!(((target - pose.translation()).norm() - rec.radius).abs() < 1e-9);
        }
    }

    #[test]
    fn written_dataset_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let manifest = generate_descriptor_dataset(&cfg, dir.path()).unwrap();
        assert!(!dir.path().join("manifest.json.partial").exists());
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        assert_eq!(manifest.scenes[0].instance_ids.len(), 1);
        for s in 0..2 {
            for v in 0..2 {
                let frame = ds.load_frame(s, v).unwrap();
                let (_, direct) = render_dataset_view(&cfg, s, v).unwrap();
                assert_eq!(frame.rgb, direct.rgb);
                assert_eq!(frame.instance_mask, direct.instance_mask);
                for (a, b) in frame.depth.as_slice().iter().zip(direct.depth.as_slice()) {
                    assert!((a - b).abs() <= 0.0005 + 1e-12);
                }
            }
        }
        assert!(manifest.depth_std > 0.0 && manifest.depth_mean > 0.3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny();
        cfg.max_objects = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.single_object_scenes = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn io_failure_leaves_no_manifest() {
        let dir = tempfile::tempdir().unwrap();
        // a regular file where the first scene directory should go
        fs::write(dir.path().join("scene_000"), b"x").unwrap();
        assert!(generate_descriptor_dataset(&tiny(), dir.path()).is_err());
        assert!(!dir.path().join("manifest.json").exists());
        assert!(!dir.path().join("manifest.json.partial").exists());
    }
}
