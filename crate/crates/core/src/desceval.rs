//! Matching-error-distance evaluation of dense descriptors.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{find_correspondence, DEFAULT_TOLERANCE};
use crate::descriptor::{best_match, DescriptorMap, DescriptorNet};
use crate::error::{config_err, Result};
use crate::geometry::Pixel;
use crate::render::RGBDFrame;
use crate::scenegen::{derive_seed, Dataset, Split};

/// Anything that maps a frame to a dense descriptor field.
pub trait DenseDescriptor: Sync {
    fn describe_frame(&self, frame: &RGBDFrame) -> Result<DescriptorMap>;
}

impl DenseDescriptor for DescriptorNet {
    fn describe_frame(&self, frame: &RGBDFrame) -> Result<DescriptorMap> {
        Ok(self.describe(frame)?.0)
    }
}

/// Ground-truth world coordinates used as descriptors; an upper bound on any learned field.
#[derive(Debug, Clone, Copy, Default)]
pub struct WorldCoordOracle;

impl DenseDescriptor for WorldCoordOracle {
    fn describe_frame(&self, frame: &RGBDFrame) -> Result<DescriptorMap> {
        Ok(DescriptorMap::from_world_coords(frame))
    }
}

/// Independent uniform noise per pixel; its best match is a uniformly random pixel.
#[derive(Debug, Clone, Copy)]
pub struct NoiseDescriptor {
    pub dim: usize,
    pub seed: u64,
}

impl DenseDescriptor for NoiseDescriptor {
    fn describe_frame(&self, frame: &RGBDFrame) -> Result<DescriptorMap> {
        let key = frame.view.pose.translation();
        let salt = (key.x.to_bits() ^ key.y.to_bits().rotate_left(21) ^ key.z.to_bits().rotate_left(42)) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, salt));
        let mut m = DescriptorMap::zeros(frame.width(), frame.height(), self.dim);
        m.values.iter_mut().for_each(|v| *v = rng.random::<f64>());
        Ok(m)
    }
}

/// Which views of each scene evaluation pairs are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalViews {
    All,
    HeldOutLast { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingEvalConfig {
    pub n_image_pairs: usize,
    pub n_pixel_pairs: usize,
    pub views: EvalViews,
    pub tolerance: f64,
    /// Draw attempts allowed per requested pixel pair.
    pub retry_factor: usize,
    pub seed: u64,
}

impl Default for MatchingEvalConfig {
    fn default() -> Self {
        MatchingEvalConfig {
            n_image_pairs: 100,
            n_pixel_pairs: 50,
            views: EvalViews::All,
            tolerance: DEFAULT_TOLERANCE,
            retry_factor: 10,
            seed: 0,
        }
    }
}

impl MatchingEvalConfig {
    /// Image and pixel pair counts used for the published reference numbers.
    pub fn paper() -> MatchingEvalConfig {
        MatchingEvalConfig {
            n_image_pairs: 1000,
            n_pixel_pairs: 100,
            ..MatchingEvalConfig::default()
        }
    }

    fn view_range(&self, views: usize) -> std::ops::Range<usize> {
        match self.views {
            EvalViews::All => 0..views,
            EvalViews::HeldOutLast { count } => views.saturating_sub(count)..views,
        }
    }
}

/// One evaluated pixel pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSample {
    pub scene: usize,
    pub view_a: usize,
    pub view_b: usize,
    pub query: [i32; 2],
    pub truth: [i32; 2],
    pub predicted: [i32; 2],
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingEvalResult {
    /// Mean normalized error over all samples.
    pub mean_error: f64,
    pub samples: Vec<MatchSample>,
    pub requested_image_pairs: usize,
    /// Image pairs that contributed at least one sample.
    pub effective_image_pairs: usize,
    pub requested_pixel_pairs: usize,
}

impl MatchingEvalResult {
    pub fn errors(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.error).collect()
    }

    pub fn median_error(&self) -> f64 {
        let mut e = self.errors();
        if e.is_empty() {
            return f64::NAN;
        }
        e.sort_by(f64::total_cmp);
        e[e.len() / 2]
    }
}

pub fn image_diagonal(width: usize, height: usize) -> f64 {
    ((width * width + height * height) as f64).sqrt()
}

/// Object pixels of `frame_a` with a valid correspondence in `frame_b`.
fn sample_object_matches<R: Rng>(
    frame_a: &RGBDFrame,
    frame_b: &RGBDFrame,
    config: &MatchingEvalConfig,
    rng: &mut R,
) -> Result<Vec<(Pixel, Pixel)>> {
    let candidates: Vec<Pixel> = (0..frame_a.height())
        .flat_map(|y| (0..frame_a.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| *frame_a.instance_mask.get(x, y) > 0 && *frame_a.depth.get(x, y) > 0.0)
        .map(|(x, y)| Pixel::new(x as i32, y as i32))
        .collect();
    let mut out = Vec::with_capacity(config.n_pixel_pairs);
    if candidates.is_empty() {
        return Ok(out);
    }
    let attempts = config.n_pixel_pairs * config.retry_factor.max(1);
    for _ in 0..attempts {
        if out.len() == config.n_pixel_pairs {
            break;
        }
        let p = candidates[rng.random_range(0..candidates.len())];
        if let Some(q) = find_correspondence(p, frame_a, frame_b, config.tolerance)? {
            if *frame_b.instance_mask.get(q.x as usize, q.y as usize) > 0 {
                out.push((p, q));
            }
        }
    }
    Ok(out)
}

/// Mean of `|p' - best_match(p)| / diagonal` over ground-truth object matches drawn from
/// random same-scene view pairs.
pub fn matching_error_distance(
    descriptor: &dyn DenseDescriptor,
    dataset: &Dataset,
    config: &MatchingEvalConfig,
) -> Result<MatchingEvalResult> {
    if config.n_image_pairs == 0 || config.n_pixel_pairs == 0 {
        return Err(config_err!("evaluation needs positive image and pixel pair counts"));
    }
    let scenes = dataset.scene_count();
    if scenes == 0 {
        return Err(config_err!("dataset has no scenes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picks = Vec::with_capacity(config.n_image_pairs);
    for _ in 0..config.n_image_pairs {
        let scene = rng.random_range(0..scenes);
        let range = config.view_range(dataset.view_count(scene));
        if range.len() < 2 {
            return Err(config_err!("scene {scene} has fewer than two evaluation views"));
        }
        let a = rng.random_range(range.clone());
        let mut b = rng.random_range(range.start..range.end - 1);
        if b >= a {
            b += 1;
        }
        picks.push((scene, a, b));
    }
    let per_pair: Vec<Result<Vec<MatchSample>>> = picks
        .par_iter()
        .enumerate()
        .map(|(i, &(scene, va, vb))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, i as u64 + 1));
            let fa = dataset.load_frame(scene, va)?;
            let fb = dataset.load_frame(scene, vb)?;
            let matches = sample_object_matches(&fa, &fb, config, &mut rng)?;
            if matches.is_empty() {
                return Ok(Vec::new());
            }
            let ma = descriptor.describe_frame(&fa)?;
            let mb = descriptor.describe_frame(&fb)?;
            let diag = image_diagonal(fb.width(), fb.height());
            matches
                .into_iter()
                .map(|(p, truth)| {
                    let (pred, _) = best_match(&ma, p, &mb)?;
                    Ok(MatchSample {
                        scene,
                        view_a: va,
                        view_b: vb,
                        query: [p.x, p.y],
                        truth: [truth.x, truth.y],
                        predicted: [pred.x, pred.y],
                        error: pred.distance(&truth) / diag,
                    })
                })
                .collect()
        })
        .collect();
    let mut samples = Vec::new();
    let mut effective = 0;
    for r in per_pair {
        let s = r?;
        effective += usize::from(!s.is_empty());
        samples.extend(s);
    }
    if effective < config.n_image_pairs {
        log::warn!(
            "only {effective} of {} image pairs had co-visible object pixels",
            config.n_image_pairs
        );
    }
    let mean_error = if samples.is_empty() {
        f64::NAN
    } else {
        samples.iter().map(|s| s.error).sum::<f64>() / samples.len() as f64
    };
    Ok(MatchingEvalResult {
        mean_error,
        samples,
        requested_image_pairs: config.n_image_pairs,
        effective_image_pairs: effective,
        requested_pixel_pairs: config.n_pixel_pairs,
    })
}

/// Expected normalized distance between two independent uniform pixels, by Monte Carlo.
pub fn random_pixel_baseline(width: usize, height: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diag = image_diagonal(width, height);
    let mut total = 0.0;
    for _ in 0..samples {
        let a = Pixel::new(rng.random_range(0..width as i32), rng.random_range(0..height as i32));
        let b = Pixel::new(rng.random_range(0..width as i32), rng.random_range(0..height as i32));
        total += a.distance(&b) / diag;
    }
    total / samples.max(1) as f64
}

/// Input configurations compared in the sweep, in column order.
pub const SWEEP_CONFIGS: [&str; 5] = ["rgbd_rand", "rgb_rand", "depth", "rgbd", "rgb"];
pub const SWEEP_SPLITS: [Split; 3] = [Split::Train, Split::Test, Split::Novel];

/// One cell of the sweep: a checkpoint evaluated on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config: String,
    pub split: Split,
    /// `None` marks a missing checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub dataset: PathBuf,
}

/// Configuration × split matrix of mean matching errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub configs: Vec<String>,
    pub splits: Vec<Split>,
    /// `cells[config][split]`; `None` where the checkpoint is absent.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config");
        for sp in &self.splits {
            let _ = write!(s, ",{sp}");
        }
        s.push('\n');
        for (c, row) in self.configs.iter().zip(&self.cells) {
            s.push_str(c);
            for cell in row {
                match cell {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6}");
                    }
                    None => s.push_str(",absent"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12}", "config");
        for sp in &self.splits {
            let _ = write!(s, "{:>10}", sp.to_string());
        }
        s.push('\n');
        for (c, row) in self.configs.iter().zip(&self.cells) {
            let _ = write!(s, "{c:<12}");
            for cell in row {
                match cell {
                    Some(v) => {
                        let _ = write!(s, "{v:>10.4}");
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates every entry; configs and splits keep first-appearance order.
pub fn input_config_sweep(entries: &[SweepEntry], config: &MatchingEvalConfig) -> Result<SweepTable> {
    let mut configs: Vec<String> = Vec::new();
    let mut splits: Vec<Split> = Vec::new();
    for e in entries {
        if !configs.contains(&e.config) {
            configs.push(e.config.clone());
        }
        if !splits.contains(&e.split) {
            splits.push(e.split);
        }
    }
    let mut cells = vec![vec![None; splits.len()]; configs.len()];
    for e in entries {
        let Some(path) = &e.checkpoint else { continue };
        if !path.exists() {
            log::warn!("checkpoint {} missing; cell marked absent", path.display());
            continue;
        }
        let (net, _) = DescriptorNet::load(path)?;
        let dataset = Dataset::open(&e.dataset)?;
        let result = matching_error_distance(&net, &dataset, config)?;
        let r = configs.iter().position(|c| c == &e.config).expect("collected above");
        let c = splits.iter().position(|s| *s == e.split).expect("collected above");
        cells[r][c] = Some(result.mean_error);
    }
    Ok(SweepTable { configs, splits, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_baseline_matches_the_closed_form_square_value() {
        // mean distance of two uniform points in a unit square is about 0.5214
        let b = random_pixel_baseline(400, 400, 200_000, 1);
        let expected = 0.521_405 * 400.0 / image_diagonal(400, 400);
        assert!((b - expected).abs() < 0.003, "{b} vs {expected}");
    }

    #[test]
    fn sweep_table_layout() {
        let table = SweepTable {
            configs: SWEEP_CONFIGS.iter().map(|s| s.to_string()).collect(),
            splits: SWEEP_SPLITS.to_vec(),
            cells: vec![vec![Some(0.1), None, Some(0.25)]; 5],
        };
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "config,train,test,novel");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "rgbd_rand,0.100000,absent,0.250000");
        assert_eq!(
            lines.iter().skip(1).map(|l| l.split(',').count() - 1).sum::<usize>(),
            15
        );
        assert!(table.to_table().contains("rgbd_rand"));
    }
}
