use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{contrastive_loss, contrastive_loss_with_grad, NonMatchNormalization};
use super::{DescriptorMap, DescriptorNet};
use crate::correspondence::{sample_training_pairs, FrameId, PairSamplingConfig};
use crate::error::{config_err, Error, Result};
use crate::nn::{Adam, AdamConfig, Grads, Graph};
use crate::render::RGBDFrame;
use crate::scenegen::Dataset;

const LR_NOTE: &str = "default Adam lr is 3e-4 with x0.9 decay per 5k steps; lr 1e-1 diverges with Adam and remains available via adam.lr";
/// Consecutive unusable view pairs tolerated before training aborts.
const MAX_CONSECUTIVE_SKIPS: usize = 1000;
const FRAME_CACHE_CAPACITY: usize = 1024;

/// Which views of each scene are used for training; the rest are held out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViewSelection {
    All,
    /// The last `count` views of every scene are reserved for evaluation.
    HoldOutLast {
        count: usize,
    },
}

impl ViewSelection {
    pub fn train_views(&self, views: usize) -> std::ops::Range<usize> {
        match *self {
            ViewSelection::All => 0..views,
            ViewSelection::HoldOutLast { count } => 0..views.saturating_sub(count),
        }
    }

    pub fn held_out_views(&self, views: usize) -> std::ops::Range<usize> {
        match *self {
            ViewSelection::All => 0..0,
            ViewSelection::HoldOutLast { count } => views.saturating_sub(count)..views,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorTrainConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Multiplicative learning-rate decay applied every `lr_decay_every` steps.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub pairs: PairSamplingConfig,
    pub normalization: NonMatchNormalization,
    pub views: ViewSelection,
    pub seed: u64,
    pub log_every: usize,
    /// Intermediate checkpoint interval; `None` writes only the final checkpoint.
    pub checkpoint_every: Option<usize>,
    pub max_grad_norm: Option<f32>,
}

impl DescriptorTrainConfig {
    pub fn paper() -> DescriptorTrainConfig {
        DescriptorTrainConfig {
            iterations: 120_000,
            adam: AdamConfig {
                lr: 3e-4,
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
            lr_decay: 0.9,
            lr_decay_every: 5000,
            pairs: PairSamplingConfig::default(),
            normalization: NonMatchNormalization::PerClass,
            views: ViewSelection::All,
            seed: 0,
            log_every: 100,
            checkpoint_every: Some(10_000),
            max_grad_norm: None,
        }
    }

    pub fn desk() -> DescriptorTrainConfig {
        DescriptorTrainConfig {
            iterations: 5000,
            views: ViewSelection::HoldOutLast { count: 4 },
            checkpoint_every: Some(1000),
            ..DescriptorTrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(config_err!("iterations must be positive"));
        }
        if !(self.adam.lr > 0.0) || self.adam.weight_decay < 0.0 {
            return Err(config_err!(
                "learning rate must be positive and weight decay non-negative"
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return Err(config_err!("lr_decay must be in (0, 1] with a positive interval"));
        }
        if self.pairs.n_match == 0 {
            return Err(config_err!("pairs.n_match must be positive"));
        }
        if self.log_every == 0 || self.checkpoint_every == Some(0) {
            return Err(config_err!("log and checkpoint intervals must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect at zero-based step `step`.
    pub fn lr_at(&self, step: usize) -> f32 {
        (self.adam.lr as f64 * self.lr_decay.powi((step / self.lr_decay_every) as i32)) as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub lr: f32,
    pub loss: f64,
    pub matched: f64,
    pub nonmatched: f64,
    pub scene: usize,
    pub view_a: usize,
    pub view_b: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogEntry>,
    /// View pairs discarded because no match could be sampled.
    pub skipped_pairs: usize,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    /// Mean loss over the first and last `window` steps.
    pub fn loss_window_means(&self, window: usize) -> Option<(f64, f64)> {
        if self.log.len() < window || window == 0 {
            return None;
        }
        let mean = |s: &[TrainLogEntry]| s.iter().map(|e| e.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.log[..window]), mean(&self.log[self.log.len() - window..])))
    }
}

/// Loads frames on demand and keeps a bounded number in memory.
struct FrameCache<'d> {
    dataset: &'d Dataset,
    frames: HashMap<(usize, usize), Arc<RGBDFrame>>,
}

impl<'d> FrameCache<'d> {
    fn get(&mut self, scene: usize, view: usize) -> Result<Arc<RGBDFrame>> {
        if let Some(f) = self.frames.get(&(scene, view)) {
            return Ok(f.clone());
        }
        if self.frames.len() >= FRAME_CACHE_CAPACITY {
            self.frames.clear();
        }
        let f = Arc::new(self.dataset.load_frame(scene, view)?);
        self.frames.insert((scene, view), f.clone());
        Ok(f)
    }
}

fn checkpoint_metadata(
    dataset: &Dataset,
    config: &DescriptorTrainConfig,
    step: usize,
) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    meta.insert("dataset_manifest_sha256".into(), dataset.manifest_hash.clone());
    meta.insert(
        "training".into(),
        serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?,
    );
    meta.insert("step".into(), step.to_string());
    meta.insert("lr_note".into(), LR_NOTE.into());
    Ok(meta)
}

/// Trains `net` in place. Checkpoints go to `out_dir` when given; on a data error the
/// current weights are written to `descriptor.aborted.safetensors` before returning.
pub fn train_descriptor(
    dataset: &Dataset,
    net: &mut DescriptorNet,
    config: &DescriptorTrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if (net.scaling.depth_mean, net.scaling.depth_std) != (dataset.manifest.depth_mean, dataset.manifest.depth_std) {
        log::warn!("network depth scaling differs from the dataset manifest");
    }
    let scenes = dataset.scene_count();
    if scenes == 0 {
        return Err(config_err!("dataset has no scenes"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, &net.store);
    let mut grads = Grads::zeros_like(&net.store);
    let mut cache = FrameCache {
        dataset,
        frames: HashMap::new(),
    };
    let mut outcome = TrainOutcome {
        log: Vec::with_capacity(config.iterations),
        skipped_pairs: 0,
        final_checkpoint: None,
    };
    let mut consecutive_skips = 0;
    let mut step = 0;
    while step < config.iterations {
        let result = train_step(net, &mut cache, config, &mut rng, &mut grads, &mut adam, step);
        let entry = match result {
            Ok(Some(entry)) => entry,
            Ok(None) => {
                outcome.skipped_pairs += 1;
                consecutive_skips += 1;
                if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    let err = Error::Domain(format!("{consecutive_skips} consecutive view pairs had no matches"));
                    return Err(abort(net, dataset, config, step, out_dir, err));
                }
                continue;
            }
            Err(e) => return Err(abort(net, dataset, config, step, out_dir, e)),
        };
        consecutive_skips = 0;
        if step % config.log_every == 0 || step + 1 == config.iterations {
            log::info!(
                "step {step} lr {:.2e} loss {:.4} (match {:.4}, non-match {:.4})",
                entry.lr,
                entry.loss,
                entry.matched,
                entry.nonmatched
            );
        }
        outcome.log.push(entry);
        step += 1;
        if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
            if step % every == 0 && step < config.iterations {
                let path = dir.join(format!("descriptor_step{step}.safetensors"));
                net.save(&path, &checkpoint_metadata(dataset, config, step)?)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("descriptor.safetensors");
        net.save(&path, &checkpoint_metadata(dataset, config, step)?)?;
        outcome.final_checkpoint = Some(path);
    }
    Ok(outcome)
}

fn abort(
    net: &DescriptorNet,
    dataset: &Dataset,
    config: &DescriptorTrainConfig,
    step: usize,
    out_dir: Option<&Path>,
    err: Error,
) -> Error {
    if let Some(dir) = out_dir {
        let path = dir.join("descriptor.aborted.safetensors");
        match checkpoint_metadata(dataset, config, step).and_then(|m| net.save(&path, &m)) {
            Ok(()) => log::error!("training aborted at step {step}; weights saved to {}", path.display()),
            Err(e) => log::error!("training aborted at step {step}; saving weights failed: {e}"),
        }
    }
    err
}

fn sample_view_pair<R: Rng>(rng: &mut R, dataset: &Dataset, views: ViewSelection) -> Result<(usize, usize, usize)> {
    let scene = rng.random_range(0..dataset.scene_count());
    let range = views.train_views(dataset.view_count(scene));
    if range.len() < 2 {
        return Err(config_err!("scene {scene} has fewer than two training views"));
    }
    let a = rng.random_range(range.clone());
    let mut b = rng.random_range(range.start..range.end - 1);
    if b >= a {
        b += 1;
    }
    Ok((scene, a, b))
}

fn train_step(
    net: &mut DescriptorNet,
    cache: &mut FrameCache,
    config: &DescriptorTrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut Grads,
    adam: &mut Adam,
    step: usize,
) -> Result<Option<TrainLogEntry>> {
    let (scene, view_a, view_b) = sample_view_pair(rng, cache.dataset, config.views)?;
    let frame_a = cache.get(scene, view_a)?;
    let frame_b = cache.get(scene, view_b)?;
    let mut pairs = sample_training_pairs(&frame_a, &frame_b, &config.pairs, rng);
    if pairs.empty || pairs.matches.is_empty() {
        return Ok(None);
    }
    pairs.frame_ids = Some([FrameId { scene, view: view_a }, FrameId { scene, view: view_b }]);

    grads.zero();
    let loss = {
        let mut g = Graph::training(&net.store);
        let xa = g.input(net.prepare_input(&frame_a));
        let xb = g.input(net.prepare_input(&frame_b));
        let fa = net.forward(&mut g, xa)?;
        let fb = net.forward(&mut g, xb)?;
        let map_a = DescriptorMap::from_tensor(g.value(fa.descriptors));
        let map_b = DescriptorMap::from_tensor(g.value(fb.descriptors));
        let (loss, grad) = contrastive_loss_with_grad(&map_a, &map_b, &pairs, net.config.margin, config.normalization)?;
        if !loss.total.is_finite() {
            return Err(Error::Domain(format!("non-finite loss at step {step}")));
        }
        let seeds = vec![
            (fa.descriptors, map_a.to_tensor(&grad.map_a)),
            (fb.descriptors, map_b.to_tensor(&grad.map_b)),
        ];
        g.backward(seeds, grads);
        loss
    };
    if let Some(max) = config.max_grad_norm {
        grads.clip_global_norm(max);
    }
    let lr = config.lr_at(step);
    adam.step_with_lr(&mut net.store, grads, lr);
    Ok(Some(TrainLogEntry {
        step,
        lr,
        loss: loss.total,
        matched: loss.matched,
        nonmatched: loss.nonmatched,
        scene,
        view_a,
        view_b,
    }))
}

/// Mean contrastive loss over fixed view pairs, with pixel pairs drawn from `seed`.
/// Pairs without any match are left out of the mean.
pub fn evaluate_loss(
    net: &DescriptorNet,
    dataset: &Dataset,
    view_pairs: &[(usize, usize, usize)],
    pairs: &PairSamplingConfig,
    normalization: NonMatchNormalization,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut counted = 0usize;
    for &(scene, va, vb) in view_pairs {
        let fa = dataset.load_frame(scene, va)?;
        let fb = dataset.load_frame(scene, vb)?;
        let set = sample_training_pairs(&fa, &fb, pairs, &mut rng);
        if set.matches.is_empty() {
            continue;
        }
        let (ma, _) = net.describe(&fa)?;
        let (mb, _) = net.describe(&fb)?;
        total += contrastive_loss(&ma, &mb, &set, net.config.margin, normalization)?.total;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Domain("no evaluation pair had a match".into()));
    }
    Ok(total / counted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_decays_stepwise() {
        let c = DescriptorTrainConfig::paper();
        assert_eq!(c.lr_at(0), 3e-4);
        assert_eq!(c.lr_at(4999), 3e-4);
        assert!((c.lr_at(5000) - 2.7e-4).abs() < 1e-9);
        assert!((c.lr_at(10_000) - 2.43e-4).abs() < 1e-9);
    }

    #[test]
    fn held_out_views_are_disjoint_from_training_views() {
        let v = ViewSelection::HoldOutLast { count: 4 };
        assert_eq!(v.train_views(16), 0..12);
        assert_eq!(v.held_out_views(16), 12..16);
        assert_eq!(ViewSelection::All.held_out_views(16).len(), 0);
    }

    #[test]
    fn bad_training_configs_are_rejected() {
        let mut c = DescriptorTrainConfig::desk();
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = DescriptorTrainConfig::desk();
        c.lr_decay = 1.5;
        assert!(c.validate().is_err());
        assert!(DescriptorTrainConfig::paper().validate().is_ok());
    }
}
