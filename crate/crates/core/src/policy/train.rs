//! Parallel actor-critic training of the picking network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::action::{masked_softmax, select_action, surrogate_loss, SelectionMode, SurrogateConfig, SurrogateSample};
use super::{PolicyInput, PolicyNet};
use crate::binsim::{BinEnv, BinEnvConfig, EpisodeLog};
use crate::error::{config_err, Error, Result};
use crate::harness::{PickingMetrics, ARTIFACT_SCHEMA_VERSION};
use crate::nn::{Adam, AdamConfig, Grads, Graph, Tensor};
use crate::scenegen::{derive_seed, ObjectLibrary};

/// Stream offset separating action sampling from scene seeds.
const ACTION_STREAM: u64 = 0x5eed_ac71;

pub const CURVE_CSV_HEADER: &str =
    "episode,completion_rate,avg_picked,success_rate,success_rate_all_runs,mean_return,mean_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTrainConfig {
    pub episodes: usize,
    /// Parallel rollout workers; each plays one episode per round.
    pub workers: usize,
    pub gamma: f64,
    pub adam: AdamConfig,
    pub surrogate: SurrogateConfig,
    /// Passes over each round's transitions.
    pub update_epochs: usize,
    /// Standardizes advantages within each update round.
    pub normalize_advantages: bool,
    pub max_grad_norm: Option<f32>,
    pub seed: u64,
    /// Episodes between learning-curve rows.
    pub curve_every: usize,
    /// Episodes averaged per learning-curve row.
    pub curve_window: usize,
    pub checkpoint_every: Option<usize>,
}

impl PolicyTrainConfig {
    pub fn paper() -> PolicyTrainConfig {
        PolicyTrainConfig {
            episodes: 20_000,
            workers: 4,
            gamma: 0.3,
            adam: AdamConfig {
                lr: 5e-4,
                beta1: 0.9,
                ..AdamConfig::default()
            },
            surrogate: SurrogateConfig::default(),
            update_epochs: 2,
            normalize_advantages: true,
            max_grad_norm: Some(1.0),
            seed: 0,
            curve_every: 100,
            curve_window: 200,
            checkpoint_every: Some(2000),
        }
    }

    pub fn desk() -> PolicyTrainConfig {
        PolicyTrainConfig {
            episodes: 2000,
            curve_every: 50,
            curve_window: 100,
            checkpoint_every: Some(500),
            ..PolicyTrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.workers == 0 || self.update_epochs == 0 {
            return Err(config_err!("episodes, workers and update_epochs must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config_err!("gamma must lie in [0, 1]"));
        }
        if !(self.adam.lr > 0.0) || self.curve_every == 0 || self.curve_window == 0 {
            return Err(config_err!("lr, curve_every and curve_window must be positive"));
        }
        if !(self.surrogate.clip_epsilon > 0.0) {
            return Err(config_err!("clip_epsilon must be positive"));
        }
        Ok(())
    }
}

/// One learning-curve row over the trailing window of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub completion_rate: f64,
    pub avg_picked: f64,
    pub success_rate: Option<f64>,
    pub success_rate_all_runs: f64,
    pub mean_return: f64,
    pub mean_loss: f64,
}

impl CurvePoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
            self.episode,
            self.completion_rate,
            self.avg_picked,
            self.success_rate.map_or(String::new(), |s| format!("{s:.6}")),
            self.success_rate_all_runs,
            self.mean_return,
            self.mean_loss
        )
    }
}

#[derive(Debug, Clone)]
pub struct PolicyTrainOutcome {
    pub logs: Vec<EpisodeLog>,
    pub curve: Vec<CurvePoint>,
    pub crashed_episodes: usize,
    pub final_checkpoint: Option<PathBuf>,
    pub fingerprint: String,
    pub seed: u64,
}

impl PolicyTrainOutcome {
    /// Learning curve CSV led by a `#` line carrying schema version, fingerprint and seed.
    pub fn curve_csv(&self) -> String {
        curve_csv(&self.curve, &self.fingerprint, self.seed)
    }
}

pub fn curve_csv(curve: &[CurvePoint], fingerprint: &str, seed: u64) -> String {
    let mut s = format!(
        "# schema_version={ARTIFACT_SCHEMA_VERSION},fingerprint={fingerprint},seed={seed}\n{CURVE_CSV_HEADER}\n"
    );
    for p in curve {
        s.push_str(&p.csv_row());
        s.push('\n');
    }
    s
}

/// Parses [`curve_csv`] output; `#` lines are skipped.
pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let bad = |line: &str| Error::Format(format!("bad curve row {line:?}"));
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        if line == CURVE_CSV_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(line));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
        out.push(CurvePoint {
            episode: f[0].parse().map_err(|_| bad(line))?,
            completion_rate: num(1)?,
            avg_picked: num(2)?,
            success_rate: if f[3].is_empty() { None } else { Some(num(3)?) },
            success_rate_all_runs: num(4)?,
            mean_return: num(5)?,
            mean_loss: num(6)?,
        });
    }
    Ok(out)
}

/// `G_t = r_t + γ·G_{t+1}` over one episode.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

struct Transition {
    input: PolicyInput,
    mask: Vec<bool>,
    action: usize,
    log_prob: f64,
    value: f64,
    reward: f64,
}

struct Rollout {
    transitions: Vec<Transition>,
    log: EpisodeLog,
}

fn play_episode(net: &PolicyNet, env: &mut BinEnv, env_seed: u64, action_seed: u64) -> Result<Rollout> {
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    env.reset(env_seed)?;
    let mut transitions = Vec::new();
    loop {
        let frame = env
            .observation()
            .ok_or_else(|| Error::Contract("no observation".into()))?;
        let input = net.prepare(frame)?;
        let out = net.evaluate(&input)?;
        let mask = env.action_mask()?;
        let pixel = select_action(&out.logits, &mask, SelectionMode::Sample, &mut rng)?;
        let action = mask.index(pixel.x as usize, pixel.y as usize);
        let p = masked_softmax(out.logits.as_slice(), mask.as_slice())?;
        let step = env.step(pixel)?;
        transitions.push(Transition {
            input,
            mask: mask.into_vec(),
            action,
            log_prob: p[action].ln(),
            value: out.value,
            reward: step.reward,
        });
        if step.done {
            break;
        }
    }
    let log = env
        .episode_log()
        .cloned()
        .ok_or_else(|| Error::Contract("episode without log".into()))?;
    Ok(Rollout { transitions, log })
}

/// Trains `net` in place. Worker failures drop that episode; a round where every worker
/// fails aborts training.
pub fn train_policy(
    net: &mut PolicyNet,
    env_config: &BinEnvConfig,
    config: &PolicyTrainConfig,
    out_dir: Option<&Path>,
) -> Result<PolicyTrainOutcome> {
    config.validate()?;
    env_config.validate()?;
    if env_config.image_size != net.config.observation_size {
        return Err(config_err!(
            "environment renders {} px, policy expects {} px",
            env_config.image_size,
            net.config.observation_size
        ));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let library = ObjectLibrary::procedural(env_config.library_seed, env_config.models_per_split);
    let mut envs = (0..config.workers)
        .map(|_| BinEnv::with_library(env_config.clone(), library.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(config.adam, &net.store);
    let mut grads = Grads::zeros_like(&net.store);
    let mut logs: Vec<EpisodeLog> = Vec::with_capacity(config.episodes);
    let mut losses: Vec<f64> = Vec::with_capacity(config.episodes);
    let mut curve = Vec::new();
    let mut crashed = 0usize;
    let mut next_episode = 0usize;
    let mut next_curve = config.curve_every;
    let mut next_checkpoint = config.checkpoint_every;
    let fingerprint = env_fingerprint(env_config)?;

    while next_episode < config.episodes {
        let round = config.workers.min(config.episodes - next_episode);
        let first = next_episode;
        let shared: &PolicyNet = net;
        let results: Vec<Option<Rollout>> = std::thread::scope(|s| {
            let handles: Vec<_> = envs[..round]
                .iter_mut()
                .enumerate()
                .map(|(w, env)| {
                    let e = (first + w) as u64;
                    let env_seed = derive_seed(config.seed, e);
                    let action_seed = derive_seed(config.seed ^ ACTION_STREAM, e);
                    s.spawn(move || play_episode(shared, env, env_seed, action_seed))
                })
                .collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(w, h)| match h.join() {
                    Ok(Ok(r)) => Some(r),
                    Ok(Err(e)) => {
                        warn!("episode {} failed: {e}", first + w);
                        None
                    }
                    Err(_) => {
                        warn!("worker for episode {} panicked", first + w);
                        None
                    }
                })
                .collect()
        });
        next_episode += round;
        let rollouts: Vec<Rollout> = results.into_iter().flatten().collect();
        crashed += round - rollouts.len();
        if rollouts.is_empty() {
            return Err(Error::Contract(format!(
                "every worker failed in the round starting at episode {first}"
            )));
        }

        // per-transition targets, in episode order
        let mut batch: Vec<(&Transition, f64, f64)> = Vec::new();
        for r in &rollouts {
            let rewards: Vec<f64> = r.transitions.iter().map(|t| t.reward).collect();
            for (t, g) in r.transitions.iter().zip(discounted_returns(&rewards, config.gamma)) {
                batch.push((t, g, g - t.value));
            }
        }
        if config.normalize_advantages && batch.len() > 1 {
            let n = batch.len() as f64;
            let mean = batch.iter().map(|b| b.2).sum::<f64>() / n;
            let std = (batch.iter().map(|b| (b.2 - mean).powi(2)).sum::<f64>() / n)
                .sqrt()
                .max(1e-8);
            batch.iter_mut().for_each(|b| b.2 = (b.2 - mean) / std);
        }
        let n = batch.len() as f64;
        let mut round_loss = 0.0;
        for _ in 0..config.update_epochs {
            grads.zero();
            let mut epoch_loss = 0.0;
            for (t, ret, adv) in &batch {
                let mut g = Graph::training(&net.store);
                let out = net.forward(&mut g, &t.input)?;
                let logits_t = g.value(out.logits);
                let logits: Vec<f64> = logits_t.data.iter().map(|v| *v as f64).collect();
                let (lh, lw) = (logits_t.h, logits_t.w);
                let value = g.value(out.value).data[0] as f64;
                let loss = surrogate_loss(
                    &SurrogateSample {
                        logits: &logits,
                        mask: &t.mask,
                        action: t.action,
                        old_log_prob: t.log_prob,
                        advantage: *adv,
                        value,
                        target_return: *ret,
                    },
                    &config.surrogate,
                )?;
                epoch_loss += loss.total / n;
                let seed_logits =
                    Tensor::from_vec(1, lh, lw, loss.grad_logits.iter().map(|v| (v / n) as f32).collect());
                let seed_value = Tensor::from_vec(1, 1, 1, vec![(loss.grad_value / n) as f32]);
                g.backward(vec![(out.logits, seed_logits), (out.value, seed_value)], &mut grads);
            }
            if let Some(max) = config.max_grad_norm {
                grads.clip_global_norm(max);
            }
            adam.step(&mut net.store, &grads);
            round_loss = epoch_loss;
        }

        for r in rollouts {
            logs.push(r.log);
            losses.push(round_loss);
        }
        while next_episode >= next_curve {
            let lo = logs.len().saturating_sub(config.curve_window);
            let m = PickingMetrics::from_logs(&logs[lo..], &fingerprint, config.seed);
            let point = CurvePoint {
                episode: next_episode,
                completion_rate: m.completion_rate,
                avg_picked: m.avg_picked,
                success_rate: m.success_rate,
                success_rate_all_runs: m.success_rate_all_runs,
                mean_return: m.mean_return,
                mean_loss: losses[lo..].iter().sum::<f64>() / (losses.len() - lo).max(1) as f64,
            };
            info!(
                "episode {}: completion {:.3} picked {:.2} success(all) {:.3} return {:.3} loss {:.4}",
                point.episode,
                point.completion_rate,
                point.avg_picked,
                point.success_rate_all_runs,
                point.mean_return,
                point.mean_loss
            );
            curve.push(point);
            next_curve += config.curve_every;
        }
        if let (Some(dir), Some(at)) = (out_dir, next_checkpoint) {
            if next_episode >= at && next_episode < config.episodes {
                save_checkpoint(
                    net,
                    env_config,
                    config,
                    &dir.join(format!("policy_ep{next_episode}.safetensors")),
                    next_episode,
                )?;
                next_checkpoint = config.checkpoint_every.map(|every| at + every);
            }
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("policy.safetensors");
            save_checkpoint(net, env_config, config, &path, next_episode)?;
            let outcome_curve = curve_csv(&curve, &fingerprint, config.seed);
            let curve_path = dir.join("curves.csv");
            std::fs::write(&curve_path, outcome_curve).map_err(|e| Error::io(&curve_path, e))?;
            Some(path)
        }
        None => None,
    };
    Ok(PolicyTrainOutcome {
        logs,
        curve,
        crashed_episodes: crashed,
        final_checkpoint,
        fingerprint,
        seed: config.seed,
    })
}

fn env_fingerprint(env: &BinEnvConfig) -> Result<String> {
    let json = serde_json::to_vec(env).map_err(|e| Error::Format(e.to_string()))?;
    Ok(crate::scenegen::sha256_hex(&json)[..16].to_string())
}

fn save_checkpoint(
    net: &PolicyNet,
    env: &BinEnvConfig,
    config: &PolicyTrainConfig,
    path: &Path,
    episode: usize,
) -> Result<()> {
    let json = |e: serde_json::Error| Error::Format(e.to_string());
    let mut meta = BTreeMap::new();
    meta.insert("env_config".into(), serde_json::to_string(env).map_err(json)?);
    meta.insert("training".into(), serde_json::to_string(config).map_err(json)?);
    meta.insert("episode".into(), episode.to_string());
    net.save(path, &meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_discount_backwards() {
        let g = discounted_returns(&[0.1, 0.1, -1.0], 0.3);
        assert!((g[2] + 1.0).abs() < 1e-12);
        assert!((g[1] - (0.1 - 0.3)).abs() < 1e-12);
        assert!((g[0] - (0.1 + 0.3 * (0.1 - 0.3))).abs() < 1e-12);
        assert_eq!(discounted_returns(&[], 0.3), Vec::<f64>::new());
    }

    #[test]
    fn config_validation() {
        assert!(PolicyTrainConfig::desk().validate().is_ok());
        let bad = PolicyTrainConfig {
            gamma: 1.5,
            ..PolicyTrainConfig::desk()
        };
        assert_eq!(bad.validate().unwrap_err().kind(), "config");
    }
}
