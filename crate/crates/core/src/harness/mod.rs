//! Evaluation protocol: greedy episodes, the random-pixel floor, paired bootstrap
//! comparisons, the ablation tables and versioned artifacts.

mod metrics;
pub mod viz;

pub use metrics::{PickingMetrics, METRICS_SCHEMA_VERSION};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binsim::{BinEnv, BinEnvConfig, EpisodeLog};
use crate::error::{config_err, Error, Result};
use crate::geometry::Pixel;
use crate::grid::Grid;
use crate::policy::{select_action, PolicyNet, PolicyVariant, SelectionMode};
use crate::render::RGBDFrame;
use crate::scenegen::{derive_seed, sha256_hex, ObjectLibrary, Split};

/// Version stamped into every JSON and CSV artifact.
pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Stream offset for policy randomness during evaluation.
const EVAL_ACTION_STREAM: u64 = 0xe7a1_0001;

/// Anything that picks a pixel from an observation.
pub trait PickPolicy: Sync {
    fn name(&self) -> String;
    fn choose(&self, frame: &RGBDFrame, mask: &Grid<bool>, rng: &mut ChaCha8Rng) -> Result<Pixel>;
}

/// Uniformly random valid pixel.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl PickPolicy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn choose(&self, _frame: &RGBDFrame, mask: &Grid<bool>, rng: &mut ChaCha8Rng) -> Result<Pixel> {
        let valid: Vec<usize> = (0..mask.len()).filter(|i| mask.as_slice()[*i]).collect();
        if valid.is_empty() {
            return Err(crate::error::domain_err!("no valid pixel to pick"));
        }
        let (x, y) = mask.coords(valid[rng.random_range(0..valid.len())]);
        Ok(Pixel::new(x as i32, y as i32))
    }
}

/// A trained network acting greedily or by sampling.
pub struct NetPolicy<'a> {
    pub net: &'a PolicyNet,
    pub mode: SelectionMode,
}

impl PickPolicy for NetPolicy<'_> {
    fn name(&self) -> String {
        self.net.config.variant.name().into()
    }

    fn choose(&self, frame: &RGBDFrame, mask: &Grid<bool>, rng: &mut ChaCha8Rng) -> Result<Pixel> {
        let input = self.net.prepare(frame)?;
        let out = self.net.evaluate(&input)?;
        select_action(&out.logits, mask, self.mode, rng)
    }
}

/// Metrics plus the raw episode logs of one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub policy: String,
    pub metrics: PickingMetrics,
    pub logs: Vec<EpisodeLog>,
}

/// Hash identifying an environment configuration and any extra context (e.g. a checkpoint hash).
pub fn config_fingerprint(env: &BinEnvConfig, extra: &str) -> Result<String> {
    let mut bytes = serde_json::to_vec(env).map_err(|e| Error::Format(e.to_string()))?;
    bytes.extend_from_slice(extra.as_bytes());
    Ok(sha256_hex(&bytes)[..16].to_string())
}

/// Seed of evaluation episode `i`; shared by every policy evaluated with the same base seed.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, i as u64)
}

/// Plays `n_episodes` episodes on paired seeds.
pub fn evaluate_policy(
    policy: &dyn PickPolicy,
    env_config: &BinEnvConfig,
    n_episodes: usize,
    seed: u64,
    fingerprint_extra: &str,
) -> Result<Evaluation> {
    env_config.validate()?;
    if n_episodes == 0 {
        return Err(config_err!("n_episodes must be positive"));
    }
    let library = ObjectLibrary::procedural(env_config.library_seed, env_config.models_per_split);
    let logs = (0..n_episodes)
        .into_par_iter()
        .map_init(
            || BinEnv::with_library(env_config.clone(), library.clone()),
            |env, i| {
                let env = env.as_mut().map_err(|e| config_err!("{e}"))?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ EVAL_ACTION_STREAM, i as u64));
                env.reset(episode_seed(seed, i))?;
                loop {
                    let frame = env
                        .observation()
                        .ok_or_else(|| Error::Contract("no observation".into()))?;
                    let mask = env.action_mask()?;
                    let pixel = policy.choose(frame, &mask, &mut rng)?;
                    if env.step(pixel)?.done {
                        break;
                    }
                }
                env.episode_log()
                    .cloned()
                    .ok_or_else(|| Error::Contract("episode without log".into()))
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let fp = config_fingerprint(env_config, fingerprint_extra)?;
    Ok(Evaluation {
        policy: policy.name(),
        metrics: PickingMetrics::from_logs(&logs, &fp, seed),
        logs,
    })
}

/// Writes `metrics.json` and `episodes.jsonl` into `dir`.
pub fn write_evaluation(eval: &Evaluation, env_config: &BinEnvConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let doc = serde_json::json!({
        "schema_version": ARTIFACT_SCHEMA_VERSION,
        "policy": eval.policy,
        "metrics": eval.metrics,
        "env_config": env_config,
    });
    let path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let mut lines = String::new();
    for log in &eval.logs {
        lines.push_str(&log.to_jsonl()?);
    }
    let path = dir.join("episodes.jsonl");
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))
}

/// Paired bootstrap of `mean(a − b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_difference: f64,
    /// One-sided lower bound at the requested confidence.
    pub lower_bound: f64,
    pub confidence: f64,
    pub resamples: usize,
}

impl BootstrapResult {
    /// Whether `a` exceeds `b` at the requested confidence.
    pub fn significant(&self) -> bool {
        self.lower_bound > 0.0
    }
}

pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, confidence: f64, seed: u64) -> Result<BootstrapResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(crate::error::domain_err!(
            "paired samples must be non-empty and equally long"
        ));
    }
    if resamples == 0 || !(0.0..1.0).contains(&confidence) {
        return Err(config_err!("resamples must be positive and confidence in [0, 1)"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| d[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let k = (((1.0 - confidence) * resamples as f64).floor() as usize).min(resamples - 1);
    Ok(BootstrapResult {
        mean_difference: d.iter().sum::<f64>() / n as f64,
        lower_bound: means[k],
        confidence,
        resamples,
    })
}

/// Per-episode completion indicators.
pub fn completion_indicators(logs: &[EpisodeLog]) -> Vec<f64> {
    logs.iter().map(|l| if l.completed() { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub env: BinEnvConfig,
    pub splits: Vec<Split>,
    pub object_counts: Vec<usize>,
    pub episodes: usize,
    pub include_random: bool,
}

impl AblationConfig {
    pub fn paper() -> AblationConfig {
        AblationConfig {
            env: BinEnvConfig::paper(),
            splits: vec![Split::Test, Split::Novel],
            object_counts: vec![20, 30],
            episodes: 50,
            include_random: true,
        }
    }

    pub fn desk() -> AblationConfig {
        AblationConfig {
            env: BinEnvConfig::desk(),
            episodes: 5,
            ..AblationConfig::paper()
        }
    }

    pub fn cells(&self) -> Vec<(Split, usize)> {
        self.splits
            .iter()
            .flat_map(|s| self.object_counts.iter().map(move |c| (*s, *c)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.is_empty() || self.object_counts.is_empty() || self.episodes == 0 {
            return Err(config_err!("ablation needs splits, object counts and episodes"));
        }
        self.env.validate()
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
        Split::Novel => "novel",
    }
}

/// One method row of the ablation tables; `None` cells were not evaluated.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub method: String,
    pub cells: Vec<Option<PickingMetrics>>,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct AblationTables {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub fingerprint: String,
    pub seed: u64,
}

/// The three emitted tables.
pub const ABLATION_TABLES: [&str; 3] = ["completion", "avg_picked", "success_rate"];

impl AblationTables {
    /// CSV for one of [`ABLATION_TABLES`]; blank cells carry a note in the last column.
    pub fn to_csv(&self, table: &str) -> Result<String> {
        let pick: fn(&PickingMetrics) -> Option<f64> = match table {
            "completion" => |m| Some(m.completion_rate),
            "avg_picked" => |m| Some(m.avg_picked),
            "success_rate" => |m| m.success_rate,
            other => return Err(config_err!("unknown ablation table {other:?}")),
        };
        let mut s = format!(
            "# schema_version={},table={table},fingerprint={},seed={}\nmethod,{},note\n",
            ARTIFACT_SCHEMA_VERSION,
            self.fingerprint,
            self.seed,
            self.columns.join(",")
        );
        for row in &self.rows {
            let mut notes = vec![row.note.clone()];
            let cells: Vec<String> = row
                .cells
                .iter()
                .zip(&self.columns)
                .map(|(c, col)| match c.as_ref().map(|m| (m, pick(m))) {
                    Some((_, Some(v))) => format!("{v:.4}"),
                    Some((_, None)) => {
                        notes.push(format!("{col}: no completion run"));
                        String::new()
                    }
                    None => String::new(),
                })
                .collect();
            let note = notes
                .into_iter()
                .filter(|n| !n.is_empty())
                .collect::<Vec<_>>()
                .join("; ");
            s.push_str(&format!("{},{},{}\n", row.method, cells.join(","), csv_field(&note)));
        }
        Ok(s)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ABLATION_TABLES
            .iter()
            .map(|t| {
                let path = dir.join(format!("ablation_{t}.csv"));
                std::fs::write(&path, self.to_csv(t)?).map_err(|e| Error::io(&path, e))?;
                Ok(path)
            })
            .collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Evaluates each variant (and the random floor) on every split × object-count cell.
/// Variants without a checkpoint or whose checkpoint fails to load get a blank row.
pub fn run_ablation_suite(
    checkpoints: &BTreeMap<PolicyVariant, PathBuf>,
    config: &AblationConfig,
    seed: u64,
) -> Result<AblationTables> {
    config.validate()?;
    if checkpoints.is_empty() {
        return Err(config_err!("ablation needs at least one checkpoint"));
    }
    let cells = config.cells();
    let columns = cells.iter().map(|(s, c)| format!("{}_{c}", split_name(*s))).collect();
    let cell_env = |split: Split, count: usize| BinEnvConfig {
        split,
        object_count: count,
        ..config.env.clone()
    };
    let mut rows = Vec::new();
    for variant in PolicyVariant::ALL {
        let mut row = AblationRow {
            method: variant.name().into(),
            cells: vec![None; cells.len()],
            note: String::new(),
        };
        match checkpoints.get(&variant) {
            None => row.note = "no checkpoint".into(),
            Some(path) => match PolicyNet::load(path, None) {
                Err(e) => row.note = format!("checkpoint failed to load: {e}"),
                Ok((net, _)) => {
                    let policy = NetPolicy {
                        net: &net,
                        mode: SelectionMode::Greedy,
                    };
                    let extra = net.cods_sha256().unwrap_or("").to_string();
                    for (i, (split, count)) in cells.iter().enumerate() {
                        let eval = evaluate_policy(&policy, &cell_env(*split, *count), config.episodes, seed, &extra)?;
                        row.cells[i] = Some(eval.metrics);
                    }
                }
            },
        }
        rows.push(row);
    }
    if config.include_random {
        let mut row = AblationRow {
            method: "random".into(),
            cells: Vec::new(),
            note: String::new(),
        };
        for (split, count) in &cells {
            row.cells.push(Some(
                evaluate_policy(&RandomPolicy, &cell_env(*split, *count), config.episodes, seed, "")?.metrics,
            ));
        }
        rows.push(row);
    }
    let json = serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?;
    Ok(AblationTables {
        columns,
        rows,
        fingerprint: sha256_hex(&json)[..16].to_string(),
        seed,
    })
}
