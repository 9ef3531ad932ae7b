use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use cods_core::binsim::BinEnvConfig;
use cods_core::correspondence::{sample_training_pairs, PairSamplingConfig};
use cods_core::desceval::{
    input_config_sweep, matching_error_distance, random_pixel_baseline, DenseDescriptor, MatchingEvalConfig,
    SweepEntry, WorldCoordOracle,
};
use cods_core::descriptor::{
    train_descriptor, DescriptorNet, DescriptorNetConfig, DescriptorTrainConfig, InputScaling,
};
use cods_core::error::Error;
use cods_core::geometry::Pixel;
use cods_core::harness::{
    evaluate_policy, run_ablation_suite, viz, write_evaluation, AblationConfig, NetPolicy, RandomPolicy,
    ARTIFACT_SCHEMA_VERSION,
};
use cods_core::imageio::write_rgb;
use cods_core::policy::{
    parse_curve_csv, train_policy, PolicyNet, PolicyNetConfig, PolicyTrainConfig, PolicyVariant, SelectionMode,
};
use cods_core::scenegen::{generate_descriptor_dataset, sha256_hex, Dataset, DatasetConfig};

#[derive(Parser)]
#[command(name = "cods", version, about = "Dense descriptors and suction bin-picking policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; preset values fill anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults used when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Render a descriptor training dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dense descriptor network.
    TrainCods {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matching error distance of a checkpoint (or the world-coordinate oracle), or a sweep.
    EvalCods {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "sweep")]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["oracle", "sweep"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        /// JSON list of {config, split, checkpoint, dataset} entries.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a picking policy.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<PolicyVariant>,
        /// Descriptor checkpoint for the frozen stream.
        #[arg(long)]
        cods: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a policy checkpoint, or of the random-pixel policy.
    EvalPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        random: bool,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every variant on each split × object-count cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `variant=path`, repeatable.
        #[arg(long = "checkpoint", value_parser = parse_variant_path)]
        checkpoints: Vec<(PolicyVariant, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Figures.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        kind: VizKind,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training-curve CSV for `curves`.
        #[arg(long)]
        curves: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, num_args = 2, default_values_t = [0usize, 1])]
        views: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts of the policy variants.
    Describe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cods: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VizKind {
    Heatmap,
    Overlay,
    Cdf,
    Curves,
}

fn parse_variant_path(s: &str) -> Result<(PolicyVariant, PathBuf), String> {
    let (v, p) = s.split_once('=').ok_or("expected variant=path")?;
    Ok((v.parse().map_err(|e: Error| e.to_string())?, PathBuf::from(p)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodsTrainFile {
    net: DescriptorNetConfig,
    train: DescriptorTrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyTrainFile {
    net: PolicyNetConfig,
    env: BinEnvConfig,
    train: PolicyTrainConfig,
}

/// Overlays a JSON document onto the preset, object by object.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn load_config<T: Serialize + DeserializeOwned>(common: &Common, preset: T) -> Result<T, Error> {
    let Some(path) = &common.config else {
        return Ok(preset);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let over: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(preset).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut base, over);
    serde_json::from_value(base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn pick<T>(preset: Preset, desk: impl FnOnce() -> T, paper: impl FnOnce() -> T) -> T {
    match preset {
        Preset::Desk => desk(),
        Preset::Paper => paper(),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fingerprint_of<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).unwrap_or_default())[..16].to_string()
}

fn run(command: Command) -> Result<serde_json::Value, Error> {
    match command {
        Command::GenData { common, out } => {
            let mut cfg = load_config(&common, pick(common.preset, DatasetConfig::desk, DatasetConfig::paper))?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let manifest = generate_descriptor_dataset(&cfg, &out)?;
            Ok(json!({
                "dataset": out,
                "scenes": manifest.scenes.len(),
                "fingerprint": manifest.fingerprint,
                "seed": cfg.seed,
            }))
        }
        Command::TrainCods { common, data, out } => {
            let preset = pick(
                common.preset,
                || CodsTrainFile {
                    net: DescriptorNetConfig::desk(),
                    train: DescriptorTrainConfig::desk(),
                },
                || CodsTrainFile {
                    net: DescriptorNetConfig::paper(),
                    train: DescriptorTrainConfig::paper(),
                },
            );
            let mut cfg = load_config(&common, preset)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            cfg.net.validate()?;
            cfg.train.validate()?;
            let ds = Dataset::open(&data)?;
            let scaling = InputScaling {
                depth_mean: ds.manifest.depth_mean,
                depth_std: ds.manifest.depth_std,
            };
            let mut net = DescriptorNet::new(cfg.net.clone(), scaling, cfg.train.seed)?;
            let outcome = train_descriptor(&ds, &mut net, &cfg.train, Some(&out))?;
            let mut log = format!(
                "# schema_version={ARTIFACT_SCHEMA_VERSION},fingerprint={},seed={}\nstep,lr,loss,matched,nonmatched\n",
                fingerprint_of(&cfg),
                cfg.train.seed
            );
            for e in &outcome.log {
                log.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.step, e.lr, e.loss, e.matched, e.nonmatched
                ));
            }
            let path = out.join("train_log.csv");
            std::fs::write(&path, log).map_err(|e| Error::io(&path, e))?;
            Ok(json!({
                "checkpoint": outcome.final_checkpoint,
                "skipped_pairs": outcome.skipped_pairs,
                "final_loss": outcome.log.last().map(|e| e.loss),
                "seed": cfg.train.seed,
            }))
        }
        Command::EvalCods {
            common,
            data,
            checkpoint,
            oracle,
            sweep,
            out,
        } => {
            let preset = pick(common.preset, MatchingEvalConfig::default, MatchingEvalConfig::paper);
            let mut cfg = load_config(&common, preset)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let fp = fingerprint_of(&cfg);
            if let Some(sweep) = sweep {
                let text =
                    std::fs::read_to_string(&sweep).map_err(|e| Error::Config(format!("{}: {e}", sweep.display())))?;
                let entries: Vec<SweepEntry> =
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", sweep.display())))?;
                let table = input_config_sweep(&entries, &cfg)?;
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                let csv = format!(
                    "# schema_version={ARTIFACT_SCHEMA_VERSION},fingerprint={fp},seed={}\n{}",
                    cfg.seed,
                    table.to_csv()
                );
                let path = out.join("sweep.csv");
                std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
                println!("{}", table.to_table());
                return Ok(json!({ "sweep": path, "seed": cfg.seed }));
            }
            let data = data.expect("clap requires --data without --sweep");
            let ds = Dataset::open(&data)?;
            let net;
            let (descriptor, name): (&dyn DenseDescriptor, String) = match (&checkpoint, oracle) {
                (Some(p), _) => {
                    net = DescriptorNet::load(p)?.0;
                    (&net, p.display().to_string())
                }
                (None, true) => (&WorldCoordOracle, "world_coordinate_oracle".into()),
                (None, false) => return Err(Error::Config("pass --checkpoint or --oracle".into())),
            };
            let r = matching_error_distance(descriptor, &ds, &cfg)?;
            let (w, h) = (ds.manifest.config.width as usize, ds.manifest.config.height as usize);
            let baseline = random_pixel_baseline(w, h, 100_000, cfg.seed);
            let doc = json!({
                "schema_version": ARTIFACT_SCHEMA_VERSION,
                "fingerprint": fp,
                "seed": cfg.seed,
                "descriptor": name,
                "dataset_fingerprint": ds.manifest.fingerprint,
                "mean_error": r.mean_error,
                "median_error": r.median_error(),
                "random_pixel_baseline": baseline,
                "effective_image_pairs": r.effective_image_pairs,
                "samples": r.samples.len(),
            });
            write_json(&out.join("eval.json"), &doc)?;
            let mut csv = format!(
                "# schema_version={ARTIFACT_SCHEMA_VERSION},fingerprint={fp},seed={}\nerror\n",
                cfg.seed
            );
            for e in r.errors() {
                csv.push_str(&format!("{e}\n"));
            }
            let path = out.join("errors.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            Ok(doc)
        }
        Command::TrainPolicy {
            common,
            variant,
            cods,
            out,
        } => {
            let v = variant.unwrap_or(PolicyVariant::CodsPlusDepth);
            let preset = pick(
                common.preset,
                || PolicyTrainFile {
                    net: PolicyNetConfig::desk(v, None),
                    env: BinEnvConfig::desk(),
                    train: PolicyTrainConfig::desk(),
                },
                || PolicyTrainFile {
                    net: PolicyNetConfig::paper(v, None),
                    env: BinEnvConfig::paper(),
                    train: PolicyTrainConfig::paper(),
                },
            );
            let mut cfg = load_config(&common, preset)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(v) = variant {
                cfg.net.variant = v;
            }
            if cods.is_some() {
                cfg.net.cods_checkpoint = cods;
            }
            if !cfg.net.variant.needs_cods() {
                cfg.net.cods_checkpoint = None;
            }
            let mut net = PolicyNet::from_config(cfg.net.clone(), cfg.train.seed)?;
            let frozen_before = net.cods().map(|c| c.store.digest());
            let outcome = train_policy(&mut net, &cfg.env, &cfg.train, Some(&out))?;
            let frozen_after = net.cods().map(|c| c.store.digest());
            Ok(json!({
                "checkpoint": outcome.final_checkpoint,
                "curves": out.join("curves.csv"),
                "episodes": outcome.logs.len(),
                "crashed_episodes": outcome.crashed_episodes,
                "frozen_stream_unchanged": frozen_before == frozen_after,
                "seed": cfg.train.seed,
            }))
        }
        Command::EvalPolicy {
            common,
            checkpoint,
            random,
            episodes,
            out,
        } => {
            let mut env = load_config(&common, pick(common.preset, BinEnvConfig::desk, BinEnvConfig::paper))?;
            env.validate()?;
            let seed = common.seed.unwrap_or(0);
            let eval = if random {
                evaluate_policy(&RandomPolicy, &env, episodes, seed, "")?
            } else {
                let path = checkpoint.expect("clap requires --checkpoint without --random");
                let (net, _) = PolicyNet::load(&path, None)?;
                if env.image_size != net.config.observation_size {
                    env.image_size = net.config.observation_size;
                }
                let policy = NetPolicy {
                    net: &net,
                    mode: SelectionMode::Greedy,
                };
                evaluate_policy(&policy, &env, episodes, seed, net.cods_sha256().unwrap_or(""))?
            };
            write_evaluation(&eval, &env, &out)?;
            Ok(json!({ "policy": eval.policy, "metrics": eval.metrics }))
        }
        Command::Ablate {
            common,
            checkpoints,
            out,
        } => {
            let cfg = load_config(
                &common,
                pick(common.preset, AblationConfig::desk, AblationConfig::paper),
            )?;
            let map: BTreeMap<PolicyVariant, PathBuf> = checkpoints.into_iter().collect();
            let tables = run_ablation_suite(&map, &cfg, common.seed.unwrap_or(0))?;
            let paths = tables.write(&out)?;
            Ok(json!({ "tables": paths, "seed": tables.seed, "fingerprint": tables.fingerprint }))
        }
        Command::Viz {
            common,
            kind,
            data,
            checkpoint,
            curves,
            scene,
            views,
            out,
        } => run_viz(common, kind, data, checkpoint, curves, scene, [views[0], views[1]], out),
        Command::Describe { common, cods } => {
            let mut rows = Vec::new();
            for v in PolicyVariant::ALL {
                let cfg = pick(
                    common.preset,
                    || PolicyNetConfig::desk(v, None),
                    || PolicyNetConfig::paper(v, None),
                );
                let mut cfg = load_config(&common, cfg)?;
                cfg.variant = v;
                cfg.cods_checkpoint = v.needs_cods().then(|| cods.clone().unwrap_or_default());
                let seed = common.seed.unwrap_or(0);
                let net = match (&cods, v.needs_cods()) {
                    (Some(_), _) | (None, false) => PolicyNet::from_config(cfg, seed)?,
                    (None, true) => {
                        // untrained stand-in: only the shape matters for counting
                        let dcfg = pick(common.preset, DescriptorNetConfig::desk, DescriptorNetConfig::paper);
                        let d = DescriptorNet::new(
                            dcfg,
                            InputScaling {
                                depth_mean: 0.5,
                                depth_std: 0.1,
                            },
                            seed,
                        )?;
                        PolicyNet::new(cfg, Some((std::sync::Arc::new(d), "untrained".into())), seed)?
                    }
                };
                rows.push(json!({
                    "variant": v.name(),
                    "trainable_parameters": net.trainable_parameters(),
                    "frozen_parameters": net.frozen_parameters(),
                }));
            }
            Ok(json!({ "schema_version": ARTIFACT_SCHEMA_VERSION, "variants": rows }))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_viz(
    common: Common,
    kind: VizKind,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    curves: Option<PathBuf>,
    scene: usize,
    views: [usize; 2],
    out: PathBuf,
) -> Result<serde_json::Value, Error> {
    let seed = common.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let need_data = || -> Result<Dataset, Error> {
        Dataset::open(
            data.as_deref()
                .ok_or_else(|| Error::Config("--data is required".into()))?,
        )
    };
    let descriptor = |p: &Option<PathBuf>| -> Result<Box<dyn DenseDescriptor>, Error> {
        Ok(match p {
            Some(p) => Box::new(DescriptorNet::load(p)?.0),
            None => Box::new(WorldCoordOracle),
        })
    };
    let image = match kind {
        VizKind::Heatmap => {
            let ds = need_data()?;
            let a = ds.load_frame(scene, views[0])?;
            let b = ds.load_frame(scene, views[1])?;
            let objects: Vec<usize> = (0..a.instance_mask.len())
                .filter(|i| a.instance_mask.as_slice()[*i] != 0 && a.depth.as_slice()[*i] > 0.0)
                .collect();
            if objects.is_empty() {
                return Err(Error::Domain("view has no object pixel".into()));
            }
            let (x, y) = a.depth.coords(objects[rng.random_range(0..objects.len())]);
            let d = descriptor(&checkpoint)?;
            viz::descriptor_heatmap(&a, &b, d.as_ref(), Pixel::new(x as i32, y as i32))?
        }
        VizKind::Overlay => {
            let ds = need_data()?;
            let a = ds.load_frame(scene, views[0])?;
            let b = ds.load_frame(scene, views[1])?;
            let cfg = PairSamplingConfig {
                n_match: 40,
                n_nonmatch_per_type: 0,
                ..PairSamplingConfig::default()
            };
            let set = sample_training_pairs(&a, &b, &cfg, &mut rng);
            viz::correspondence_overlay(&a, &b, &set.matches)
        }
        VizKind::Cdf => {
            let ds = need_data()?;
            let cfg = MatchingEvalConfig {
                seed,
                ..MatchingEvalConfig::default()
            };
            let d = descriptor(&checkpoint)?;
            let r = matching_error_distance(d.as_ref(), &ds, &cfg)?;
            let errors = r.errors();
            viz::error_cdf_plot(&[(&errors, viz::BLUE)], 480, 360)?
        }
        VizKind::Curves => {
            let path = curves.ok_or_else(|| Error::Config("--curves is required".into()))?;
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let curve = parse_curve_csv(&text)?;
            let initial =
                load_config(&common, pick(common.preset, BinEnvConfig::desk, BinEnvConfig::paper))?.object_count;
            viz::training_curves_plot(&curve, initial, 640, 360)?
        }
    };
    write_rgb(&out, &image)?;
    info!("wrote {}", out.display());
    Ok(json!({ "image": out, "seed": seed }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
