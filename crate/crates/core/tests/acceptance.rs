//! Desk-scale acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full pipeline (dataset, 5k-iteration descriptor training, 2k-episode policy
//! training, ablation) and takes tens of minutes in an optimized build.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cods_core::binsim::{
    attempt_pick, attempt_pick_oracle, resolve_action, BinEnv, BinEnvConfig, EpisodeLog, PickKind, PickOutcome,
    ResolvedAction, TerminationReason, REWARD_VALUES,
};
use cods_core::bvh::{brute_force_intersect, Bvh};
use cods_core::correspondence::{
    find_correspondence, sample_training_pairs, PairSamplingConfig, PixelMatchSet, DEFAULT_TOLERANCE,
};
use cods_core::desceval::{
    matching_error_distance, random_pixel_baseline, EvalViews, MatchingEvalConfig, WorldCoordOracle,
};
use cods_core::descriptor::{
    contrastive_loss, contrastive_loss_with_grad, train_descriptor, DescriptorMap, DescriptorNet, DescriptorNetConfig,
    DescriptorTrainConfig, InputScaling, NonMatchNormalization,
};
use cods_core::geometry::{project, unproject, CameraIntrinsics, CameraView, Pixel, RigidTransform, Vec3};
use cods_core::harness::{
    completion_indicators, evaluate_policy, paired_bootstrap, run_ablation_suite, AblationConfig, NetPolicy,
    PickingMetrics, RandomPolicy, ABLATION_TABLES,
};
use cods_core::mesh::TriMesh;
use cods_core::policy::{train_policy, PolicyNet, PolicyNetConfig, PolicyTrainConfig, PolicyVariant, SelectionMode};
use cods_core::render::render_frame;
use cods_core::scenegen::{
    build_scene, generate_descriptor_dataset, Dataset, DatasetConfig, ObjectLibrary, SceneSpec, Split, Workspace,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Pinned tolerances.
const ROUND_TRIP_PX: f64 = 1e-6;
const WORLD_BUFFER_M: f64 = 1e-6;
const SYMMETRY_PX: f64 = 1.0;
const SYMMETRY_FRACTION: f64 = 0.99;
const GRAD_REL: f64 = 1e-4;
const DESCRIPTOR_BASELINE_FRACTION: f64 = 0.5;
const ORACLE_MAX_ERROR: f64 = 0.005;
const POLICY_SUCCESS_FACTOR: f64 = 2.0;
const BOOTSTRAP_CONFIDENCE: f64 = 0.95;
const BOOTSTRAP_RESAMPLES: usize = 10_000;
const EVAL_EPISODES: usize = 50;
const SEED: u64 = 20_260_101;

struct Shared {
    root: PathBuf,
    dataset: Option<Dataset>,
    descriptor: Option<PathBuf>,
    policy: Option<PathBuf>,
    random_success_rate: Option<f64>,
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_px: f64 = 0.0;
    for _ in 0..1000 {
        let k = CameraIntrinsics::from_fov(
            rng.random_range(32..640),
            rng.random_range(32..480),
            rng.random_range(30.0..90.0),
        )
        .map_err(err)?;
        let eye = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.3..2.0),
        );
        let pose = RigidTransform::look_at(
            eye,
            Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0),
            Vec3::z(),
        )
        .or_else(|_| RigidTransform::look_at(eye, Vec3::zeros(), Vec3::y()))
        .map_err(err)?;
        let view = CameraView::new(k, pose);
        let px = Pixel::new(
            rng.random_range(0..k.width as i32),
            rng.random_range(0..k.height as i32),
        );
        let depth = rng.random_range(0.1..5.0);
        let p = unproject(px, depth, &view).map_err(err)?;
        let ([u, v], d) = project(&p, &view).visible().ok_or("point behind camera")?;
        worst_px = worst_px.max((u - px.x as f64).hypot(v - px.y as f64));
        if (d - depth).abs() > 1e-9 {
            return Err(format!("depth {d} vs {depth}"));
        }
    }
    // rendered world-coordinate buffer against unprojected depth
    let library = ObjectLibrary::procedural(7, 24);
    let mut worst_m: f64 = 0.0;
    let mut pixels = 0usize;
    for s in 0..3 {
        let scene = build_scene(
            &SceneSpec {
                object_count: 6,
                rng_seed: SEED + s,
                split: Split::Train,
                workspace: Workspace::table([0.3, 0.3]),
            },
            &library,
        )
        .map_err(err)?;
        let k = CameraIntrinsics::from_fov(96, 96, 45.0).map_err(err)?;
        let pose = RigidTransform::look_at(Vec3::new(0.3, -0.4, 0.5), Vec3::zeros(), Vec3::z()).map_err(err)?;
        let view = CameraView::new(k, pose);
        let frame = render_frame(&scene, &view);
        for y in 0..frame.height() {
            for x in 0..frame.width() {
                let px = Pixel::new(x as i32, y as i32);
                let d = *frame.depth.get(x, y);
                if d > 0.0 {
                    let p = unproject(px, d, &view).map_err(err)?;
                    worst_m = worst_m.max((p - frame.world_at(px).ok_or("missing world point")?).norm());
                    pixels += 1;
                }
            }
        }
    }
    check(
        worst_px < ROUND_TRIP_PX && worst_m < WORLD_BUFFER_M && pixels > 0,
        format!("max round-trip {worst_px:.2e} px (< {ROUND_TRIP_PX:e}); max world-buffer gap {worst_m:.2e} m over {pixels} px (< {WORLD_BUFFER_M:e})"),
    )
}

fn bvh_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let mut hits = 0usize;
    let mut rays = 0usize;
    for scene in 0..20 {
        let mut mesh = TriMesh::empty();
        loop {
            let part = match rng.random_range(0..3) {
                0 => TriMesh::cuboid(Vec3::new(
                    rng.random_range(0.01..0.1),
                    rng.random_range(0.01..0.1),
                    rng.random_range(0.01..0.1),
                )),
                1 => TriMesh::cylinder(
                    rng.random_range(0.01..0.08),
                    rng.random_range(0.01..0.08),
                    rng.random_range(6..16),
                ),
                _ => TriMesh::uv_sphere(
                    rng.random_range(0.01..0.08),
                    rng.random_range(3..8),
                    rng.random_range(6..12),
                ),
            };
            if mesh.triangles.len() + part.triangles.len() > 500 {
                break;
            }
            let axis = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let tf = RigidTransform::from_axis_angle(
                if axis.norm() > 1e-3 {
                    axis.normalize()
                } else {
                    Vec3::z()
                },
                rng.random_range(0.0..std::f64::consts::TAU),
                Vec3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                ),
            );
            mesh.append(&part.transformed(&tf));
        }
        let bvh = Bvh::build(&mesh.vertices, &mesh.triangles);
        for r in 0..1000 {
            let origin = Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let dir = if r % 2 == 0 {
                let t = rng.random_range(0..mesh.triangles.len());
                let [a, b, c] = mesh.triangle(t);
                ((a + b + c) / 3.0 - origin).normalize()
            } else {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize()
            };
            let fast = bvh.intersect(&mesh.vertices, &mesh.triangles, &origin, &dir, 0.0, f64::INFINITY);
            let slow = brute_force_intersect(&mesh.vertices, &mesh.triangles, &origin, &dir, 0.0, f64::INFINITY);
            if fast != slow {
                return Err(format!("scene {scene} ray {r}: {fast:?} vs {slow:?}"));
            }
            hits += usize::from(fast.is_some());
            rays += 1;
        }
    }
    check(
        hits > rays / 4,
        format!("20 scenes (≤ 500 triangles), {rays} rays, {hits} hits, all bit-identical"),
    )
}

fn dataset(shared: &mut Shared) -> Result<&Dataset, String> {
    if shared.dataset.is_none() {
        let root = shared.root.join("dataset");
        let t = Instant::now();
        generate_descriptor_dataset(&DatasetConfig::desk(), &root).map_err(err)?;
        eprintln!("desk dataset generated in {:.1?}", t.elapsed());
        shared.dataset = Some(Dataset::open(&root).map_err(err)?);
    }
    Ok(shared.dataset.as_ref().expect("just set"))
}

fn correspondence(shared: &mut Shared) -> Outcome {
    let ds = dataset(shared)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let cfg = PairSamplingConfig {
        n_match: 100,
        n_nonmatch_per_type: 0,
        ..PairSamplingConfig::default()
    };
    let (mut total, mut symmetric, mut far, mut rejected) = (0usize, 0usize, 0usize, 0usize);
    let mut worst: f64 = 0.0;
    while total < 10_000 {
        let scene = rng.random_range(0..ds.scene_count());
        let n = ds.view_count(scene);
        let (va, vb) = (rng.random_range(0..n), rng.random_range(0..n));
        if va == vb {
            continue;
        }
        let a = ds.load_frame(scene, va).map_err(err)?;
        let b = ds.load_frame(scene, vb).map_err(err)?;
        let set = sample_training_pairs(&a, &b, &cfg, &mut rng);
        for (ua, ub) in set.matches.iter().take(10_000 - total) {
            let gap =
                (a.world_at(*ua).ok_or("match without depth")? - b.world_at(*ub).ok_or("match without depth")?).norm();
            worst = worst.max(gap);
            if gap > DEFAULT_TOLERANCE {
                return Err(format!(
                    "scene {scene} views {va}->{vb}: match {ua:?}->{ub:?} is {gap:.4} m apart"
                ));
            }
            match find_correspondence(*ub, &b, &a, DEFAULT_TOLERANCE).map_err(err)? {
                Some(back) if back.distance(ua) <= SYMMETRY_PX => symmetric += 1,
                Some(_) => far += 1,
                None => rejected += 1,
            }
            total += 1;
        }
    }
    let frac = symmetric as f64 / total as f64;
    check(
        frac >= SYMMETRY_FRACTION,
        format!("{total} matches within {DEFAULT_TOLERANCE} m (worst {worst:.2e} m); symmetric within {SYMMETRY_PX} px: {:.2}% (≥ {}%); reverse lookups rejected by the tolerance {rejected}, landing farther than {SYMMETRY_PX} px {far}", 100.0 * frac, 100.0 * SYMMETRY_FRACTION),
    )
}

fn loss() -> Outcome {
    let px = Pixel::new;
    let set = |matches, oo| PixelMatchSet {
        matches,
        nonmatch_oo: oo,
        nonmatch_ob: vec![],
        nonmatch_bb: vec![],
        frame_ids: None,
        shortfall: false,
        empty: false,
    };
    // zero case
    let mut a = DescriptorMap::zeros(4, 4, 2);
    a.at_mut(px(0, 0)).copy_from_slice(&[1.0, 0.0]);
    a.at_mut(px(1, 0)).copy_from_slice(&[0.0, 1.0]);
    let zero = contrastive_loss(
        &a,
        &a,
        &set(vec![(px(0, 0), px(0, 0))], vec![(px(0, 0), px(1, 0))]),
        0.5,
        NonMatchNormalization::PerClass,
    )
    .map_err(err)?
    .total;
    // one non-match at distance 0.3 under margin 0.5
    let a = DescriptorMap::zeros(2, 1, 2);
    let mut b = DescriptorMap::zeros(2, 1, 2);
    b.at_mut(px(1, 0)).copy_from_slice(&[0.3, 0.0]);
    let nm = contrastive_loss(
        &a,
        &b,
        &set(vec![(px(0, 0), px(0, 0))], vec![(px(0, 0), px(1, 0))]),
        0.5,
        NonMatchNormalization::PerClass,
    )
    .map_err(err)?
    .nonmatched;
    let expected_f64 = (0.5f64 - 0.3).powi(2);
    // 0.04 is not representable; the f64 evaluation of (0.5 − 0.3)² sits one ulp above it
    let ulp = f64::from_bits(0.04f64.to_bits() + 1) - 0.04;
    // gradients on random 16×16×4 maps
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut worst_rel: f64 = 0.0;
    for trial in 0..3 {
        let mut rand_map = || {
            let mut m = DescriptorMap::zeros(16, 16, 4);
            m.values.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            m
        };
        let (a, b) = (rand_map(), rand_map());
        let mut pairs = |n: usize| -> Vec<(Pixel, Pixel)> {
            (0..n)
                .map(|_| {
                    (
                        px(rng.random_range(0..16), rng.random_range(0..16)),
                        px(rng.random_range(0..16), rng.random_range(0..16)),
                    )
                })
                .collect()
        };
        let s = PixelMatchSet {
            matches: pairs(20),
            nonmatch_oo: pairs(30),
            nonmatch_ob: pairs(30),
            nonmatch_bb: pairs(30),
            frame_ids: None,
            shortfall: false,
            empty: false,
        };
        let mode = if trial == 2 {
            NonMatchNormalization::Pooled
        } else {
            NonMatchNormalization::PerClass
        };
        let (_, grad) = contrastive_loss_with_grad(&a, &b, &s, 0.5, mode).map_err(err)?;
        let h = 1e-6;
        for (which, g) in [(0, &grad.map_a), (1, &grad.map_b)] {
            for i in 0..a.values.len() {
                let eval = |delta: f64| {
                    let (mut ma, mut mb) = (a.clone(), b.clone());
                    if which == 0 {
                        ma.values[i] += delta;
                    } else {
                        mb.values[i] += delta;
                    }
                    contrastive_loss(&ma, &mb, &s, 0.5, mode).map(|l| l.total)
                };
                let numeric = (eval(h).map_err(err)? - eval(-h).map_err(err)?) / (2.0 * h);
                let scale = numeric.abs().max(g[i].abs());
                if scale > 1e-9 {
                    worst_rel = worst_rel.max((g[i] - numeric).abs() / scale);
                }
            }
        }
    }
    check(
        zero == 0.0 && nm == expected_f64 && (nm - 0.04).abs() <= ulp && worst_rel <= GRAD_REL,
        format!("zero case {zero}; non-match case {nm} (= f64 (0.5−0.3)², {:.1e} from 0.04, 1 ulp = {ulp:.1e}); worst gradient rel. error {worst_rel:.2e} (≤ {GRAD_REL:e})", (nm - 0.04).abs()),
    )
}

fn descriptor_training(shared: &mut Shared) -> Outcome {
    let out = shared.root.join("descriptor");
    let ds = dataset(shared)?;
    let scaling = InputScaling {
        depth_mean: ds.manifest.depth_mean,
        depth_std: ds.manifest.depth_std,
    };
    let mut net = DescriptorNet::new(DescriptorNetConfig::desk(), scaling, SEED).map_err(err)?;
    let cfg = DescriptorTrainConfig {
        seed: SEED,
        log_every: 500,
        ..DescriptorTrainConfig::desk()
    };
    let t = Instant::now();
    let outcome = train_descriptor(ds, &mut net, &cfg, Some(&out)).map_err(err)?;
    let train_time = t.elapsed();
    let eval = MatchingEvalConfig {
        views: EvalViews::HeldOutLast { count: 4 },
        seed: SEED,
        ..MatchingEvalConfig::default()
    };
    let learned = matching_error_distance(&net, ds, &eval).map_err(err)?;
    let oracle = matching_error_distance(&WorldCoordOracle, ds, &eval).map_err(err)?;
    let (w, h) = (ds.manifest.config.width as usize, ds.manifest.config.height as usize);
    let baseline = random_pixel_baseline(w, h, 100_000, SEED);
    let result = check(
        learned.mean_error <= DESCRIPTOR_BASELINE_FRACTION * baseline && oracle.mean_error < ORACLE_MAX_ERROR,
        format!(
            "{} iterations in {:.0?} on {} scenes × {} views; held-out error {:.4} (≤ {DESCRIPTOR_BASELINE_FRACTION} × random-pixel {:.4} = {:.4}); oracle {:.5} (< {ORACLE_MAX_ERROR})",
            cfg.iterations,
            train_time,
            ds.scene_count(),
            ds.view_count(0),
            learned.mean_error,
            baseline,
            DESCRIPTOR_BASELINE_FRACTION * baseline,
            oracle.mean_error
        ),
    );
    shared.descriptor = outcome.final_checkpoint;
    result
}

fn random_mask_pixel(env: &BinEnv, rng: &mut ChaCha8Rng) -> Result<Pixel, String> {
    let mask = env.action_mask().map_err(err)?;
    let valid: Vec<usize> = (0..mask.len()).filter(|i| mask.as_slice()[*i]).collect();
    let (x, y) = mask.coords(valid[rng.random_range(0..valid.len())]);
    Ok(Pixel::new(x as i32, y as i32))
}

fn suction_oracle() -> Outcome {
    let mut env = BinEnv::new(BinEnvConfig::desk()).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for scene in 0..100 {
        env.reset(SEED + scene).map_err(err)?;
        let frame = env.observation().ok_or("no observation")?.clone();
        let rays = env.rays().ok_or("no ray scene")?;
        let cfg = env.config();
        for probe in 0..20 {
            let px = random_mask_pixel(&env, &mut rng)?;
            match resolve_action(&frame, px, cfg.normal_radius, cfg.pad.max_tilt_deg).map_err(err)? {
                ResolvedAction::Target { point, normal, .. } => {
                    let (p, n) = (Vec3::from(point), Vec3::from(normal));
                    let fast = attempt_pick(&p, &n, rays, &cfg.basket, &cfg.pad);
                    let slow = attempt_pick_oracle(&p, &n, rays, &cfg.basket, &cfg.pad);
                    if fast != slow {
                        return Err(format!("scene {scene} probe {probe}: {fast:?} vs oracle {slow:?}"));
                    }
                    *kinds.entry(fast.kind.name()).or_default() += 1;
                }
                ResolvedAction::InvalidTarget => *kinds.entry("invalid_target").or_default() += 1,
            }
        }
    }
    Ok(format!(
        "100 scenes × 20 probes agree with the brute-force oracle; outcome counts {kinds:?}"
    ))
}

fn environment_contracts(shared: &mut Shared) -> Outcome {
    let mut env = BinEnv::new(BinEnvConfig::desk()).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let mut logs: Vec<EpisodeLog> = Vec::new();
    for ep in 0..1000u64 {
        env.reset(SEED + 10_000 + ep).map_err(err)?;
        let initial = env.state().ok_or("no state")?.initial_count;
        let mut steps = 0;
        loop {
            let before = env.state().ok_or("no state")?.remaining_ids.len();
            let r = env.step(random_mask_pixel(&env, &mut rng)?).map_err(err)?;
            steps += 1;
            if !REWARD_VALUES.contains(&r.reward) {
                return Err(format!("episode {ep}: reward {} outside the declared set", r.reward));
            }
            let after = env.state().ok_or("no state")?.remaining_ids.len();
            let expected = if r.outcome.kind == PickKind::Success {
                before - 1
            } else {
                before
            };
            if after != expected {
                return Err(format!(
                    "episode {ep} step {steps}: {before} → {after} objects after {:?}",
                    r.outcome.kind
                ));
            }
            if r.done {
                break;
            }
            if steps > 2 * initial {
                return Err(format!("episode {ep} exceeded {} steps", 2 * initial));
            }
        }
        logs.push(env.episode_log().ok_or("no log")?.clone());
    }
    let m = PickingMetrics::from_logs(&logs, "random", SEED);
    shared.random_success_rate = Some(m.success_rate_all_runs);
    Ok(format!(
        "1000 random episodes: all ≤ 2·initial steps, rewards in {REWARD_VALUES:?}, one object removed per success; random success rate {:.4}, completion {:.3}",
        m.success_rate_all_runs, m.completion_rate
    ))
}

fn policy_training(shared: &mut Shared) -> Result<(String, String), String> {
    let cods = shared.descriptor.clone().ok_or("descriptor checkpoint unavailable")?;
    let env = BinEnvConfig::desk();
    let mut net =
        PolicyNet::from_config(PolicyNetConfig::desk(PolicyVariant::CodsPlusDepth, Some(cods)), SEED).map_err(err)?;
    let frozen_before = net.cods().ok_or("no frozen stream")?.store.digest();
    let cfg = PolicyTrainConfig {
        seed: SEED,
        ..PolicyTrainConfig::desk()
    };
    let out = shared.root.join("policy_cods_plus_depth");
    let t = Instant::now();
    let outcome = train_policy(&mut net, &env, &cfg, Some(&out)).map_err(err)?;
    let train_time = t.elapsed();
    let frozen_after = net.cods().ok_or("no frozen stream")?.store.digest();
    let reloaded = PolicyNet::load(outcome.final_checkpoint.as_deref().ok_or("no checkpoint")?, None)
        .map_err(err)?
        .0;
    let frozen_reloaded = reloaded.cods().ok_or("no frozen stream")?.store.digest();
    shared.policy = outcome.final_checkpoint.clone();
    let frozen = if frozen_before == frozen_after && frozen_after == frozen_reloaded {
        format!(
            "PASS frozen-stream: descriptor parameters bit-identical across {} training episodes (digest {})",
            cfg.episodes,
            &frozen_after[..16]
        )
    } else {
        format!("FAIL frozen-stream: digest {frozen_before} → {frozen_after} (reloaded {frozen_reloaded})")
    };

    let greedy = evaluate_policy(
        &NetPolicy {
            net: &net,
            mode: SelectionMode::Greedy,
        },
        &env,
        EVAL_EPISODES,
        SEED,
        "",
    )
    .map_err(err)?;
    let random = evaluate_policy(&RandomPolicy, &env, EVAL_EPISODES, SEED, "").map_err(err)?;
    let baseline = shared
        .random_success_rate
        .unwrap_or(random.metrics.success_rate_all_runs);
    let boot = paired_bootstrap(
        &completion_indicators(&greedy.logs),
        &completion_indicators(&random.logs),
        BOOTSTRAP_RESAMPLES,
        BOOTSTRAP_CONFIDENCE,
        SEED,
    )
    .map_err(err)?;
    let g = &greedy.metrics;
    let pass = g.success_rate_all_runs >= POLICY_SUCCESS_FACTOR * baseline
        && g.completion_rate > random.metrics.completion_rate
        && boot.significant();
    let line = format!(
        "{} policy-training: {} episodes in {:.0?}; greedy success {:.4} (≥ {POLICY_SUCCESS_FACTOR} × random {:.4}), completion-run success {}; completion {:.2} vs random {:.2} over {EVAL_EPISODES} paired episodes, bootstrap {:.0}% lower bound {:.3} (> 0)",
        if pass { "PASS" } else { "FAIL" },
        cfg.episodes,
        train_time,
        g.success_rate_all_runs,
        baseline,
        g.success_rate.map_or("n/a".into(), |s| format!("{s:.4}")),
        g.completion_rate,
        random.metrics.completion_rate,
        100.0 * BOOTSTRAP_CONFIDENCE,
        boot.lower_bound
    );
    Ok((line, frozen))
}

fn metrics_hand_log() -> Outcome {
    let episode = |kinds: &[PickKind], termination| {
        let mut remaining = 10;
        let steps = kinds
            .iter()
            .enumerate()
            .map(|(i, k)| {
                if *k == PickKind::Success {
                    remaining -= 1;
                }
                PickOutcome {
                    step: i + 1,
                    action: [0, 0],
                    kind: *k,
                    picked_id: (*k == PickKind::Success).then_some(i as u32 + 1),
                    reward: 0.0,
                    done: i + 1 == kinds.len(),
                    remaining,
                    point: None,
                    normal: None,
                }
            })
            .collect();
        EpisodeLog {
            seed: 0,
            initial_count: 10,
            steps,
            termination: Some(termination),
        }
    };
    let mut first = vec![PickKind::Success; 10];
    first.insert(2, PickKind::Miss);
    first.insert(6, PickKind::Collision);
    let mut second = vec![PickKind::Success; 7];
    second.extend([PickKind::Miss; 13]);
    let m = PickingMetrics::from_logs(
        &[
            episode(&first, TerminationReason::AllPicked),
            episode(&second, TerminationReason::StepBudget),
        ],
        "hand",
        0,
    );
    check(
        m.completion_rate == 0.5 && m.avg_picked == 8.5 && m.success_rate == Some(10.0 / 12.0),
        format!(
            "completion {}, avg_picked {}, success_rate {:?} (expected 0.5, 8.5, 10/12)",
            m.completion_rate, m.avg_picked, m.success_rate
        ),
    )
}

fn ablation(shared: &mut Shared) -> Outcome {
    let cods = shared.descriptor.clone().ok_or("descriptor checkpoint unavailable")?;
    let mut checkpoints = BTreeMap::new();
    checkpoints.insert(
        PolicyVariant::CodsPlusDepth,
        shared.policy.clone().ok_or("policy checkpoint unavailable")?,
    );
    let env = BinEnvConfig::desk();
    for variant in [
        PolicyVariant::DepthOnly,
        PolicyVariant::CodsOnly,
        PolicyVariant::DirectCods,
    ] {
        let mut net = PolicyNet::from_config(
            PolicyNetConfig::desk(variant, variant.needs_cods().then(|| cods.clone())),
            SEED,
        )
        .map_err(err)?;
        let cfg = PolicyTrainConfig {
            episodes: 40,
            seed: SEED,
            checkpoint_every: None,
            ..PolicyTrainConfig::desk()
        };
        let out = shared.root.join(format!("policy_{}", variant.name()));
        let o = train_policy(&mut net, &env, &cfg, Some(&out)).map_err(err)?;
        checkpoints.insert(variant, o.final_checkpoint.ok_or("no checkpoint")?);
    }
    let cfg = AblationConfig::desk();
    let t = Instant::now();
    let tables = run_ablation_suite(&checkpoints, &cfg, SEED).map_err(err)?;
    let dir = shared.root.join("ablation");
    let paths = tables.write(&dir).map_err(err)?;
    let expected_header = "method,test_20,test_30,novel_20,novel_30,note";
    let methods = ["cods_plus_depth", "depth_only", "cods_only", "direct_cods", "random"];
    for (table, path) in ABLATION_TABLES.iter().zip(&paths) {
        let text = std::fs::read_to_string(path).map_err(err)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != 2 + methods.len() || lines[1] != expected_header || !lines[0].starts_with("# schema_version=")
        {
            return Err(format!("{table}: unexpected layout:\n{text}"));
        }
        for (line, method) in lines[2..].iter().zip(methods) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells[0] != method || cells.len() < 6 {
                return Err(format!("{table}: bad row {line:?}"));
            }
            if *table != "success_rate" && cells[1..5].iter().any(|c| c.is_empty()) {
                return Err(format!("{table}: missing cell in {line:?}"));
            }
        }
    }
    let evaluations = tables
        .rows
        .iter()
        .flat_map(|r| &r.cells)
        .filter(|c| c.is_some())
        .count();
    check(
        evaluations == methods.len() * 4,
        format!(
            "4 variants + random × 4 cells = {evaluations} evaluations of {} episodes in {:.0?}; wrote {}",
            cfg.episodes,
            t.elapsed(),
            paths.iter().map(|p| file_name(p)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn report(name: &str, outcome: Outcome, passed: &mut usize, total: &mut usize) {
    *total += 1;
    match outcome {
        Ok(detail) => {
            *passed += 1;
            println!("PASS {name}: {detail}");
        }
        Err(detail) => println!("FAIL {name}: {detail}"),
    }
}

fn main() -> ExitCode {
    let keep = std::env::var_os("CODS_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).expect("work directory");
    let mut shared = Shared {
        root,
        dataset: None,
        descriptor: None,
        policy: None,
        random_success_rate: None,
    };
    let (mut passed, mut total) = (0, 0);
    let started = Instant::now();
    report("geometry", geometry(), &mut passed, &mut total);
    report("renderer-oracle", bvh_oracle(), &mut passed, &mut total);
    report("correspondence", correspondence(&mut shared), &mut passed, &mut total);
    report("loss", loss(), &mut passed, &mut total);
    report(
        "descriptor-training",
        descriptor_training(&mut shared),
        &mut passed,
        &mut total,
    );
    report("suction-oracle", suction_oracle(), &mut passed, &mut total);
    report(
        "environment-contracts",
        environment_contracts(&mut shared),
        &mut passed,
        &mut total,
    );
    match policy_training(&mut shared) {
        Ok((policy, frozen)) => {
            for line in [policy, frozen] {
                total += 1;
                passed += usize::from(line.starts_with("PASS"));
                println!("{line}");
            }
        }
        Err(e) => {
            report("policy-training", Err(e.clone()), &mut passed, &mut total);
            report("frozen-stream", Err(e), &mut passed, &mut total);
        }
    }
    report("metrics", metrics_hand_log(), &mut passed, &mut total);
    report("ablation", ablation(&mut shared), &mut passed, &mut total);
    println!(
        "acceptance: {passed}/{total} criteria passed in {:.0?}",
        started.elapsed()
    );
    if passed == total {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
