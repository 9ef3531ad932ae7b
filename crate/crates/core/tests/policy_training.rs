use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cods_core::binsim::BinEnvConfig;
use cods_core::descriptor::{DescriptorNet, DescriptorNetConfig, InputScaling};
use cods_core::nn::BackboneConfig;
use cods_core::policy::{parse_curve_csv, train_policy, PolicyNet, PolicyNetConfig, PolicyTrainConfig, PolicyVariant};

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_width: 4,
        widths: [4, 8, 8, 8],
        blocks: [1, 1, 1, 1],
    }
}

fn env_config() -> BinEnvConfig {
    BinEnvConfig {
        object_count: 3,
        image_size: 32,
        ..BinEnvConfig::desk()
    }
}

fn net_config(variant: PolicyVariant, cods: Option<PathBuf>) -> PolicyNetConfig {
    PolicyNetConfig {
        stream_backbone: tiny_backbone(),
        bottleneck_width: 16,
        value_hidden: 8,
        observation_size: 32,
        ..PolicyNetConfig::desk(variant, cods)
    }
}

fn train_config(episodes: usize, workers: usize) -> PolicyTrainConfig {
    PolicyTrainConfig {
        episodes,
        workers,
        seed: 11,
        curve_every: 10,
        curve_window: 10,
        checkpoint_every: None,
        ..PolicyTrainConfig::desk()
    }
}

fn write_cods(dir: &Path) -> PathBuf {
    let cfg = DescriptorNetConfig {
        backbone: tiny_backbone(),
        ..DescriptorNetConfig::desk()
    };
    let scaling = InputScaling {
        depth_mean: 0.45,
        depth_std: 0.05,
    };
    let path = dir.join("cods.safetensors");
    DescriptorNet::new(cfg, scaling, 5)
        .unwrap()
        .save(&path, &BTreeMap::new())
        .unwrap();
    path
}

#[test]
fn single_worker_training_is_deterministic() {
    let run = || {
        let mut net = PolicyNet::from_config(net_config(PolicyVariant::DepthOnly, None), 3).unwrap();
        let outcome = train_policy(&mut net, &env_config(), &train_config(6, 1), None).unwrap();
        (net.store.digest(), outcome.curve_csv())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
}

#[test]
fn frozen_descriptor_stream_is_untouched_by_policy_updates() {
    let dir = tempfile::tempdir().unwrap();
    let cods = write_cods(dir.path());
    let mut net = PolicyNet::from_config(net_config(PolicyVariant::CodsPlusDepth, Some(cods.clone())), 3).unwrap();
    let frozen_before = net.cods().unwrap().store.digest();
    let trainable_before = net.store.digest();
    let out = dir.path().join("run");
    let outcome = train_policy(&mut net, &env_config(), &train_config(100, 1), Some(&out)).unwrap();
    assert_eq!(outcome.logs.len() + outcome.crashed_episodes, 100);
    assert_eq!(net.cods().unwrap().store.digest(), frozen_before);
    assert_ne!(net.store.digest(), trainable_before, "policy parameters moved");

    let (reloaded, _) = PolicyNet::load(outcome.final_checkpoint.as_deref().unwrap(), None).unwrap();
    assert_eq!(reloaded.store.digest(), net.store.digest());
    assert_eq!(reloaded.cods().unwrap().store.digest(), frozen_before);

    let written = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    let parsed = parse_curve_csv(&written).unwrap();
    assert_eq!(written, outcome.curve_csv());
    assert_eq!(parsed.len(), 10);
    for (p, q) in parsed.iter().zip(&outcome.curve) {
        assert_eq!(p.episode, q.episode);
        assert_eq!(p.success_rate.is_some(), q.success_rate.is_some());
        assert!((p.completion_rate - q.completion_rate).abs() < 1e-6);
        assert!((p.success_rate_all_runs - q.success_rate_all_runs).abs() < 1e-6);
        assert!((p.mean_return - q.mean_return).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_rejects_a_different_descriptor() {
    let dir = tempfile::tempdir().unwrap();
    let cods = write_cods(dir.path());
    let net = PolicyNet::from_config(net_config(PolicyVariant::CodsOnly, Some(cods)), 3).unwrap();
    let ckpt = dir.path().join("policy.safetensors");
    net.save(&ckpt, &BTreeMap::new()).unwrap();

    let other_dir = dir.path().join("other");
    std::fs::create_dir_all(&other_dir).unwrap();
    let other = other_dir.join("cods.safetensors");
    let cfg = DescriptorNetConfig {
        backbone: tiny_backbone(),
        ..DescriptorNetConfig::desk()
    };
    let scaling = InputScaling {
        depth_mean: 0.45,
        depth_std: 0.05,
    };
    DescriptorNet::new(cfg, scaling, 99)
        .unwrap()
        .save(&other, &BTreeMap::new())
        .unwrap();
    assert!(PolicyNet::load(&ckpt, Some(&other)).is_err());
}
