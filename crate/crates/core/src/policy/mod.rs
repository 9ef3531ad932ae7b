//! Picking network: optional frozen descriptor stream, optional trainable stream, U-Net
//! decoder to per-pixel logits and a value head at the bottleneck.

mod action;
mod train;

pub use action::{
    entropy, masked_softmax, select_action, surrogate_loss, PolicyObjective, SelectionMode, SurrogateConfig,
    SurrogateLoss, SurrogateSample,
};
pub use train::{
    curve_csv, discounted_returns, parse_curve_csv, train_policy, CurvePoint, PolicyTrainConfig, PolicyTrainOutcome,
    CURVE_CSV_HEADER,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::DescriptorNet;
use crate::error::{config_err, Error, Result};
use crate::grid::Grid;
use crate::nn::{
    norm_groups, safetensors_metadata, Backbone, BackboneConfig, ConvNorm, ConvSpec, Graph, Init, ParamId, ParamStore,
    Tensor, Var,
};
use crate::render::RGBDFrame;
use crate::scenegen::sha256_hex;

pub const POLICY_CHECKPOINT_FORMAT: &str = "cods-policy";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Frozen descriptor stages and a trainable depth stream.
    CodsPlusDepth,
    DepthOnly,
    /// Frozen descriptor stages only; the decoder is trained.
    CodsOnly,
    /// The final descriptor map fed to a trainable encoder.
    DirectCods,
}

impl PolicyVariant {
    pub const ALL: [PolicyVariant; 4] = [
        PolicyVariant::CodsPlusDepth,
        PolicyVariant::DepthOnly,
        PolicyVariant::CodsOnly,
        PolicyVariant::DirectCods,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyVariant::CodsPlusDepth => "cods_plus_depth",
            PolicyVariant::DepthOnly => "depth_only",
            PolicyVariant::CodsOnly => "cods_only",
            PolicyVariant::DirectCods => "direct_cods",
        }
    }

    pub fn needs_cods(self) -> bool {
        self != PolicyVariant::DepthOnly
    }

    fn uses_cods_stages(self) -> bool {
        matches!(self, PolicyVariant::CodsPlusDepth | PolicyVariant::CodsOnly)
    }

    fn has_stream(self) -> bool {
        self != PolicyVariant::CodsOnly
    }
}

impl std::str::FromStr for PolicyVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PolicyVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err!("unknown policy variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyNetConfig {
    pub variant: PolicyVariant,
    /// Descriptor checkpoint; required by every variant except `depth_only`.
    pub cods_checkpoint: Option<PathBuf>,
    /// Trainable encoder (depth stream, or descriptor-map encoder for `direct_cods`).
    pub stream_backbone: BackboneConfig,
    /// Decoder width at the bottleneck; halves at every up step.
    pub bottleneck_width: usize,
    pub value_hidden: usize,
    pub observation_size: u32,
    /// Standardization of the depth stream input.
    pub depth_mean: f64,
    pub depth_std: f64,
}

impl PolicyNetConfig {
    pub fn paper(variant: PolicyVariant, cods_checkpoint: Option<PathBuf>) -> PolicyNetConfig {
        PolicyNetConfig {
            variant,
            cods_checkpoint,
            stream_backbone: BackboneConfig::resnet34(),
            bottleneck_width: 256,
            value_hidden: 256,
            observation_size: 128,
            depth_mean: 0.45,
            depth_std: 0.05,
        }
    }

    pub fn desk(variant: PolicyVariant, cods_checkpoint: Option<PathBuf>) -> PolicyNetConfig {
        PolicyNetConfig {
            stream_backbone: BackboneConfig {
                stem_width: 16,
                widths: [16, 32, 48, 64],
                blocks: [1, 1, 1, 1],
            },
            bottleneck_width: 64,
            value_hidden: 64,
            observation_size: 64,
            ..PolicyNetConfig::paper(variant, cods_checkpoint)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.needs_cods() && self.cods_checkpoint.is_none() {
            return Err(config_err!(
                "variant {} needs a descriptor checkpoint",
                self.variant.name()
            ));
        }
        if self.bottleneck_width < 16 || self.value_hidden == 0 {
            return Err(config_err!(
                "bottleneck_width must be at least 16 and value_hidden positive"
            ));
        }
        if self.observation_size < 8 {
            return Err(config_err!("observation_size must be at least 8"));
        }
        if !(self.depth_std > 0.0) {
            return Err(config_err!("depth_std must be positive"));
        }
        self.stream_backbone.validate()
    }

    /// Decoder widths from the bottleneck to full resolution.
    pub fn decoder_widths(&self) -> [usize; 5] {
        let b = self.bottleneck_width;
        [b, b / 2, b / 4, b / 8, (b / 16).max(4)]
    }
}

/// Network-ready tensors of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    /// Frozen descriptor stage outputs.
    pub cods_stages: Option<[Tensor; 4]>,
    /// Input of the trainable encoder.
    pub stream_input: Option<Tensor>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Grid<f64>,
    pub value: f64,
}

#[derive(Debug, Clone)]
struct Decoder {
    bottleneck: ConvNorm,
    up: [ConvNorm; 4],
    head_weight: ParamId,
    head_bias: ParamId,
    value_w1: ParamId,
    value_b1: ParamId,
    value_w2: ParamId,
    value_b2: ParamId,
}

/// Symbolic outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PolicyVars {
    pub logits: Var,
    pub value: Var,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub config: PolicyNetConfig,
    /// Trainable parameters only.
    pub store: ParamStore,
    cods: Option<Arc<DescriptorNet>>,
    cods_sha256: Option<String>,
    stream: Option<Backbone>,
    decoder: Decoder,
}

impl PolicyNet {
    /// Builds the network, loading the descriptor checkpoint named in the config.
    pub fn from_config(config: PolicyNetConfig, seed: u64) -> Result<PolicyNet> {
        config.validate()?;
        let cods = match &config.cods_checkpoint {
            Some(path) if config.variant.needs_cods() => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let (net, _) = DescriptorNet::from_bytes(&bytes)?;
                Some((Arc::new(net), sha256_hex(&bytes)))
            }
            _ => None,
        };
        Self::new(config, cods, seed)
    }

    /// Builds the network around an already-loaded descriptor net and its checkpoint hash.
    pub fn new(config: PolicyNetConfig, cods: Option<(Arc<DescriptorNet>, String)>, seed: u64) -> Result<PolicyNet> {
        config.validate()?;
        let variant = config.variant;
        if variant.needs_cods() != cods.is_some() {
            return Err(config_err!(
                "variant {} {} a descriptor network",
                variant.name(),
                if variant.needs_cods() { "needs" } else { "does not use" }
            ));
        }
        let (cods, cods_sha256) = match cods {
            Some((n, h)) => (Some(n), Some(h)),
            None => (None, None),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stream_in = match variant {
            PolicyVariant::DirectCods => cods.as_ref().map(|c| c.config.descriptor_dim).unwrap_or(0),
            _ => 1,
        };
        let stream = variant
            .has_stream()
            .then(|| Backbone::new(&mut store, "stream", stream_in, &config.stream_backbone, &mut rng));
        let mut stage_ch = [0usize; 4];
        if variant.uses_cods_stages() {
            let c = cods.as_ref().expect("checked above").config.backbone.stage_channels();
            for i in 0..4 {
                stage_ch[i] += c[i];
            }
        }
        if variant.has_stream() {
            let c = config.stream_backbone.stage_channels();
            for i in 0..4 {
                stage_ch[i] += c[i];
            }
        }
        let w = config.decoder_widths();
        let c3 = ConvSpec::same(3, 1, 1);
        let bottleneck = ConvNorm::new(&mut store, "decoder.bottleneck", stage_ch[3], w[0], c3, &mut rng);
        let up = [
            ConvNorm::new(&mut store, "decoder.up0", w[0] + stage_ch[2], w[1], c3, &mut rng),
            ConvNorm::new(&mut store, "decoder.up1", w[1] + stage_ch[1], w[2], c3, &mut rng),
            ConvNorm::new(&mut store, "decoder.up2", w[2] + stage_ch[0], w[3], c3, &mut rng),
            ConvNorm::new(&mut store, "decoder.up3", w[3], w[4], c3, &mut rng),
        ];
        // zero head: the initial policy is uniform over valid pixels
        let head_weight = store.add("decoder.head.weight", &[1, w[4], 1, 1], Init::Constant(0.0), &mut rng);
        let head_bias = store.add("decoder.head.bias", &[1], Init::Constant(0.0), &mut rng);
        let hdim = config.value_hidden;
        let value_w1 = store.add("value.fc1.weight", &[hdim, w[0]], Init::He { fan_in: w[0] }, &mut rng);
        let value_b1 = store.add("value.fc1.bias", &[hdim], Init::Constant(0.0), &mut rng);
        let value_w2 = store.add("value.fc2.weight", &[1, hdim], Init::Uniform { fan_in: hdim }, &mut rng);
        let value_b2 = store.add("value.fc2.bias", &[1], Init::Constant(0.0), &mut rng);
        debug_assert!(norm_groups(w[4]) >= 1);
        Ok(PolicyNet {
            config,
            store,
            cods,
            cods_sha256,
            stream,
            decoder: Decoder {
                bottleneck,
                up,
                head_weight,
                head_bias,
                value_w1,
                value_b1,
                value_w2,
                value_b2,
            },
        })
    }

    pub fn cods(&self) -> Option<&DescriptorNet> {
        self.cods.as_deref()
    }

    pub fn cods_sha256(&self) -> Option<&str> {
        self.cods_sha256.as_deref()
    }

    /// Scalars in the trainable network.
    pub fn trainable_parameters(&self) -> usize {
        self.store.scalar_count()
    }

    /// Scalars in the frozen descriptor network (0 when absent).
    pub fn frozen_parameters(&self) -> usize {
        self.cods.as_ref().map_or(0, |c| c.store.scalar_count())
    }

    /// Runs the frozen stream and scales the depth input.
    pub fn prepare(&self, frame: &RGBDFrame) -> Result<PolicyInput> {
        let (w, h) = (frame.width(), frame.height());
        let s = self.config.observation_size as usize;
        if (w, h) != (s, s) {
            return Err(config_err!("observation is {w}×{h}, network expects {s}×{s}"));
        }
        let variant = self.config.variant;
        let mut input = PolicyInput {
            cods_stages: None,
            stream_input: None,
            height: h,
            width: w,
        };
        if let Some(cods) = &self.cods {
            let (map, stages) = cods.describe(frame)?;
            if variant.uses_cods_stages() {
                input.cods_stages = Some(stages.into_stages());
            }
            if variant == PolicyVariant::DirectCods {
                input.stream_input = Some(map.to_tensor(&map.values));
            }
        }
        if matches!(variant, PolicyVariant::CodsPlusDepth | PolicyVariant::DepthOnly) {
            let (mean, std) = (self.config.depth_mean, self.config.depth_std);
            let data = frame
                .depth
                .as_slice()
                .iter()
                .map(|d| if *d > 0.0 { ((d - mean) / std) as f32 } else { 0.0 })
                .collect();
            input.stream_input = Some(Tensor::from_vec(1, h, w, data));
        }
        Ok(input)
    }

    /// Records the forward pass on `g`.
    pub fn forward(&self, g: &mut Graph, input: &PolicyInput) -> Result<PolicyVars> {
        let mut parts: [Vec<Var>; 4] = Default::default();
        if self.config.variant.uses_cods_stages() {
            let stages = input
                .cods_stages
                .as_ref()
                .ok_or_else(|| config_err!("input lacks descriptor stages"))?;
            for (i, t) in stages.iter().enumerate() {
                parts[i].push(g.input(t.clone()));
            }
        }
        if let Some(stream) = &self.stream {
            let x = input
                .stream_input
                .as_ref()
                .ok_or_else(|| config_err!("input lacks the stream tensor"))?;
            let x = g.input(x.clone());
            for (i, s) in stream.forward(g, x).into_iter().enumerate() {
                parts[i].push(s);
            }
        }
        let stage: Vec<Var> = parts
            .iter()
            .map(|p| if p.len() == 1 { p[0] } else { g.concat(p) })
            .collect();
        let d = &self.decoder;
        let b = d.bottleneck.forward(g, stage[3]);
        let b = g.relu(b);

        let cat = g.concat(&[b, stage[2]]);
        let h = d.up[0].forward(g, cat);
        let h = g.relu(h);
        let [_, h4, w4] = g.value(stage[1]).shape();
        let h = g.upsample(h, h4, w4);
        let cat = g.concat(&[h, stage[1]]);
        let h = d.up[1].forward(g, cat);
        let h = g.relu(h);
        let [_, h2, w2] = g.value(stage[0]).shape();
        let h = g.upsample(h, h2, w2);
        let cat = g.concat(&[h, stage[0]]);
        let h = d.up[2].forward(g, cat);
        let h = g.relu(h);
        let h = g.upsample(h, input.height, input.width);
        let h = d.up[3].forward(g, h);
        let h = g.relu(h);
        let logits = g.conv2d(h, d.head_weight, Some(d.head_bias), ConvSpec::new(1, 1, 0, 1));

        let pooled = g.global_avg_pool(b);
        let v = g.linear(pooled, d.value_w1, d.value_b1);
        let v = g.relu(v);
        let value = g.linear(v, d.value_w2, d.value_b2);
        Ok(PolicyVars { logits, value })
    }

    pub fn evaluate(&self, input: &PolicyInput) -> Result<PolicyOutput> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, input)?;
        Ok(PolicyOutput {
            logits: logits_grid(g.value(out.logits)),
            value: g.value(out.value).data[0] as f64,
        })
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let json = |e: serde_json::Error| Error::Format(e.to_string());
        let mut meta = extra.clone();
        meta.insert("format".into(), POLICY_CHECKPOINT_FORMAT.into());
        meta.insert(
            "policy_config".into(),
            serde_json::to_string(&self.config).map_err(json)?,
        );
        if let Some(c) = &self.cods {
            meta.insert("cods_config".into(), serde_json::to_string(&c.config).map_err(json)?);
        }
        if let Some(h) = &self.cods_sha256 {
            meta.insert("cods_checkpoint_sha256".into(), h.clone());
        }
        let bytes = self.store.to_safetensors(&meta)?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a policy checkpoint. The descriptor checkpoint comes from `cods_override` or
    /// the stored path and must match the recorded hash.
    pub fn load(path: &Path, cods_override: Option<&Path>) -> Result<(PolicyNet, BTreeMap<String, String>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta = safetensors_metadata(&bytes)?;
        if meta.get("format").map(String::as_str) != Some(POLICY_CHECKPOINT_FORMAT) {
            return Err(Error::Format(format!("{} is not a policy checkpoint", path.display())));
        }
        let raw = meta
            .get("policy_config")
            .ok_or_else(|| Error::Format("policy checkpoint lacks its config".into()))?;
        let mut config: PolicyNetConfig = serde_json::from_str(raw).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(p) = cods_override {
            config.cods_checkpoint = Some(p.to_path_buf());
        }
        let mut net = PolicyNet::from_config(config, 0)?;
        if let (Some(expected), Some(found)) = (meta.get("cods_checkpoint_sha256"), net.cods_sha256()) {
            if expected != found {
                return Err(config_err!(
                    "descriptor checkpoint does not match the one the policy was trained with"
                ));
            }
        }
        net.store.load_safetensors(&bytes)?;
        Ok((net, meta))
    }
}

fn logits_grid(t: &Tensor) -> Grid<f64> {
    Grid::from_vec(t.w, t.h, t.data.iter().map(|v| *v as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{DescriptorNetConfig, InputScaling};

    fn tiny_cods() -> (Arc<DescriptorNet>, String) {
        let cfg = DescriptorNetConfig {
            backbone: BackboneConfig {
                stem_width: 4,
                widths: [4, 8, 8, 8],
                blocks: [1, 1, 1, 1],
            },
            ..DescriptorNetConfig::desk()
        };
        let scaling = InputScaling {
            depth_mean: 0.5,
            depth_std: 0.1,
        };
        (Arc::new(DescriptorNet::new(cfg, scaling, 1).unwrap()), "hash".into())
    }

    fn tiny_config(variant: PolicyVariant) -> PolicyNetConfig {
        PolicyNetConfig {
            stream_backbone: BackboneConfig {
                stem_width: 4,
                widths: [4, 8, 8, 8],
                blocks: [1, 1, 1, 1],
            },
            bottleneck_width: 16,
            value_hidden: 8,
            observation_size: 32,
            ..PolicyNetConfig::desk(variant, variant.needs_cods().then(|| PathBuf::from("unused")))
        }
    }

    fn frame(size: u32) -> RGBDFrame {
        let mut env = crate::binsim::BinEnv::new(crate::binsim::BinEnvConfig {
            image_size: size,
            ..crate::binsim::BinEnvConfig::desk()
        })
        .unwrap();
        env.reset(2).unwrap().clone()
    }

    #[test]
    fn every_variant_produces_full_resolution_logits_and_one_value() {
        let f = frame(32);
        let mut counts = Vec::new();
        for v in PolicyVariant::ALL {
            let cods = v.needs_cods().then(tiny_cods);
            let net = PolicyNet::new(tiny_config(v), cods, 0).unwrap();
            let input = net.prepare(&f).unwrap();
            let out = net.evaluate(&input).unwrap();
            assert_eq!((out.logits.width(), out.logits.height()), (32, 32));
            assert!(out.value.is_finite());
            // zero-initialized head
            assert!(out.logits.as_slice().iter().all(|l| *l == out.logits.as_slice()[0]));
            counts.push(net.trainable_parameters());
        }
        assert_ne!(counts[0], counts[1], "cods_plus_depth and depth_only differ in size");
    }

    #[test]
    fn cods_variants_require_a_checkpoint() {
        let mut cfg = tiny_config(PolicyVariant::CodsPlusDepth);
        cfg.cods_checkpoint = None;
        assert_eq!(PolicyNet::from_config(cfg, 0).unwrap_err().kind(), "config");
        assert!(PolicyNet::new(tiny_config(PolicyVariant::CodsOnly), None, 0).is_err());
        let net = PolicyNet::new(tiny_config(PolicyVariant::DepthOnly), None, 0).unwrap();
        assert_eq!(net.prepare(&frame(16)).unwrap_err().kind(), "config");
    }
}
