//! Dense per-pixel descriptor network, its contrastive loss and training loop.

mod loss;
mod train;

pub use loss::{contrastive_loss, contrastive_loss_with_grad, ContrastiveLoss, LossGradient, NonMatchNormalization};
pub use train::{evaluate_loss, train_descriptor, DescriptorTrainConfig, TrainLogEntry, TrainOutcome, ViewSelection};

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Error, Result};
use crate::geometry::Pixel;
use crate::grid::Grid;
use crate::nn::{
    safetensors_metadata, Backbone, BackboneConfig, ConvSpec, Graph, Init, ParamId, ParamStore, Tensor, Var,
};
use crate::render::RGBDFrame;

pub const CHECKPOINT_FORMAT: &str = "cods-descriptor";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which frame channels feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Depth,
    Rgb,
    Rgbd,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Depth => 1,
            InputMode::Rgb => 3,
            InputMode::Rgbd => 4,
        }
    }

    pub fn from_channels(channels: usize) -> Result<InputMode> {
        match channels {
            1 => Ok(InputMode::Depth),
            3 => Ok(InputMode::Rgb),
            4 => Ok(InputMode::Rgbd),
            n => Err(config_err!("input_channels must be 1, 3 or 4, got {n}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorNetConfig {
    pub input_channels: usize,
    pub descriptor_dim: usize,
    pub margin: f64,
    pub backbone: BackboneConfig,
}

impl DescriptorNetConfig {
    /// Full-width 34-layer backbone, RGB-D input, 8-dimensional descriptors.
    pub fn paper() -> DescriptorNetConfig {
        DescriptorNetConfig {
            input_channels: 4,
            descriptor_dim: 8,
            margin: 0.5,
            backbone: BackboneConfig::resnet34(),
        }
    }

    /// Same depth with narrow layers for CPU training.
    pub fn desk() -> DescriptorNetConfig {
        DescriptorNetConfig {
            backbone: BackboneConfig::resnet34_narrow(),
            ..DescriptorNetConfig::paper()
        }
    }

    pub fn input_mode(&self) -> Result<InputMode> {
        InputMode::from_channels(self.input_channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.input_mode()?;
        if self.descriptor_dim < 2 {
            return Err(config_err!("descriptor_dim must be at least 2"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(config_err!("margin must be positive"));
        }
        self.backbone.validate()
    }
}

/// Normalization of network inputs: RGB is divided by 255 and depth standardized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub depth_mean: f64,
    pub depth_std: f64,
}

impl InputScaling {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_std > 0.0 && self.depth_std.is_finite() && self.depth_mean.is_finite()) {
            return Err(config_err!("depth scaling needs finite mean and positive std"));
        }
        Ok(())
    }

    /// Builds the C×H×W network input. Pixels without depth get the standardized value 0.
    pub fn prepare(&self, frame: &RGBDFrame, mode: InputMode) -> Tensor {
        let (w, h) = (frame.width(), frame.height());
        let mut t = Tensor::zeros(mode.channels(), h, w);
        let plane = w * h;
        if matches!(mode, InputMode::Rgb | InputMode::Rgbd) {
            for (i, px) in frame.rgb.as_slice().iter().enumerate() {
                for c in 0..3 {
                    t.data[c * plane + i] = px[c] as f32 / 255.0;
                }
            }
        }
        if matches!(mode, InputMode::Depth | InputMode::Rgbd) {
            let ch = mode.channels() - 1;
            for (i, d) in frame.depth.as_slice().iter().enumerate() {
                if *d > 0.0 {
                    t.data[ch * plane + i] = ((d - self.depth_mean) / self.depth_std) as f32;
                }
            }
        }
        t
    }
}

/// H×W×D descriptor field stored pixel-major in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl DescriptorMap {
    pub fn zeros(width: usize, height: usize, dim: usize) -> DescriptorMap {
        DescriptorMap {
            width,
            height,
            dim,
            values: vec![0.0; width * height * dim],
        }
    }

    /// Converts a D×H×W network output.
    pub fn from_tensor(t: &Tensor) -> DescriptorMap {
        let [d, h, w] = t.shape();
        let mut m = DescriptorMap::zeros(w, h, d);
        let plane = h * w;
        for k in 0..d {
            for i in 0..plane {
                m.values[i * d + k] = t.data[k * plane + i] as f64;
            }
        }
        m
    }

    /// Converts a gradient with this map's layout back to D×H×W.
    pub fn to_tensor(&self, values: &[f64]) -> Tensor {
        let plane = self.width * self.height;
        let mut t = Tensor::zeros(self.dim, self.height, self.width);
        for i in 0..plane {
            for k in 0..self.dim {
                t.data[k * plane + i] = values[i * self.dim + k] as f32;
            }
        }
        t
    }

    /// Uses the world-frame surface point of every pixel as a 3-dimensional descriptor.
    pub fn from_world_coords(frame: &RGBDFrame) -> DescriptorMap {
        let (w, h) = (frame.width(), frame.height());
        let values = frame
            .world_coords
            .as_slice()
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .collect();
        DescriptorMap {
            width: w,
            height: h,
            dim: 3,
            values,
        }
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    #[inline]
    pub(crate) fn offset(&self, p: Pixel) -> usize {
        (p.y as usize * self.width + p.x as usize) * self.dim
    }

    /// Descriptor at `p`; panics when out of bounds.
    #[inline]
    pub fn at(&self, p: Pixel) -> &[f64] {
        let o = self.offset(p);
        &self.values[o..o + self.dim]
    }

    pub fn at_mut(&mut self, p: Pixel) -> &mut [f64] {
        let o = self.offset(p);
        &mut self.values[o..o + self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Population variance over all entries.
    pub fn variance(&self) -> f64 {
        let n = self.values.len().max(1) as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }
}

/// Closest pixel in `map_b` to the descriptor at `u_a`, with the full distance heatmap.
/// Ties go to the first pixel in row-major order.
pub fn best_match(map_a: &DescriptorMap, u_a: Pixel, map_b: &DescriptorMap) -> Result<(Pixel, Grid<f64>)> {
    if !map_a.contains(u_a) {
        return Err(domain_err!("pixel ({}, {}) outside the descriptor map", u_a.x, u_a.y));
    }
    if map_a.dim != map_b.dim {
        return Err(domain_err!(
            "descriptor dimensions differ: {} vs {}",
            map_a.dim,
            map_b.dim
        ));
    }
    let query = map_a.at(u_a);
    let dim = map_b.dim;
    let mut best = (0usize, f64::INFINITY);
    let dists: Vec<f64> = map_b
        .values
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, v)| {
            let d = v.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if d < best.1 {
                best = (i, d);
            }
            d
        })
        .collect();
    let heat = Grid::from_vec(map_b.width, map_b.height, dists);
    let (x, y) = heat.coords(best.0);
    Ok((Pixel::new(x as i32, y as i32), heat))
}

/// Intermediate backbone feature maps at strides 2, 4, 8, 8.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    stages: [Tensor; 4],
}

impl StageOutputs {
    pub const STRIDES: [usize; 4] = [2, 4, 8, 8];

    pub fn stages(&self) -> &[Tensor; 4] {
        &self.stages
    }

    pub fn into_stages(self) -> [Tensor; 4] {
        self.stages
    }
}

/// Backbone, 1×1 projection to D channels and bilinear upsampling to input size.
#[derive(Debug, Clone)]
pub struct DescriptorNet {
    pub config: DescriptorNetConfig,
    pub scaling: InputScaling,
    pub store: ParamStore,
    backbone: Backbone,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Symbolic outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub descriptors: Var,
    pub stages: [Var; 4],
}

impl DescriptorNet {
    pub fn new(config: DescriptorNetConfig, scaling: InputScaling, seed: u64) -> Result<DescriptorNet> {
        config.validate()?;
        scaling.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(
            &mut store,
            "backbone",
            config.input_channels,
            &config.backbone,
            &mut rng,
        );
        let cin = config.backbone.stage_channels()[3];
        let d = config.descriptor_dim;
        let head_weight = store.add("head.weight", &[d, cin, 1, 1], Init::Uniform { fan_in: cin }, &mut rng);
        let head_bias = store.add("head.bias", &[d], Init::Constant(0.0), &mut rng);
        Ok(DescriptorNet {
            config,
            scaling,
            store,
            backbone,
            head_weight,
            head_bias,
        })
    }

    pub fn input_mode(&self) -> InputMode {
        InputMode::from_channels(self.config.input_channels).expect("validated at construction")
    }

    pub fn prepare_input(&self, frame: &RGBDFrame) -> Tensor {
        self.scaling.prepare(frame, self.input_mode())
    }

    /// Records the forward pass of an already-scaled input on `g`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ForwardVars> {
        let [c, h, w] = g.value(x).shape();
        if c != self.config.input_channels {
            return Err(config_err!(
                "network expects {} input channels, got {c}",
                self.config.input_channels
            ));
        }
        if h < 8 || w < 8 {
            return Err(config_err!("input must be at least 8×8, got {w}×{h}"));
        }
        let stages = self.backbone.forward(g, x);
        let coarse = g.conv2d(
            stages[3],
            self.head_weight,
            Some(self.head_bias),
            ConvSpec::new(1, 1, 0, 1),
        );
        let descriptors = g.upsample(coarse, h, w);
        Ok(ForwardVars { descriptors, stages })
    }

    /// Inference on a scaled C×H×W tensor.
    pub fn forward_tensor(&self, input: Tensor) -> Result<(DescriptorMap, StageOutputs)> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(input);
        let out = self.forward(&mut g, x)?;
        let map = DescriptorMap::from_tensor(g.value(out.descriptors));
        let stages = out.stages.map(|s| g.take_value(s));
        Ok((map, StageOutputs { stages }))
    }

    /// Inference on a rendered frame.
    pub fn describe(&self, frame: &RGBDFrame) -> Result<(DescriptorMap, StageOutputs)> {
        self.forward_tensor(self.prepare_input(frame))
    }

    fn metadata(&self, extra: &BTreeMap<String, String>) -> Result<BTreeMap<String, String>> {
        let json = |e: serde_json::Error| Error::Format(e.to_string());
        let mut meta = extra.clone();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("version".into(), CHECKPOINT_VERSION.to_string());
        meta.insert("config".into(), serde_json::to_string(&self.config).map_err(json)?);
        meta.insert("scaling".into(), serde_json::to_string(&self.scaling).map_err(json)?);
        Ok(meta)
    }

    /// Writes weights, config and scaling plus `extra` metadata as one safetensors file.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let bytes = self.store.to_safetensors(&self.metadata(extra)?)?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written by [`DescriptorNet::save`]; returns the net and all metadata.
    pub fn load(path: &Path) -> Result<(DescriptorNet, BTreeMap<String, String>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(DescriptorNet, BTreeMap<String, String>)> {
        let meta = safetensors_metadata(bytes)?;
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Format("not a descriptor checkpoint".into()));
        }
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
        };
        let json = |e: serde_json::Error| Error::Format(e.to_string());
        let config: DescriptorNetConfig = serde_json::from_str(field("config")?).map_err(json)?;
        let scaling: InputScaling = serde_json::from_str(field("scaling")?).map_err(json)?;
        let mut net = DescriptorNet::new(config, scaling, 0)?;
        net.store.load_safetensors(bytes)?;
        Ok((net, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_config(channels: usize) -> DescriptorNetConfig {
        DescriptorNetConfig {
            input_channels: channels,
            descriptor_dim: 8,
            margin: 0.5,
            backbone: BackboneConfig {
                stem_width: 4,
                widths: [4, 8, 8, 8],
                blocks: [1, 1, 1, 1],
            },
        }
    }

    const SCALING: InputScaling = InputScaling {
        depth_mean: 0.7,
        depth_std: 0.1,
    };

    fn random_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_matches_input_size_with_four_stages() {
        let net = DescriptorNet::new(tiny_config(4), SCALING, 1).unwrap();
        let (map, stages) = net.forward_tensor(random_input(4, 64, 48, 0)).unwrap();
        assert_eq!((map.width, map.height, map.dim), (48, 64, 8));
        assert!(map.all_finite());
        let shapes: Vec<[usize; 3]> = stages.stages().iter().map(|t| t.shape()).collect();
        for (s, stride) in shapes.iter().zip(StageOutputs::STRIDES) {
            assert_eq!((s[1], s[2]), (64 / stride, 48 / stride));
        }
    }

    #[test]
    fn inference_is_bit_identical() {
        let net = DescriptorNet::new(tiny_config(3), SCALING, 2).unwrap();
        let a = net.forward_tensor(random_input(3, 32, 32, 5)).unwrap();
        let b = net.forward_tensor(random_input(3, 32, 32, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let net = DescriptorNet::new(tiny_config(1), SCALING, 0).unwrap();
        let err = net.forward_tensor(random_input(3, 32, 32, 0)).unwrap_err();
        assert_eq!(err.kind(), "config");
        assert!(DescriptorNet::new(tiny_config(2), SCALING, 0).is_err());
        let mut bad = tiny_config(4);
        bad.descriptor_dim = 1;
        assert!(DescriptorNet::new(bad, SCALING, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.safetensors");
        let net = DescriptorNet::new(tiny_config(4), SCALING, 3).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("note".to_string(), "x".to_string());
        net.save(&path, &extra).unwrap();
        let (back, meta) = DescriptorNet::load(&path).unwrap();
        assert_eq!(back.store, net.store);
        assert_eq!(back.config, net.config);
        assert_eq!(meta["note"], "x");
        let input = random_input(4, 32, 32, 9);
        assert_eq!(
            net.forward_tensor(input.clone()).unwrap(),
            back.forward_tensor(input).unwrap()
        );
    }

    #[test]
    fn self_match_returns_the_query_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = DescriptorMap::zeros(9, 7, 3);
        m.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        for (x, y) in [(0, 0), (8, 6), (3, 4)] {
            let (best, heat) = best_match(&m, Pixel::new(x, y), &m).unwrap();
            assert_eq!(best, Pixel::new(x, y));
            assert_eq!(*heat.get(x as usize, y as usize), 0.0);
        }
        // constant map: every pixel ties, first in row-major order wins
        let flat = DescriptorMap::zeros(5, 5, 2);
        assert_eq!(best_match(&flat, Pixel::new(4, 4), &flat).unwrap().0, Pixel::new(0, 0));
        assert!(best_match(&flat, Pixel::new(5, 0), &flat).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn best_match_equals_exhaustive_argmin(seed in 0u64..100_000, qx in 0i32..6, qy in 0i32..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = DescriptorMap::zeros(6, 5, 4);
            let mut b = DescriptorMap::zeros(6, 5, 4);
            a.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            b.values.iter_mut().for_each(|v| *v = (rng.random_range(-4..4) as f64) * 0.25);
            let (best, heat) = best_match(&a, Pixel::new(qx, qy), &b).unwrap();
            let mut oracle = (Pixel::new(0, 0), f64::INFINITY);
            for y in 0..5 {
                for x in 0..6 {
                    let d: f64 = a.at(Pixel::new(qx, qy)).iter().zip(b.at(Pixel::new(x, y))).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                    if d < oracle.1 {
                        oracle = (Pixel::new(x, y), d);
                    }
                }
            }
            prop_assert_eq!(best, oracle.0);
            let min = heat.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(min, *heat.get(best.x as usize, best.y as usize));
        }

        #[test]
        fn tensor_layout_round_trips(c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let t = random_input(c, h, w, seed);
            let m = DescriptorMap::from_tensor(&t);
            prop_assert_eq!(m.to_tensor(&m.values), t);
        }
    }
}
