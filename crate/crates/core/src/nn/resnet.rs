//! Dilated residual backbone with output stride 8 and four exposed stages.
//!
//! stem (7×7/2) → stage 1 (stride 2) → max-pool + layer1 → stage 2 (stride 4) →
//! layer2 (stride 2) → stage 3 (stride 8) → layer3 (dilation 2) + layer4 (dilation 4) →
//! stage 4 (stride 8). Batch statistics are unusable at batch size 1, so every
//! convolution is followed by group normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{ConvSpec, Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_width: usize,
    /// Widths of layer1..layer4.
    pub widths: [usize; 4],
    /// Basic blocks per layer; `[3, 4, 6, 3]` is the 34-layer arrangement.
    pub blocks: [usize; 4],
}

impl BackboneConfig {
    pub fn resnet34() -> BackboneConfig {
        BackboneConfig {
            stem_width: 64,
            widths: [64, 128, 256, 512],
            blocks: [3, 4, 6, 3],
        }
    }

    /// Same depth with narrow layers, for CPU-scale experiments.
    pub fn resnet34_narrow() -> BackboneConfig {
        BackboneConfig {
            stem_width: 16,
            widths: [16, 32, 48, 64],
            blocks: [3, 4, 6, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(config_err!("backbone widths and block counts must be positive"));
        }
        Ok(())
    }

    /// Channels of the four stage outputs.
    pub fn stage_channels(&self) -> [usize; 4] {
        [self.stem_width, self.widths[0], self.widths[1], self.widths[3]]
    }
}

/// Group count for group normalization: the largest of 8, 4, 2, 1 dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

/// Convolution followed by group normalization.
#[derive(Debug, Clone)]
pub struct ConvNorm {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub spec: ConvSpec,
    groups: usize,
}

impl ConvNorm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        rng: &mut R,
    ) -> ConvNorm {
        let k = spec.kernel;
        ConvNorm {
            weight: store.add(
                format!("{name}.weight"),
                &[cout, cin, k, k],
                Init::He { fan_in: cin * k * k },
                rng,
            ),
            gamma: store.add(format!("{name}.gn.weight"), &[cout], Init::Constant(1.0), rng),
            beta: store.add(format!("{name}.gn.bias"), &[cout], Init::Constant(0.0), rng),
            spec,
            groups: norm_groups(cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.conv2d(x, self.weight, None, self.spec);
        g.group_norm(y, self.gamma, self.beta, self.groups)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvNorm,
    conv2: ConvNorm,
    shortcut: Option<ConvNorm>,
}

impl BasicBlock {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x),
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: ConvNorm,
    layers: [Vec<BasicBlock>; 4],
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        config: &BackboneConfig,
        rng: &mut R,
    ) -> Backbone {
        let stem = ConvNorm::new(
            store,
            &format!("{prefix}.stem"),
            in_channels,
            config.stem_width,
            ConvSpec::same(7, 2, 1),
            rng,
        );
        // (stride of first block, dilation) per layer
        let layout = [(1, 1), (2, 1), (1, 2), (1, 4)];
        let mut cin = config.stem_width;
        let layers = std::array::from_fn(|li| {
            let (stride, dilation) = layout[li];
            let cout = config.widths[li];
            (0..config.blocks[li])
                .map(|bi| {
                    let name = format!("{prefix}.layer{}.{bi}", li + 1);
                    let s = if bi == 0 { stride } else { 1 };
                    let block_in = if bi == 0 { cin } else { cout };
                    let shortcut = (s != 1 || block_in != cout).then(|| {
                        ConvNorm::new(
                            store,
                            &format!("{name}.down"),
                            block_in,
                            cout,
                            ConvSpec::new(1, s, 0, 1),
                            rng,
                        )
                    });
                    let block = BasicBlock {
                        conv1: ConvNorm::new(
                            store,
                            &format!("{name}.conv1"),
                            block_in,
                            cout,
                            ConvSpec::same(3, s, dilation),
                            rng,
                        ),
                        conv2: ConvNorm::new(
                            store,
                            &format!("{name}.conv2"),
                            cout,
                            cout,
                            ConvSpec::same(3, 1, dilation),
                            rng,
                        ),
                        shortcut,
                    };
                    if bi == 0 {
                        cin = cout;
                    }
                    block
                })
                .collect()
        });
        Backbone {
            config: config.clone(),
            stem,
            layers,
        }
    }

    /// Stage outputs at strides 2, 4, 8, 8.
    pub fn forward(&self, g: &mut Graph, x: Var) -> [Var; 4] {
        let s1 = self.stem.forward(g, x);
        let s1 = g.relu(s1);
        let mut h = g.max_pool(s1);
        for b in &self.layers[0] {
            h = b.forward(g, h);
        }
        let s2 = h;
        for b in &self.layers[1] {
            h = b.forward(g, h);
        }
        let s3 = h;
        for b in self.layers[2].iter().chain(&self.layers[3]) {
            h = b.forward(g, h);
        }
        [s1, s2, s3, h]
    }
}

#[cfg(test)]
mod tests {
    use super::super::tensor::Tensor;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_strides_are_2_4_8_8() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            stem_width: 4,
            widths: [4, 8, 8, 12],
            blocks: [1, 1, 1, 1],
        };
        let net = Backbone::new(&mut store, "b", 3, &cfg, &mut rng);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(3, 64, 48));
        let stages = net.forward(&mut g, x);
        let shapes: Vec<[usize; 3]> = stages.iter().map(|s| g.value(*s).shape()).collect();
        assert_eq!(shapes, vec![[4, 32, 24], [4, 16, 12], [8, 8, 6], [12, 8, 6]]);
        assert_eq!(cfg.stage_channels(), [4, 4, 8, 12]);
    }

    #[test]
    fn resnet34_has_the_expected_convolution_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        Backbone::new(&mut store, "b", 3, &BackboneConfig::resnet34(), &mut rng);
        let convs = store
            .params()
            .iter()
            .filter(|p| {
                p.name.ends_with("conv1.weight") || p.name.ends_with("conv2.weight") || p.name.ends_with("stem.weight")
            })
            .count();
        // 1 stem + 2 per block × 16 blocks
        assert_eq!(convs, 33);
    }
}
