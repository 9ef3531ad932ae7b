//! Minimal f32 neural-network engine: tensors, a reverse-mode tape, the layers the
//! descriptor and policy networks need, Adam, and safetensors checkpoints.

mod graph;
mod optim;
mod params;
mod resnet;
mod tensor;

pub use graph::{ConvSpec, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{safetensors_metadata, Grads, Init, Param, ParamId, ParamStore};
pub use resnet::{norm_groups, Backbone, BackboneConfig, ConvNorm};
pub use tensor::Tensor;
