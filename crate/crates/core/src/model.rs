//! A small fully convolutional network with two-scale fusion.
//!
//! Three blocks of two 3x3 convolutions with ReLU, each followed by 2x2 max
//! pooling, bring the input to 1/8 resolution. The deepest map is projected
//! to `fuse_channels` by a 1x1 convolution, upsampled x2 and added to a 1x1
//! projection of the 1/4-resolution block. That sum is the feature map the
//! relational loss sees; a final 1x1 convolution to `K` classes and a x4
//! upsampling give full-resolution logits.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::NamedTensor;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_widths")]
    pub widths: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_fuse")]
    pub fuse_channels: usize,
}

fn default_in_channels() -> usize {
    3
}

fn default_widths() -> [usize; 3] {
    [16, 32, 64]
}

fn default_fuse() -> usize {
    32
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            in_channels: default_in_channels(),
            widths: default_widths(),
            num_classes,
            fuse_channels: default_fuse(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.fuse_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Param(format!("channel counts must be positive: {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(Error::Param(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    /// Name and `[k, k, cin, cout]` kernel shape of every convolution, in
    /// parameter order. Each kernel is followed by its bias.
    pub fn layers(&self) -> Vec<(String, [usize; 4])> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (b, &width) in self.widths.iter().enumerate() {
            for c in 0..2 {
                out.push((format!("block{}.conv{}", b + 1, c + 1), [3, 3, cin, width]));
                cin = width;
            }
        }
        out.push(("fuse.deep".into(), [1, 1, self.widths[2], self.fuse_channels]));
        out.push(("fuse.skip".into(), [1, 1, self.widths[1], self.fuse_channels]));
        out.push(("classifier".into(), [1, 1, self.fuse_channels, self.num_classes]));
        out
    }
}

/// Network parameters: for every layer of [`ModelConfig::layers`], its
/// kernel then its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<F = f32> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> Weights<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        for (_, dims) in config.layers() {
            tensors.push(Tensor::zeros(&dims));
            tensors.push(Tensor::zeros(&[dims[3]]));
        }
        Self {
            config: config.clone(),
            tensors,
        }
    }

    /// Parameter names in tensor order, e.g. `block1.conv1.weight`.
    pub fn names(&self) -> Vec<String> {
        self.config
            .layers()
            .into_iter()
            .flat_map(|(n, _)| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }

    pub fn cast<G: Real>(&self) -> Weights<G> {
        Weights {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Adds every tensor to `graph` as a leaf.
    pub fn register(&self, graph: &mut Graph<F>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.leaf(t.clone(), trainable)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

impl Weights<f32> {
    pub fn to_checkpoint(&self) -> Vec<NamedTensor> {
        self.names()
            .into_iter()
            .zip(&self.tensors)
            .map(|(name, t)| NamedTensor {
                name,
                tensor: t.clone(),
            })
            .collect()
    }

    /// Rebuilds weights from checkpoint tensors, reading the architecture
    /// off their shapes.
    pub fn from_checkpoint(tensors: Vec<NamedTensor>) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor<f32>> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| &t.tensor)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        let out_channels = |name: &str| -> Result<usize> {
            let t = find(name)?;
            match t.dims() {
                [_, _, _, c] => Ok(*c),
                d => Err(Error::Format(format!("{name} has rank {} instead of 4", d.len()))),
            }
        };
        let first = find("block1.conv1.weight")?;
        if first.rank() != 4 {
            return Err(Error::Format("block1.conv1.weight must have rank 4".into()));
        }
        let config = ModelConfig {
            in_channels: first.dims()[2],
            widths: [
                out_channels("block1.conv1.weight")?,
                out_channels("block2.conv1.weight")?,
                out_channels("block3.conv1.weight")?,
            ],
            num_classes: out_channels("classifier.weight")?,
            fuse_channels: out_channels("fuse.deep.weight")?,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut weights = Weights::zeros(&config);
        let names = weights.names();
        if tensors.len() != names.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, the architecture needs {}",
                tensors.len(),
                names.len()
            )));
        }
        for (slot, name) in weights.tensors.iter_mut().zip(&names) {
            let t = find(name)?;
            if t.dims() != slot.dims() {
                return Err(Error::Format(format!(
                    "{name} has dims {:?}, expected {:?}",
                    t.dims(),
                    slot.dims()
                )));
            }
            *slot = t.clone();
        }
        Ok(weights)
    }
}

/// Glorot-uniform kernels, zero biases. Fan-in and fan-out count the kernel
/// window: `k * k * cin` and `k * k * cout`.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<Weights<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Weights::zeros(config);
    for (i, (_, [k, _, cin, cout])) in config.layers().into_iter().enumerate() {
        let bound = (6.0 / ((k * k * cin + k * k * cout) as f64)).sqrt() as f32;
        for v in weights.tensors[2 * i].data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    }
    Ok(weights)
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[H, W, K]` class scores.
    pub logits: Var,
    /// `[H/4, W/4, fuse_channels]` fused features.
    pub features: Var,
}

/// Records the network on `graph` for an `[H, W, C]` input node.
pub fn forward<F: Real>(graph: &mut Graph<F>, image: Var, config: &ModelConfig, params: &[Var]) -> Result<ModelOutput> {
    let (h, w, c) = graph.value(image).hwc()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(shape_err!("input {w}x{h} is not divisible by 8"));
    }
    if c != config.in_channels {
        return Err(shape_err!("input has {c} channels, model expects {}", config.in_channels));
    }
    let n_layers = config.layers().len();
    if params.len() != 2 * n_layers {
        return Err(shape_err!("{} parameter tensors, expected {}", params.len(), 2 * n_layers));
    }
    let conv = |g: &mut Graph<F>, x: Var, layer: usize| g.conv2d(x, params[2 * layer], params[2 * layer + 1]);

    let mut x = image;
    let mut block_out = Vec::with_capacity(3);
    for b in 0..3 {
        for c in 0..2 {
            x = conv(graph, x, 2 * b + c)?;
            x = graph.relu(x);
        }
        x = graph.maxpool2(x)?;
        block_out.push(x);
    }
    let deep = conv(graph, block_out[2], 6)?;
    let deep = graph.upsample_bilinear(deep, 2)?;
    let skip = conv(graph, block_out[1], 7)?;
    let features = graph.add(deep, skip)?;
    let scores = conv(graph, features, 8)?;
    let logits = graph.upsample_bilinear(scores, 4)?;
    Ok(ModelOutput { logits, features })
}

/// Inference-only logits for an `[H, W, C]` image tensor.
pub fn predict_logits(weights: &Weights<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let params = weights.register(&mut g, false);
    let out = forward(&mut g, x, &weights.config, &params)?;
    Ok(g.value(out.logits).clone())
}

/// Per-pixel softmax of `[H, W, K]` logits, computed in `f64`.
pub fn softmax(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, k) = logits.hwc()?;
    let mut out = Vec::with_capacity(logits.len());
    let mut row = vec![0.0f64; k];
    for px in logits.data().chunks(k) {
        let m = px.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut z = 0.0;
        for (r, &v) in row.iter_mut().zip(px) {
            *r = (v as f64 - m).exp();
            z += *r;
        }
        out.extend(row.iter().map(|&r| (r / z) as f32));
    }
    Tensor::new(logits.dims().to_vec(), out)
}

/// `[H, W, 3]` tensor with values scaled to `[0, 1]`.
pub fn image_to_tensor(image: &RgbImage) -> Tensor<f32> {
    let (w, h) = image.dimensions();
    let data = image.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("rgb buffer")
}
