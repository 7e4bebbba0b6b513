//! Encoder-decoder segmentation network assembled from the tensor ops.
//!
//! Per encoder level: two 3x3 same-padding conv+ReLU blocks, then 2x2 max
//! pooling; channels double per level. The decoder mirrors the encoder with
//! 2x2 up-convolutions, concatenation with the matching encoder output
//! (encoder channels first), and two conv+ReLU blocks. A final 1x1
//! convolution and sigmoid produce a per-pixel foreground probability, so
//! output spatial dims always equal input spatial dims.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Network hyperparameters; fully determines the architecture and the
/// parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of pooling stages.
    pub depth: usize,
    /// Channels at the first encoder level; doubled per level below.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Convolution kernel size (odd).
    pub kernel: usize,
}

impl Default for UNetConfig {
    /// The full-scale configuration used for real 512x512 runs. Desk-scale
    /// tests shrink depth and width instead of changing the architecture.
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 64,
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamKind {
    ConvWeight,
    UpconvWeight,
    Bias,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config(
                "depth must be at least 1 pooling stage".into(),
            ));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Channels at encoder level `l` (level `depth` is the bottleneck).
    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let factor = 1usize << self.depth;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w} must be divisible by 2^depth = {factor}"
            )));
        }
        Ok(())
    }

    /// The parameter list in build (and checkpoint) order.
    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let k = self.kernel;
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>, name: String, cout: usize, cin: usize, k: usize| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, k, k],
                kind: ParamKind::ConvWeight,
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                kind: ParamKind::Bias,
            });
        };

        let mut cin = self.in_channels;
        for l in 0..self.depth {
            let c = self.channels(l);
            conv(&mut specs, format!("enc{l}.conv1"), c, cin, k);
            conv(&mut specs, format!("enc{l}.conv2"), c, c, k);
            cin = c;
        }
        let cb = self.channels(self.depth);
        conv(&mut specs, "bottleneck.conv1".into(), cb, cin, k);
        conv(&mut specs, "bottleneck.conv2".into(), cb, cb, k);

        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            let c_above = self.channels(l + 1);
            specs.push(ParamSpec {
                name: format!("dec{l}.upconv.weight"),
                shape: vec![c_above, c, 2, 2],
                kind: ParamKind::UpconvWeight,
            });
            specs.push(ParamSpec {
                name: format!("dec{l}.upconv.bias"),
                shape: vec![c],
                kind: ParamKind::Bias,
            });
            conv(&mut specs, format!("dec{l}.conv1"), c, 2 * c, k);
            conv(&mut specs, format!("dec{l}.conv2"), c, c, k);
        }

        conv(&mut specs, "head".into(), self.out_channels, self.base_channels, 1);
        specs
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

/// Replays the architecture over existing graph nodes: `param_ids` must
/// follow build order and `input` must be a `[N, in_channels, H, W]` node.
/// [`UNetModel::forward`] uses this with freshly inserted parameter leaves;
/// gradient checks use it to thread externally perturbed parameters.
pub fn record_forward<T: Scalar>(
    config: &UNetConfig,
    graph: &mut Graph<T>,
    param_ids: &[NodeId],
    input: NodeId,
) -> Result<NodeId> {
    let mut cursor = 0usize;
    let mut x = input;
    let mut skips = Vec::with_capacity(config.depth);
    let conv_relu = |graph: &mut Graph<T>, x: NodeId, cursor: &mut usize| -> Result<NodeId> {
        let (w, b) = (param_ids[*cursor], param_ids[*cursor + 1]);
        *cursor += 2;
        let y = graph.conv2d(x, w, b)?;
        graph.relu(y)
    };
    for _ in 0..config.depth {
        x = conv_relu(graph, x, &mut cursor)?;
        x = conv_relu(graph, x, &mut cursor)?;
        skips.push(x);
        x = graph.maxpool2x2(x)?;
    }
    x = conv_relu(graph, x, &mut cursor)?;
    x = conv_relu(graph, x, &mut cursor)?;
    for l in (0..config.depth).rev() {
        let (uw, ub) = (param_ids[cursor], param_ids[cursor + 1]);
        cursor += 2;
        x = graph.upconv2x2(x, uw, ub)?;
        x = graph.concat_channels(skips[l], x)?;
        x = conv_relu(graph, x, &mut cursor)?;
        x = conv_relu(graph, x, &mut cursor)?;
    }
    let (hw, hb) = (param_ids[cursor], param_ids[cursor + 1]);
    cursor += 2;
    x = graph.conv2d(x, hw, hb)?;
    debug_assert_eq!(cursor, param_ids.len());
    graph.sigmoid(x)
}

/// Result of recording a forward pass on a graph.
pub struct ForwardPass {
    pub output: NodeId,
    /// Graph nodes of the model parameters, in build order; gradients are
    /// read back from these after `backward`.
    pub params: Vec<NodeId>,
}

/// The network: an ordered parameter collection plus its configuration.
#[derive(Debug, Clone)]
pub struct UNetModel<T: Scalar = f32> {
    config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> UNetModel<T> {
    /// He-uniform fan-in initialization for conv and upconv weights, zero
    /// biases: weights are drawn from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    /// The same seed always yields bit-identical parameters.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for spec in config.param_specs() {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.kind {
                ParamKind::Bias => vec![T::zero(); numel],
                ParamKind::ConvWeight => {
                    let fan_in = (spec.shape[1] * spec.shape[2] * spec.shape[3]) as f64;
                    let limit = (6.0 / fan_in).sqrt();
                    (0..numel)
                        .map(|_| T::from_f64(rng.random_range(-limit..limit)))
                        .collect()
                }
                ParamKind::UpconvWeight => {
                    let fan_in = (spec.shape[0] * spec.shape[2] * spec.shape[3]) as f64;
                    let limit = (6.0 / fan_in).sqrt();
                    (0..numel)
                        .map(|_| T::from_f64(rng.random_range(-limit..limit)))
                        .collect()
                }
            };
            names.push(spec.name);
            params.push(Tensor::new(spec.shape, data)?.with_requires_grad(true));
        }
        Ok(UNetModel {
            config,
            names,
            params,
        })
    }

    pub(crate) fn from_parts(
        config: UNetConfig,
        names: Vec<String>,
        params: Vec<Tensor<T>>,
    ) -> Self {
        UNetModel {
            config,
            names,
            params,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Records the forward pass on `graph`. The input batch must be
    /// `[N, in_channels, H, W]` with spatial dims divisible by `2^depth`.
    /// Output values are strictly inside (0, 1).
    pub fn forward(&self, graph: &mut Graph<T>, input: Tensor<T>) -> Result<ForwardPass> {
        let [_, c, h, w] = input.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        self.config.validate_input_dims(h, w)?;

        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| graph.leaf(p.clone()))
            .collect::<Result<_>>()?;
        let input_id = graph.leaf(input)?;
        let output = record_forward(&self.config, graph, &param_nodes, input_id)?;
        Ok(ForwardPass {
            output,
            params: param_nodes,
        })
    }
}
