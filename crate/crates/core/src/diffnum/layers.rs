//! Layer descriptors, parameter storage and sequential chains.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Mode, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    Sigmoid,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Flatten,
    /// Per-sample reshape; the batch axis is kept.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn conv3x3(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::Conv { in_ch, out_ch, kernel: 3, stride: 1, padding: 1 }
    }

    /// Stride-2 transposed convolution that exactly doubles the spatial size.
    pub fn upsample3x3(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::ConvTranspose { in_ch, out_ch, kernel: 3, stride: 2, padding: 1, output_padding: 1 }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm { channels, eps: BN_EPS, momentum: BN_MOMENTUM }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::ConvTranspose { .. } => "conv_transpose",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Output shape for a batched input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::shape(format!("layer {}", self.name()), &expected, input);
        match *self {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, padding } => {
                let [n, c, h, w] = *input else { return Err(mismatch(vec![0, in_ch, 0, 0])) };
                let out = |v: usize| (v + 2 * padding).checked_sub(kernel).map(|r| r / stride + 1);
                match (c == in_ch && stride > 0, out(h), out(w)) {
                    (true, Some(oh), Some(ow)) => Ok(vec![n, out_ch, oh, ow]),
                    _ => Err(mismatch(vec![n, in_ch, h, w])),
                }
            }
            LayerSpec::ConvTranspose { in_ch, out_ch, kernel, stride, padding, output_padding } => {
                let [n, c, h, w] = *input else { return Err(mismatch(vec![0, in_ch, 0, 0])) };
                let out = |v: usize| {
                    v.checked_sub(1)
                        .and_then(|v| (v * stride + kernel + output_padding).checked_sub(2 * padding))
                };
                match (c == in_ch, out(h), out(w)) {
                    (true, Some(oh), Some(ow)) => Ok(vec![n, out_ch, oh, ow]),
                    _ => Err(mismatch(vec![n, in_ch, h, w])),
                }
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if input.len() >= 2 && input[1] == channels {
                    Ok(input.to_vec())
                } else {
                    let mut e = input.to_vec();
                    e.resize(e.len().max(2), 0);
                    e[1] = channels;
                    Err(mismatch(e))
                }
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::MaxPool { kernel, stride } => {
                let [n, c, h, w] = *input else { return Err(mismatch(vec![0, 0, kernel, kernel])) };
                if stride == 0 || h < kernel || w < kernel {
                    return Err(mismatch(vec![n, c, kernel, kernel]));
                }
                Ok(vec![n, c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Dense { in_features, out_features } => match *input {
                [n, f] if f == in_features => Ok(vec![n, out_features]),
                _ => Err(mismatch(vec![input.first().copied().unwrap_or(0), in_features])),
            },
            LayerSpec::Flatten => match input.split_first() {
                Some((n, rest)) => Ok(vec![*n, rest.iter().product()]),
                None => Err(mismatch(vec![0])),
            },
            LayerSpec::Reshape { ref shape } => {
                let per: usize = input.iter().skip(1).product();
                if input.is_empty() || per != shape.iter().product::<usize>() {
                    let mut e = vec![input.first().copied().unwrap_or(0)];
                    e.extend(shape);
                    return Err(mismatch(e));
                }
                let mut out = vec![input[0]];
                out.extend(shape);
                Ok(out)
            }
        }
    }

    /// (name, shape) of trainable tensors.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                vec![("weight", vec![out_ch, in_ch, kernel, kernel]), ("bias", vec![out_ch])]
            }
            LayerSpec::ConvTranspose { in_ch, out_ch, kernel, .. } => {
                vec![("weight", vec![in_ch, out_ch, kernel, kernel]), ("bias", vec![out_ch])]
            }
            LayerSpec::BatchNorm { channels, .. } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            LayerSpec::Dense { in_features, out_features } => {
                vec![("weight", vec![out_features, in_features]), ("bias", vec![out_features])]
            }
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_ch, kernel, .. } | LayerSpec::ConvTranspose { in_ch, kernel, .. } => {
                in_ch * kernel * kernel
            }
            LayerSpec::Dense { in_features, .. } => in_features,
            _ => 1,
        }
    }
}

/// Named trainable tensors and non-trainable buffers of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|(_, t)| t)
    }

    /// Records every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|(_, t)| graph.input(t.clone())).collect()
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|(_, t)| graph.constant(t.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }
}

/// A layer instance: its descriptor plus indices into a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    params: Vec<usize>,
    buffers: Vec<usize>,
}

impl Layer {
    /// Applies the layer to `x` on `graph`. In train mode batch norm
    /// updates its running buffers in `store`.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &[NodeId],
        buffers: &mut [(String, Tensor)],
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let in_shape = graph.value(x).shape().to_vec();
        let expected = self.spec.output_shape(&in_shape)?;
        let p = |i: usize| bound[self.params[i]];
        let out = match self.spec {
            LayerSpec::Conv { stride, padding, .. } => graph.conv2d(x, p(0), p(1), stride, padding)?,
            LayerSpec::ConvTranspose { stride, padding, output_padding, .. } => {
                graph.conv_transpose2d(x, p(0), p(1), stride, padding, output_padding)?
            }
            LayerSpec::BatchNorm { eps, momentum, .. } => {
                let (mi, vi) = (self.buffers[0], self.buffers[1]);
                match mode {
                    Mode::Eval => {
                        let (m, v) = (buffers[mi].1.data().to_vec(), buffers[vi].1.data().to_vec());
                        graph.batch_norm(x, p(0), p(1), eps, Some((&m, &v)))?.0
                    }
                    Mode::Train => {
                        let (y, stats) = graph.batch_norm(x, p(0), p(1), eps, None)?;
                        let stats = stats.expect("train mode yields batch statistics");
                        for (buf, fresh) in [(mi, &stats.mean), (vi, &stats.var)] {
                            buffers[buf]
                                .1
                                .data_mut()
                                .iter_mut()
                                .zip(fresh)
                                .for_each(|(r, f)| *r = (1.0 - momentum) * *r + momentum * f);
                        }
                        y
                    }
                }
            }
            LayerSpec::Relu => graph.relu(x)?,
            LayerSpec::Sigmoid => graph.sigmoid(x)?,
            LayerSpec::MaxPool { kernel, stride } => graph.max_pool2d(x, kernel, stride)?,
            LayerSpec::Dense { .. } => graph.dense(x, p(0), p(1))?,
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => graph.reshape(x, &expected)?,
        };
        debug_assert_eq!(graph.value(out).shape(), &expected[..]);
        Ok(out)
    }
}

/// Ordered chain of layers sharing one [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    /// Appends layers to `store`, initializing weights with seeded Kaiming
    /// uniform scaling and zero biases; batch norm starts at identity.
    pub fn build(prefix: &str, specs: &[LayerSpec], store: &mut ParamStore, seed: u64) -> Self {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let mut r = rng::stream(seed, Stream::Init, prefix_hash(prefix), i as u64);
            let bound = (6.0 / spec.fan_in() as f64).sqrt();
            let mut params = Vec::new();
            for (name, shape) in spec.param_shapes() {
                let mut t = Tensor::zeros(&shape);
                match name {
                    "weight" => t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-bound..bound)),
                    "gamma" => t.data_mut().fill(1.0),
                    _ => {}
                }
                params.push(store.params.len());
                store.params.push((format!("{prefix}.{i}.{name}"), t));
            }
            let mut buffers = Vec::new();
            if let LayerSpec::BatchNorm { channels, .. } = spec {
                for (name, init) in [("running_mean", 0.0), ("running_var", 1.0)] {
                    buffers.push(store.buffers.len());
                    store.buffers.push((format!("{prefix}.{i}.{name}"), Tensor::full(&[*channels], init)));
                }
            }
            layers.push(Layer { spec: spec.clone(), params, buffers });
        }
        Self { layers }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(input.to_vec(), |s, l| l.spec.output_shape(&s))
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &[NodeId],
        buffers: &mut [(String, Tensor)],
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(graph, bound, buffers, h, mode))
    }

    /// Gradient-free evaluation.
    pub fn run(&self, store: &mut ParamStore, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, &bound, &mut store.buffers, x, mode)?;
        Ok(g.value(y).clone())
    }
}

fn prefix_hash(prefix: &str) -> u64 {
    prefix.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
