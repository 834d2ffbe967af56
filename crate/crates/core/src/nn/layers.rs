use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{conv_out, deconv_out};
use crate::nn::tape::{BatchStats, BnMode, GradMode, NodeId, Tape};
use crate::nn::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Layer kinds and their hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Deconv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize },
    Relu,
    BatchNorm { features: usize },
    Flatten,
    Unflatten { channels: usize, height: usize, width: usize },
    Crop { height: usize, width: usize },
    Sigmoid,
}

impl LayerSpec {
    /// 3x3, stride 2, padding 1: halves even spatial extents.
    pub fn conv(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel: 3, stride: 2, pad: 1 }
    }

    /// 3x3, stride 2 transposed convolution that exactly doubles extents.
    pub fn deconv(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Deconv2d { in_channels, out_channels, kernel: 3, stride: 2, pad: 1, out_pad: 1 }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    /// Shapes of the trainable parameters, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]]
            }
            LayerSpec::Deconv2d { in_channels, out_channels, kernel, .. } => {
                vec![vec![in_channels, out_channels, kernel, kernel], vec![out_channels]]
            }
            LayerSpec::BatchNorm { features } => vec![vec![features], vec![features]],
            _ => vec![],
        }
    }

    /// Shapes of non-trainable state (batch-norm running statistics).
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::BatchNorm { features } => vec![vec![features], vec![features]],
            _ => vec![],
        }
    }

    /// Output shape for a batched input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::dim(format!("{self:?} cannot take input {input:?}"));
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input.len() != 2 || input[1] != inputs {
                    return Err(bad());
                }
                Ok(vec![input[0], outputs])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad } => {
                if input.len() != 4 || input[1] != in_channels {
                    return Err(bad());
                }
                let h = conv_out(input[2], kernel, stride, pad).ok_or_else(bad)?;
                let w = conv_out(input[3], kernel, stride, pad).ok_or_else(bad)?;
                Ok(vec![input[0], out_channels, h, w])
            }
            LayerSpec::Deconv2d { in_channels, out_channels, kernel, stride, pad, out_pad } => {
                if input.len() != 4 || input[1] != in_channels {
                    return Err(bad());
                }
                let h = deconv_out(input[2], kernel, stride, pad, out_pad).ok_or_else(bad)?;
                let w = deconv_out(input[3], kernel, stride, pad, out_pad).ok_or_else(bad)?;
                Ok(vec![input[0], out_channels, h, w])
            }
            LayerSpec::BatchNorm { features } => {
                if input.len() < 2 || input[1] != features {
                    return Err(bad());
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            LayerSpec::Unflatten { channels, height, width } => {
                if input.len() != 2 || input[1] != channels * height * width {
                    return Err(bad());
                }
                Ok(vec![input[0], channels, height, width])
            }
            LayerSpec::Crop { height, width } => {
                if input.len() != 4 || input[2] < height || input[3] < width {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1], height, width])
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Deconv2d { .. } => "deconv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Unflatten { .. } => "unflatten",
            LayerSpec::Crop { .. } => "crop",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }
}

/// A layer together with its parameters and buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
}

impl Layer {
    /// He-uniform weights, zero biases; batch-norm starts as the identity.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let params = match spec {
            LayerSpec::Dense { inputs, .. } => {
                let shapes = spec.param_shapes();
                let bound = (6.0 / inputs as f32).sqrt();
                vec![Tensor::uniform(&shapes[0], bound, rng), Tensor::zeros(&shapes[1])]
            }
            LayerSpec::Conv2d { in_channels, kernel, .. } | LayerSpec::Deconv2d { in_channels, kernel, .. } => {
                let shapes = spec.param_shapes();
                let bound = (6.0 / (in_channels * kernel * kernel) as f32).sqrt();
                vec![Tensor::uniform(&shapes[0], bound, rng), Tensor::zeros(&shapes[1])]
            }
            LayerSpec::BatchNorm { features } => vec![Tensor::full(&[features], 1.0), Tensor::zeros(&[features])],
            _ => vec![],
        };
        let buffers = match spec {
            LayerSpec::BatchNorm { features } => vec![Tensor::zeros(&[features]), Tensor::full(&[features], 1.0)],
            _ => vec![],
        };
        Self { spec, params, buffers }
    }
}

/// Result of recording a [`Sequential`] on a tape.
#[derive(Debug)]
pub struct ForwardPass {
    pub output: NodeId,
    /// Parameter leaves, in [`Sequential::params`] order.
    pub params: Vec<NodeId>,
    /// Training-mode batch statistics keyed by layer index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOpts {
    /// Batch-norm uses batch statistics when true, running statistics otherwise.
    pub train: bool,
    /// Parameter leaves are differentiable when true.
    pub trainable: bool,
}

impl ForwardOpts {
    pub const TRAIN: ForwardOpts = ForwardOpts { train: true, trainable: true };
    pub const EVAL: ForwardOpts = ForwardOpts { train: false, trainable: false };
    pub const EVAL_TRAINABLE: ForwardOpts = ForwardOpts { train: false, trainable: true };
}

/// Feed-forward stack of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new<R: Rng + ?Sized>(specs: Vec<LayerSpec>, rng: &mut R) -> Self {
        Self { layers: specs.into_iter().map(|s| Layer::init(s, rng)).collect() }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for layer in &layers {
            let want = layer.spec.param_shapes();
            let have: Vec<Vec<usize>> = layer.params.iter().map(|p| p.shape().to_vec()).collect();
            let want_buf = layer.spec.buffer_shapes();
            let have_buf: Vec<Vec<usize>> = layer.buffers.iter().map(|p| p.shape().to_vec()).collect();
            if want != have || want_buf != have_buf {
                return Err(Error::dim(format!("parameters for {:?} have shapes {have:?}/{have_buf:?}", layer.spec)));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(input.to_vec(), |s, l| l.spec.output_shape(&s))
    }

    /// Records the stack on `tape`, starting from node `x`.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, opts: ForwardOpts) -> Result<ForwardPass> {
        if !tape.value(x).is_finite() {
            return Err(Error::numeric("non-finite values in network input"));
        }
        let mut h = x;
        let mut params = Vec::new();
        let mut batch_stats = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let src_shape = tape.shape(h).to_vec();
            layer.spec.output_shape(&src_shape)?;
            let mut leaves = Vec::with_capacity(layer.params.len());
            for p in &layer.params {
                let id = tape.leaf(p.clone(), opts.trainable);
                leaves.push(id);
                params.push(id);
            }
            h = match layer.spec {
                LayerSpec::Dense { .. } => tape.dense(h, leaves[0], Some(leaves[1]))?,
                LayerSpec::Conv2d { stride, pad, .. } => tape.conv2d(h, leaves[0], Some(leaves[1]), stride, pad)?,
                LayerSpec::Deconv2d { stride, pad, out_pad, .. } => {
                    tape.deconv2d(h, leaves[0], Some(leaves[1]), stride, pad, out_pad)?
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::Sigmoid => tape.sigmoid(h),
                LayerSpec::BatchNorm { .. } => {
                    let mode = if opts.train {
                        BnMode::Train { eps: BN_EPS }
                    } else {
                        BnMode::Eval { mean: layer.buffers[0].data(), var: layer.buffers[1].data(), eps: BN_EPS }
                    };
                    let (id, stats) = tape.batch_norm(h, leaves[0], leaves[1], mode)?;
                    if let Some(s) = stats {
                        batch_stats.push((li, s));
                    }
                    id
                }
                LayerSpec::Flatten => {
                    let s = tape.shape(h).to_vec();
                    tape.reshape(h, &[s[0], s[1..].iter().product()])?
                }
                LayerSpec::Unflatten { channels, height, width } => {
                    let n = tape.shape(h)[0];
                    tape.reshape(h, &[n, channels, height, width])?
                }
                LayerSpec::Crop { height, width } => tape.center_crop(h, height, width)?,
            };
        }
        if !tape.value(h).is_finite() {
            return Err(Error::numeric("non-finite values in network output"));
        }
        Ok(ForwardPass { output: h, params, batch_stats })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        for (li, stats) in &pass.batch_stats {
            let layer = &mut self.layers[*li];
            let (mean, var) = layer.buffers.split_at_mut(1);
            for (rm, m) in mean[0].data_mut().iter_mut().zip(&stats.mean) {
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
            }
            for (rv, v) in var[0].data_mut().iter_mut().zip(&stats.var) {
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v;
            }
        }
    }

    /// Eval-mode forward pass without gradient tracking.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.constant(input.clone());
        let pass = self.forward(&mut tape, x, ForwardOpts::EVAL)?;
        Ok(tape.value(pass.output).clone())
    }

    /// `(name, tensor)` pairs for parameters and buffers.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let kind = layer.spec.kind_name();
            let pnames: &[&str] = match layer.spec {
                LayerSpec::BatchNorm { .. } => &["gamma", "beta"],
                _ => &["weight", "bias"],
            };
            for (p, name) in layer.params.iter().zip(pnames) {
                out.push((format!("{prefix}{i}.{kind}.{name}"), p));
            }
            for (b, name) in layer.buffers.iter().zip(["running_mean", "running_var"]) {
                out.push((format!("{prefix}{i}.{kind}.{name}"), b));
            }
        }
        out
    }

    /// Rebuilds a stack from specs and tensors in [`named_tensors`](Self::named_tensors) order.
    pub fn from_specs_and_tensors(specs: Vec<LayerSpec>, tensors: &mut impl Iterator<Item = Tensor>) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let np = spec.param_shapes().len();
            let nb = spec.buffer_shapes().len();
            let params: Vec<Tensor> = tensors.take(np).collect();
            let buffers: Vec<Tensor> = tensors.take(nb).collect();
            if params.len() != np || buffers.len() != nb {
                return Err(Error::dim(format!("not enough tensors for {spec:?}")));
            }
            layers.push(Layer { spec, params, buffers });
        }
        Self::from_layers(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stack_is_identity() {
        let net = Sequential::new(vec![], &mut ChaCha8Rng::seed_from_u64(0));
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -7.0]).unwrap();
        assert_eq!(net.infer(&t).unwrap(), t);
    }

    #[test]
    fn single_relu_layer() {
        let net = Sequential::new(vec![LayerSpec::Relu], &mut ChaCha8Rng::seed_from_u64(0));
        let t = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(net.infer(&t).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_stage_output_shape() {
        let net = Sequential::new(vec![LayerSpec::conv(1, 32)], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.output_shape(&[1, 1, 32, 32]).unwrap(), vec![1, 32, 16, 16]);
        let out = net.infer(&Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        assert_eq!(out.shape(), &[1, 32, 16, 16]);
    }

    #[test]
    fn shape_mismatch_and_nonfinite_inputs_are_rejected() {
        let net = Sequential::new(vec![LayerSpec::dense(4, 2)], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(net.infer(&Tensor::zeros(&[1, 3])), Err(Error::Dimension(_))));
        let bad = Tensor::new(vec![1, 4], vec![0.0, f32::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(net.infer(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn eval_batchnorm_is_deterministic_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Sequential::new(vec![LayerSpec::BatchNorm { features: 2 }], &mut rng);
        net.layers_mut()[0].buffers[0] = Tensor::from_vec(vec![0.5, -1.0]);
        net.layers_mut()[0].buffers[1] = Tensor::from_vec(vec![4.0, 0.25]);
        net.layers_mut()[0].params[0] = Tensor::from_vec(vec![2.0, 1.0]);
        let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        assert_eq!(a, b);
        let s = 1.0 / (4.0f32 + BN_EPS).sqrt();
        assert!((a.data()[0] - 2.0 * (x.data()[0] - 0.5) * s).abs() < 1e-6);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Sequential::new(vec![LayerSpec::BatchNorm { features: 1 }], &mut rng);
        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let pass = net.forward(&mut tape, x, ForwardOpts::TRAIN).unwrap();
        net.update_running_stats(&pass);
        let rm = net.layers()[0].buffers[0].data()[0];
        let rv = net.layers()[0].buffers[1].data()[0];
        assert!((rm - 0.25).abs() < 1e-6);
        // unbiased variance of 1..4 is 5/3
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }
}
