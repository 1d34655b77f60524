//! Minimal CNN engine: a sequential network of convolution, pooling, dense and
//! ReLU layers with a softmax cross-entropy head, explicit backward passes and
//! hooks ("taps") that may replace any activation or gradient as it is
//! produced.

mod gemm;
pub mod layers;
pub mod sgd;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use sgd::{lr_at, sgd_step, Sgd, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Valid-padding, stride-1 square convolution.
    Conv2d { out_channels: usize, kernel: usize },
    /// 2x2 max pooling, stride 2.
    MaxPool2x2,
    /// Fully connected; flattens its input.
    Dense { outputs: usize },
    Relu,
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    /// Per-sample input shape.
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Index of the weight tensor; the bias follows it.
    param: Option<usize>,
}

/// Sequential network terminated by softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    param_shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Builds a network for per-sample `input_shape` (`[C, H, W]` or `[D]`),
    /// checking shape compatibility layer by layer.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidNetwork("input shape must be nonempty and positive".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut param_shapes = Vec::new();
        let mut shape = input_shape.to_vec();
        for (i, &spec) in specs.iter().enumerate() {
            let bad = |msg: String| Error::InvalidNetwork(format!("layer {i} ({spec:?}): {msg}"));
            let (out_shape, param) = match spec {
                LayerSpec::Conv2d { out_channels, kernel } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(bad(format!("needs a [C, H, W] input, got {shape:?}")));
                    };
                    if kernel == 0 || kernel > h || kernel > w || out_channels == 0 {
                        return Err(bad(format!("kernel does not fit input {shape:?}")));
                    }
                    param_shapes.push(vec![out_channels, c, kernel, kernel]);
                    param_shapes.push(vec![out_channels]);
                    (vec![out_channels, h - kernel + 1, w - kernel + 1], Some(param_shapes.len() - 2))
                }
                LayerSpec::MaxPool2x2 => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(bad(format!("needs a [C, H, W] input, got {shape:?}")));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(bad(format!("odd spatial extent in {shape:?}")));
                    }
                    (vec![c, h / 2, w / 2], None)
                }
                LayerSpec::Dense { outputs } => {
                    if outputs == 0 {
                        return Err(bad("zero outputs".into()));
                    }
                    let d: usize = shape.iter().product();
                    param_shapes.push(vec![outputs, d]);
                    param_shapes.push(vec![outputs]);
                    (vec![outputs], Some(param_shapes.len() - 2))
                }
                LayerSpec::Relu => (shape.clone(), None),
            };
            layers.push(Layer { spec, in_shape: shape, out_shape: out_shape.clone(), param });
            shape = out_shape;
        }
        if shape.len() != 1 {
            return Err(Error::InvalidNetwork(format!("final layer must produce class scores, got {shape:?}")));
        }
        Ok(Network { input_shape: input_shape.to_vec(), layers, param_shapes })
    }

    /// Layer stack of the LeNet variant used for MNIST: conv20-5x5, pool,
    /// conv50-5x5, pool, dense500, ReLU, dense10.
    pub fn lenet_specs() -> &'static [LayerSpec] {
        &[
            LayerSpec::Conv2d { out_channels: 20, kernel: 5 },
            LayerSpec::MaxPool2x2,
            LayerSpec::Conv2d { out_channels: 50, kernel: 5 },
            LayerSpec::MaxPool2x2,
            LayerSpec::Dense { outputs: 500 },
            LayerSpec::Relu,
            LayerSpec::Dense { outputs: 10 },
        ]
    }

    /// LeNet on 1x28x28 inputs.
    pub fn lenet() -> Self {
        Network::new(&[1, 28, 28], Self::lenet_specs()).expect("LeNet shapes are consistent")
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_spec(&self, i: usize) -> LayerSpec {
        self.layers[i].spec
    }

    /// Per-sample input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.layers[i].in_shape
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.layers[i].out_shape
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(self.input_shape[0], |l| l.out_shape[0])
    }

    /// Shapes of all parameter tensors, weight then bias for each
    /// parameterized layer.
    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    /// Uniform fan-in initialization, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`,
    /// with zero biases.
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        self.param_shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if i % 2 == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let bound = (3.0 / fan_in as f64).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::new(shape.clone(), data).expect("shape matches data length")
            })
            .collect()
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.param_shapes.len() {
            return Err(Error::InvalidNetwork(format!(
                "expected {} parameter tensors, got {}",
                self.param_shapes.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&self.param_shapes) {
            p.expect_shape(s)?;
        }
        Ok(())
    }
}

/// Where a tap is invoked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TapSite {
    /// Output of layer `i` in the forward pass.
    Activation(usize),
    /// Gradient of the loss with respect to the output of layer `i`.
    ActivationGrad(usize),
    /// Gradient of the loss with respect to parameter tensor `i`.
    ParamGrad(usize),
}

/// Hook that may replace a tensor as it is produced.
pub trait Tap {
    fn tap(&mut self, site: TapSite, t: Tensor) -> Result<Tensor>;
}

/// Tap that passes every tensor through untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Tap for Identity {
    fn tap(&mut self, _site: TapSite, t: Tensor) -> Result<Tensor> {
        Ok(t)
    }
}

enum Aux {
    None,
    Cols(Vec<f64>),
    Argmax(Vec<u32>),
}

/// State saved by [`forward`] for [`backward`].
pub struct ForwardCache {
    /// Input of every layer (after the previous layer's tap).
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    logits: Tensor,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

fn divergence(e: Error, role: String) -> Error {
    e.in_context(&role, None)
}

/// Runs the network on a batch `(N, ...input_shape)`, offering every layer
/// output to `tap` before it feeds the next layer.
pub fn forward(net: &Network, params: &[Tensor], input: &Tensor, tap: &mut dyn Tap) -> Result<(Tensor, ForwardCache)> {
    net.check_params(params)?;
    let n = input.shape().first().copied().unwrap_or(0);
    let mut expected = vec![n];
    expected.extend_from_slice(&net.input_shape);
    input.expect_shape(&expected)?;

    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut aux = Vec::with_capacity(net.layers.len());
    let mut x = input.clone();
    for (i, layer) in net.layers.iter().enumerate() {
        let (out, a) = match layer.spec {
            LayerSpec::Conv2d { .. } => {
                let p = layer.param.expect("conv has params");
                let (out, cols) = layers::conv2d_forward(&x, &params[p], &params[p + 1])?;
                (out, Aux::Cols(cols))
            }
            LayerSpec::MaxPool2x2 => {
                let (out, arg) = layers::maxpool_forward(&x)?;
                (out, Aux::Argmax(arg))
            }
            LayerSpec::Dense { .. } => {
                let p = layer.param.expect("dense has params");
                (layers::dense_forward(&x, &params[p], &params[p + 1])?, Aux::None)
            }
            LayerSpec::Relu => (layers::relu_forward(&x), Aux::None),
        };
        out.check_finite().map_err(|e| divergence(e, format!("layer {i} output")))?;
        let out = tap.tap(TapSite::Activation(i), out)?;
        inputs.push(std::mem::replace(&mut x, out));
        aux.push(a);
    }
    let logits = x;
    Ok((logits.clone(), ForwardCache { inputs, aux, logits }))
}

/// Back-propagates softmax cross-entropy through the cached forward pass.
/// Returns one gradient per parameter tensor and the mean batch loss.
pub fn backward(
    net: &Network,
    params: &[Tensor],
    cache: ForwardCache,
    labels: &[usize],
    tap: &mut dyn Tap,
) -> Result<(Vec<Tensor>, f64)> {
    net.check_params(params)?;
    if cache.inputs.len() != net.layers.len() {
        return Err(Error::InvalidNetwork("cache does not match network".into()));
    }
    let (loss, dlogits) = layers::softmax_xent(&cache.logits, labels)?;
    let last = net.layers.len() - 1;
    let mut grad = tap.tap(TapSite::ActivationGrad(last), dlogits)?;

    let mut grads: Vec<Option<Tensor>> = vec![None; params.len()];
    let ForwardCache { inputs, aux, .. } = cache;
    for (i, (input, a)) in inputs.iter().zip(aux).enumerate().rev() {
        let layer = &net.layers[i];
        let need_dx = i > 0;
        let dx = match (layer.spec, a) {
            (LayerSpec::Conv2d { .. }, Aux::Cols(cols)) => {
                let p = layer.param.expect("conv has params");
                let (dx, dw, db) = layers::conv2d_backward(&grad, &cols, &params[p], input.shape(), need_dx)?;
                grads[p] = Some(param_grad(tap, p, dw)?);
                grads[p + 1] = Some(param_grad(tap, p + 1, db)?);
                dx
            }
            (LayerSpec::MaxPool2x2, Aux::Argmax(arg)) => {
                need_dx.then(|| layers::maxpool_backward(&grad, &arg, input.shape())).transpose()?
            }
            (LayerSpec::Dense { .. }, _) => {
                let p = layer.param.expect("dense has params");
                let (dx, dw, db) = layers::dense_backward(&grad, input, &params[p], need_dx)?;
                grads[p] = Some(param_grad(tap, p, dw)?);
                grads[p + 1] = Some(param_grad(tap, p + 1, db)?);
                dx
            }
            (LayerSpec::Relu, _) => need_dx.then(|| layers::relu_backward(&grad, input)).transpose()?,
            _ => unreachable!("aux matches layer kind"),
        };
        if let Some(dx) = dx {
            dx.check_finite().map_err(|e| divergence(e, format!("layer {} output gradient", i - 1)))?;
            grad = tap.tap(TapSite::ActivationGrad(i - 1), dx)?;
        }
    }
    let grads = grads.into_iter().map(|g| g.expect("every parameter has a gradient")).collect();
    Ok((grads, loss))
}

fn param_grad(tap: &mut dyn Tap, p: usize, g: Tensor) -> Result<Tensor> {
    g.check_finite().map_err(|e| divergence(e, format!("parameter {p} gradient")))?;
    tap.tap(TapSite::ParamGrad(p), g)
}

/// Index of the largest logit per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
