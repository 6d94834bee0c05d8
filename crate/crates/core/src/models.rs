//! Fully connected networks (MLP autoencoder, linear hash head) and
//! checkpoint persistence.
//!
//! Weights are stored `in × out`, so a layer computes `act(X·W + b)` for a
//! batch `X` of row vectors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::quantizers::{EmaMedianState, QuantizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn shape(&self) -> LayerShape {
        LayerShape {
            inputs: self.weight.rows(),
            outputs: self.weight.cols(),
            activation: self.activation,
        }
    }

    pub fn zeros(shape: LayerShape) -> Self {
        Self {
            weight: Matrix::zeros(shape.inputs, shape.outputs),
            bias: vec![0.0; shape.outputs],
            activation: shape.activation,
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn xavier(shape: LayerShape, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
        let data = (0..shape.inputs * shape.outputs)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Self {
            weight: Matrix::new(shape.inputs, shape.outputs, data).expect("shape matches"),
            bias: vec![0.0; shape.outputs],
            activation: shape.activation,
        }
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// An ordered stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

pub type NetworkParams = Network;

/// Activations retained by [`Network::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Matrix,
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn into_output(mut self) -> Matrix {
        self.outputs.pop().unwrap_or(self.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.is_finite() && g.bias.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weight.as_slice());
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.cols() {
                return Err(Error::invalid(format!(
                    "layer {i}: bias length {} does not match {} outputs",
                    l.bias.len(),
                    l.weight.cols()
                )));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::invalid(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].weight.cols(),
                    i + 1,
                    pair[1].weight.rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn xavier(shapes: &[LayerShape], rng: &mut RngStream) -> Result<Self> {
        Self::new(shapes.iter().map(|&s| Layer::xavier(s, rng)).collect())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(Layer::shape).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in [`Network::flatten`] order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&flat[offset..offset + w]);
            offset += w;
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "network forward",
                expected: (x.rows(), self.input_dim()),
                got: x.shape(),
            });
        }
        let mut outputs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outputs.last().unwrap_or(x);
            let mut z = input.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias)?;
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            outputs.push(z);
        }
        Ok(ForwardCache {
            input: x.clone(),
            outputs,
        })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.into_output())
    }

    /// Backpropagates `grad_out = dL/d(output)` through the cached forward.
    ///
    /// The input gradient is only formed when `want_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &Matrix,
        want_input_grad: bool,
    ) -> Result<(Gradients, Option<Matrix>)> {
        grad_out.ensure_same_shape(cache.output(), "network backward")?;
        let mut delta = grad_out.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut input_grad = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                for (d, &o) in delta.as_mut_slice().iter_mut().zip(cache.outputs[i].as_slice()) {
                    *d *= act.derivative_from_output(o);
                }
            }
            let input = if i == 0 { &cache.input } else { &cache.outputs[i - 1] };
            let weight = input.matmul_tn(&delta)?;
            let bias = delta.column_sums();
            let next = if i > 0 || want_input_grad {
                Some(delta.matmul_nt(&layer.weight)?)
            } else {
                None
            };
            grads.push(LayerGrad { weight, bias });
            match next {
                Some(n) if i > 0 => delta = n,
                other => input_grad = other,
            }
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, input_grad))
    }
}

/// Encoder pass producing the pre-quantization features `U`.
pub fn encoder_forward(params: &Network, x: &Matrix) -> Result<ForwardCache> {
    params.forward(x)
}

/// Decoder pass from codes to reconstructions.
pub fn decoder_forward(params: &Network, codes: &Matrix) -> Result<ForwardCache> {
    params.forward(codes)
}

/// Hash head on precomputed features: `U = F·W + b`.
pub fn linear_head_forward(params: &Network, features: &Matrix) -> Result<Matrix> {
    params.predict(features)
}

/// Model family and sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Autoencoder { input_dim: usize, hidden: usize, bits: usize },
    LinearHead { input_dim: usize, bits: usize },
}

impl Architecture {
    pub const DEFAULT_HIDDEN: usize = 512;

    pub fn mnist_autoencoder(bits: usize) -> Self {
        Architecture::Autoencoder {
            input_dim: 784,
            hidden: Self::DEFAULT_HIDDEN,
            bits,
        }
    }

    pub fn bits(&self) -> usize {
        match *self {
            Architecture::Autoencoder { bits, .. } | Architecture::LinearHead { bits, .. } => bits,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            Architecture::Autoencoder { input_dim, .. } | Architecture::LinearHead { input_dim, .. } => input_dim,
        }
    }

    pub fn encoder_shapes(&self) -> Vec<LayerShape> {
        match *self {
            Architecture::Autoencoder { input_dim, hidden, bits } => vec![
                LayerShape { inputs: input_dim, outputs: hidden, activation: Activation::Relu },
                LayerShape { inputs: hidden, outputs: bits, activation: Activation::Identity },
            ],
            Architecture::LinearHead { input_dim, bits } => vec![LayerShape {
                inputs: input_dim,
                outputs: bits,
                activation: Activation::Identity,
            }],
        }
    }

    pub fn decoder_shapes(&self) -> Vec<LayerShape> {
        match *self {
            Architecture::Autoencoder { input_dim, hidden, bits } => vec![
                LayerShape { inputs: bits, outputs: hidden, activation: Activation::Relu },
                LayerShape { inputs: hidden, outputs: input_dim, activation: Activation::Sigmoid },
            ],
            Architecture::LinearHead { .. } => Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Architecture::Autoencoder { input_dim, hidden, bits } => input_dim > 0 && hidden > 0 && bits > 0,
            Architecture::LinearHead { input_dim, bits } => input_dim > 0 && bits > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate architecture {self:?}")))
        }
    }
}

/// Encoder (and decoder, for autoencoders) parameters of one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub architecture: Architecture,
    pub encoder: Network,
    pub decoder: Option<Network>,
}

impl Model {
    pub fn init(architecture: Architecture, rng: &mut RngStream) -> Result<Self> {
        architecture.validate()?;
        let encoder = Network::xavier(&architecture.encoder_shapes(), rng)?;
        let decoder_shapes = architecture.decoder_shapes();
        let decoder = if decoder_shapes.is_empty() {
            None
        } else {
            Some(Network::xavier(&decoder_shapes, rng)?)
        };
        Ok(Self {
            architecture,
            encoder,
            decoder,
        })
    }

    fn zeros(architecture: Architecture) -> Result<Self> {
        architecture.validate()?;
        let build = |shapes: Vec<LayerShape>| Network::new(shapes.into_iter().map(Layer::zeros).collect());
        let decoder_shapes = architecture.decoder_shapes();
        Ok(Self {
            encoder: build(architecture.encoder_shapes())?,
            decoder: if decoder_shapes.is_empty() {
                None
            } else {
                Some(build(decoder_shapes)?)
            },
            architecture,
        })
    }

    pub fn bits(&self) -> usize {
        self.architecture.bits()
    }

    /// Continuous features `U` for a batch of inputs.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.predict(x)
    }

    fn networks(&self) -> impl Iterator<Item = &Network> {
        std::iter::once(&self.encoder).chain(self.decoder.as_ref())
    }

    fn networks_mut(&mut self) -> impl Iterator<Item = &mut Network> {
        std::iter::once(&mut self.encoder).chain(self.decoder.as_mut())
    }
}

/// Bookkeeping recorded alongside trained parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    pub n_train: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub quantizer: QuantizerConfig,
    pub ema: Option<EmaMedianState>,
    pub meta: TrainingMeta,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BHNCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    architecture: Architecture,
    layers: Vec<LayerShape>,
    quantizer: QuantizerConfig,
    ema: Option<EmaMedianState>,
    meta: TrainingMeta,
}

impl Checkpoint {
    /// Serializes to the on-disk layout:
    ///
    /// ```text
    /// b"BHNCKPT1" | u64 LE header length | UTF-8 JSON header | f64 LE parameters
    /// ```
    ///
    /// Parameters follow the header's `layers` order (encoder, then
    /// decoder), each layer as its row-major `in × out` weight followed by
    /// its bias.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            architecture: self.model.architecture.clone(),
            layers: self.model.networks().flat_map(Network::shapes).collect(),
            quantizer: self.quantizer.clone(),
            ema: self.ema.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let n_params: usize = self.model.networks().map(Network::num_params).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n_params);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for net in self.model.networks() {
            for v in net.flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: &str| Error::Truncated {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let malformed = |detail: String| Error::Malformed {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            if bytes.len() >= 8 || !CHECKPOINT_MAGIC.starts_with(bytes) {
                return Err(Error::BadMagic {
                    path: path.to_path_buf(),
                    expected: "BHNCKPT1".into(),
                });
            }
            return Err(truncated("missing magic"));
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .ok_or_else(|| truncated("missing header length"))?
            .try_into()
            .unwrap();
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| truncated("header shorter than declared"))?;

        // Peek at the version before committing to the full schema.
        let raw: serde_json::Value =
            serde_json::from_slice(json).map_err(|e| malformed(format!("header json: {e}")))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader =
            serde_json::from_value(raw).map_err(|e| malformed(format!("header json: {e}")))?;

        let mut model = Model::zeros(header.architecture)?;
        let expected_shapes: Vec<LayerShape> = model.networks().flat_map(Network::shapes).collect();
        if expected_shapes != header.layers {
            return Err(malformed("layer list does not match architecture".into()));
        }
        let mut payload = &bytes[16 + header_len..];
        for net in model.networks_mut() {
            let n = net.num_params();
            if payload.len() < 8 * n {
                return Err(truncated("parameter block shorter than declared"));
            }
            let flat: Vec<f64> = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(malformed("non-finite parameter".into()));
            }
            net.assign_flat(&flat)?;
            payload = &payload[8 * n..];
        }
        if !payload.is_empty() {
            return Err(malformed(format!("{} trailing bytes", payload.len())));
        }
        Ok(Self {
            model,
            quantizer: header.quantizer,
            ema: header.ema,
            meta: header.meta,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, seeded_gaussian};
    use crate::quantizers::QuantizerVariant;

    fn single(w: f64, b: f64, act: Activation) -> Network {
        Network::new(vec![Layer {
            weight: Matrix::new(1, 1, vec![w]).unwrap(),
            bias: vec![b],
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        let x = Matrix::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(single(2.0, 1.0, Activation::Identity).predict(&x).unwrap().as_slice(), &[7.0]);

        let zero = Network::new(vec![Layer::zeros(LayerShape {
            inputs: 4,
            outputs: 3,
            activation: Activation::Identity,
        })])
        .unwrap();
        let x = seeded_gaussian(&mut RngStream::new(1), 5, 4, 0.0, 1.0).unwrap();
        assert!(zero.predict(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(zero.predict(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn decoder_output_is_sigmoid_of_bias_for_zero_weights() {
        let mut layer = Layer::zeros(LayerShape {
            inputs: 3,
            outputs: 2,
            activation: Activation::Sigmoid,
        });
        layer.bias = vec![-1.0, 2.0];
        let dec = Network::new(vec![layer]).unwrap();
        let codes = Matrix::from_rows(&[[1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]]).unwrap();
        let out = decoder_forward(&dec, &codes).unwrap().into_output();
        for r in 0..2 {
            assert_eq!(out.row(r), &[sigmoid(-1.0), sigmoid(2.0)]);
        }
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        let arch = Architecture::Autoencoder {
            input_dim: 6,
            hidden: 5,
            bits: 3,
        };
        let model = Model::init(arch, &mut RngStream::new(2)).unwrap();
        let codes = seeded_gaussian(&mut RngStream::new(3), 20, 3, 0.0, 3.0).unwrap();
        let rec = model.decoder.as_ref().unwrap().predict(&codes).unwrap();
        assert!(rec.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn linear_head_examples() {
        let mut eye = Layer::zeros(LayerShape {
            inputs: 3,
            outputs: 3,
            activation: Activation::Identity,
        });
        for i in 0..3 {
            eye.weight.set(i, i, 1.0);
        }
        let head = Network::new(vec![eye]).unwrap();
        let f = seeded_gaussian(&mut RngStream::new(4), 6, 3, 0.0, 1.0).unwrap();
        assert_eq!(linear_head_forward(&head, &f).unwrap(), f);

        let mut bias_only = Layer::zeros(LayerShape {
            inputs: 3,
            outputs: 2,
            activation: Activation::Identity,
        });
        bias_only.bias = vec![0.5, -2.0];
        let head = Network::new(vec![bias_only]).unwrap();
        let u = linear_head_forward(&head, &f).unwrap();
        for r in 0..6 {
            assert_eq!(u.row(r), &[0.5, -2.0]);
        }
    }

    #[test]
    fn rejects_unchained_layers() {
        let a = Layer::zeros(LayerShape { inputs: 2, outputs: 3, activation: Activation::Relu });
        let b = Layer::zeros(LayerShape { inputs: 4, outputs: 1, activation: Activation::Identity });
        assert!(Network::new(vec![a, b]).is_err());
    }

    // Gradient of sum(W ⊙ net(x)) w.r.t. all parameters and (optionally) x.
    fn check_network_gradient(net: &Network, x: &Matrix, seed: u64) {
        let probe = seeded_gaussian(&mut RngStream::new(seed), x.rows(), net.output_dim(), 0.0, 1.0).unwrap();
        let cache = net.forward(x).unwrap();
        let (grads, dx) = net.backward(&cache, &probe, true).unwrap();
        let objective = |n: &Network, x: &Matrix| -> f64 {
            n.predict(x)
                .unwrap()
                .as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let numeric = finite_diff_grad(
            |flat| {
                let mut n = net.clone();
                n.assign_flat(flat).unwrap();
                objective(&n, x)
            },
            &net.flatten(),
            1e-5,
        )
        .unwrap();
        for (a, n) in grads.flatten().iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-4, "param grad {a} vs {n}");
        }
        let numeric_x = finite_diff_grad(
            |flat| objective(net, &Matrix::new(x.rows(), x.cols(), flat.to_vec()).unwrap()),
            x.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, n) in dx.unwrap().as_slice().iter().zip(&numeric_x) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-4, "input grad {a} vs {n}");
        }
    }

    #[test]
    fn autoencoder_backward_matches_finite_differences() {
        let arch = Architecture::Autoencoder {
            input_dim: 3,
            hidden: 3,
            bits: 2,
        };
        for seed in 0..4 {
            let mut rng = RngStream::new(seed);
            let model = Model::init(arch.clone(), &mut rng).unwrap();
            let x = seeded_gaussian(&mut rng, 3, 3, 0.5, 1.0).unwrap();
            // encoder: 3·3+3 + 3·2+2 = 20 parameters
            check_network_gradient(&model.encoder, &x, seed + 100);
            let codes = seeded_gaussian(&mut rng, 3, 2, 0.0, 1.0).unwrap();
            // decoder: 2·3+3 + 3·3+3 = 21 parameters
            check_network_gradient(model.decoder.as_ref().unwrap(), &codes, seed + 200);
        }
    }

    #[test]
    fn linear_head_backward_matches_finite_differences() {
        let arch = Architecture::LinearHead { input_dim: 5, bits: 4 };
        let mut rng = RngStream::new(8);
        let model = Model::init(arch, &mut rng).unwrap();
        let f = seeded_gaussian(&mut rng, 6, 5, 0.0, 1.0).unwrap();
        check_network_gradient(&model.encoder, &f, 9);
    }

    fn sample_checkpoint() -> Checkpoint {
        let arch = Architecture::Autoencoder {
            input_dim: 7,
            hidden: 5,
            bits: 3,
        };
        Checkpoint {
            model: Model::init(arch, &mut RngStream::new(77)).unwrap(),
            quantizer: QuantizerConfig::new(QuantizerVariant::MedianEma).with_gamma(1.0 / 3.0),
            ema: Some(EmaMedianState {
                medians: vec![0.1, -1.0 / 7.0, 3.3e-300],
                updates: 12,
            }),
            meta: TrainingMeta {
                epoch: 4,
                seed: u64::MAX - 3,
                loss_history: vec![std::f64::consts::LN_2, 0.1 + 0.2, 1e-17],
                n_train: 100,
                learning_rate: 1e-4,
            },
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

        let head = Checkpoint {
            model: Model::init(Architecture::LinearHead { input_dim: 4, bits: 2 }, &mut RngStream::new(1)).unwrap(),
            quantizer: QuantizerConfig::new(QuantizerVariant::BiHalf),
            ema: None,
            meta: TrainingMeta::default(),
        };
        let bytes = head.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap(), head);
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let p = Path::new("ckpt");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::BadMagic { .. })));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..12], p), Err(Error::Truncated { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..4], p), Err(Error::Truncated { .. })));

        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        let bumped = json.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert_eq!(bumped.len(), json.len());
        let mut future = bytes[..16].to_vec();
        future.extend_from_slice(bumped.as_bytes());
        future.extend_from_slice(&bytes[16 + header_len..]);
        assert!(matches!(
            Checkpoint::from_bytes(&future, p),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(Checkpoint::from_bytes(&trailing, p), Err(Error::Malformed { .. })));
    }
}
