//! Feed-forward encoder with an L2-normalized output and hand-written
//! backpropagation.
//!
//! Hidden layers apply the configured activation; the last layer is affine
//! and its output is normalized to the unit sphere.

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, l2_normalize_backward, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Activation> {
        match t {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Trainable parameters of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Intermediates of one forward pass, consumed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    input: Vec<f64>,
    /// Post-activation output of every hidden layer.
    hidden: Vec<Vec<f64>>,
    /// Output of the last affine layer before normalization.
    pub raw: Vec<f64>,
    /// Unit-norm feature.
    pub v: Vec<f64>,
}

/// Gradient with the same layout as [`Encoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &Encoder) -> Self {
        EncoderGrads {
            layers: enc
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|&g| g == 0.0)
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

impl Encoder {
    /// Glorot-uniform weights, zero biases. `dims` is `[D, hidden.., L]`.
    pub fn init(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        if dims.contains(&0) {
            return Err(Error::invalid(format!("encoder dimensions must be ≥ 1, got {dims:?}")));
        }
        let mut rng = Rng::new(seed).derive(0x656e63);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-limit, limit))
                    .collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("shape"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Encoder { layers, activation })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::invalid(format!("layer {i}: bias length {} != {}", l.bias.len(), l.out_dim())));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid(format!("layer {i}: non-finite parameters")));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Encoder { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTape> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matvec(&h);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            if i < last {
                for zi in &mut z {
                    *zi = self.activation.apply(*zi);
                }
                hidden.push(z.clone());
            }
            h = z;
        }
        let v = l2_normalize(&h)?;
        Ok(ForwardTape {
            input: x.to_vec(),
            hidden,
            raw: h,
            v,
        })
    }

    /// Unit-norm feature only.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.v)
    }

    /// Backpropagates `grad_v = ∂ℓ/∂v`, accumulating parameter gradients into
    /// `grads` and returning `∂ℓ/∂x`.
    pub fn backward_into(&self, tape: &ForwardTape, grad_v: &[f64], grads: &mut EncoderGrads) -> Result<Vec<f64>> {
        if grad_v.len() != self.output_dim() || tape.raw.len() != self.output_dim() || tape.hidden.len() + 1 != self.layers.len() {
            return Err(Error::invalid("backward: tape or gradient shape does not match encoder"));
        }
        let mut delta = l2_normalize_backward(&tape.raw, grad_v)?;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = if i == 0 { &tape.input } else { &tape.hidden[i - 1] };
            let g = &mut grads.layers[i];
            g.weight.add_outer(1.0, &delta, input);
            for (b, d) in g.bias.iter_mut().zip(&delta) {
                *b += d;
            }
            let mut down = layer.weight.matvec_t(&delta);
            if i > 0 {
                for (d, y) in down.iter_mut().zip(&tape.hidden[i - 1]) {
                    *d *= self.activation.derivative_from_output(*y);
                }
            }
            delta = down;
        }
        Ok(delta)
    }

    pub fn backward(&self, tape: &ForwardTape, grad_v: &[f64]) -> Result<(EncoderGrads, Vec<f64>)> {
        let mut grads = EncoderGrads::zeros_like(self);
        let gx = self.backward_into(tape, grad_v, &mut grads)?;
        Ok((grads, gx))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Overwrites every parameter from a flat vector laid out like [`Self::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    /// `θ ← θ − lr · g`.
    pub fn sgd_step(&mut self, grads: &EncoderGrads, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }
}
