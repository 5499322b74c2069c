//! Small fully connected feature extractor with manual backprop.

use crate::error::{domain, shape, IsdaError, Result};
use crate::numeric::{axpy, dot, Mat};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(0.1)
    }
}

/// One affine layer; `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
}

/// Gradients per layer, in the same order as [`Mlp::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn zeros_like(model: &Mlp) -> Self {
        MlpGrads {
            layers: model
                .layers
                .iter()
                .map(|l| Layer { weight: Mat::zeros(l.weight.rows(), l.weight.cols()), bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(alpha, &b.weight).expect("matching layer shapes");
            axpy(alpha, &b.bias, &mut a.bias);
        }
    }
}

impl Mlp {
    /// He-style initialization for layer sizes `dims = [D0, hidden..., A]`.
    pub fn new(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return domain(format!("invalid layer sizes {dims:?}"));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
                Layer { weight: Mat::from_vec(fan_out, fan_in, data).expect("finite init"), bias: vec![0.0; fan_out] }
            })
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return domain("an MLP needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rows() != l.bias.len() {
                return shape(format!("layer {i}: weight {:?} with bias {}", l.weight.shape(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return shape(format!(
                    "layer {i} expects {} inputs, previous gives {}",
                    l.weight.cols(),
                    layers[i - 1].weight.rows()
                ));
            }
        }
        Ok(Mlp { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    /// Multiply-adds of one forward pass for one sample.
    pub fn forward_macs(&self) -> u64 {
        self.layers.iter().map(|l| (l.weight.rows() * l.weight.cols()) as u64).sum()
    }

    pub fn forward(&self, inputs: &Mat) -> Result<(Mat, ForwardCache)> {
        if inputs.cols() != self.input_dim() {
            return shape(format!("inputs have {} columns, model expects {}", inputs.cols(), self.input_dim()));
        }
        if let Some(i) = inputs.row_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(IsdaError::NonFinite { context: "model inputs", index: i });
        }
        let mut cache =
            ForwardCache { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::with_capacity(self.layers.len()) };
        let mut x = inputs.clone();
        for layer in &self.layers {
            let mut z = x.matmul_t(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut out = z.clone();
            out.as_mut_slice().iter_mut().for_each(|v| *v = self.activation.apply(*v));
            cache.inputs.push(std::mem::replace(&mut x, out));
            cache.pre.push(z);
        }
        Ok((x, cache))
    }

    /// Features only, without keeping a cache.
    pub fn features(&self, inputs: &Mat) -> Result<Mat> {
        self.forward(inputs).map(|(f, _)| f)
    }

    /// Backpropagates `grad_out` (same shape as the features) and returns
    /// parameter gradients plus the gradient with respect to the inputs.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Mat) -> Result<(MlpGrads, Mat)> {
        let last = cache.pre.last().ok_or_else(|| IsdaError::Domain("empty cache".into()))?;
        if grad_out.shape() != last.shape() {
            return shape(format!("grad {:?} for features {:?}", grad_out.shape(), last.shape()));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = grad_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            for (d, z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *d *= self.activation.derivative(*z);
            }
            let input = &cache.inputs[l];
            let g = &mut grads.layers[l];
            for r in 0..delta.rows() {
                let dr = delta.row(r);
                let xr = input.row(r);
                for (o, &dv) in dr.iter().enumerate() {
                    if dv != 0.0 {
                        axpy(dv, xr, g.weight.row_mut(o));
                    }
                    g.bias[o] += dv;
                }
            }
            delta = delta.matmul(&layer.weight)?;
        }
        Ok((grads, delta))
    }

    /// Logits `head(features(x))` for each row of `inputs`.
    pub fn forward_logits(&self, head: &crate::loss::ClassifierHead, inputs: &Mat) -> Result<Mat> {
        let feats = self.features(inputs)?;
        feats.matmul_t(&head.weight).map(|mut z| {
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&head.bias) {
                    *v += b;
                }
            }
            z
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Squared L2 norm of all weights (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| dot(l.weight.as_slice(), l.weight.as_slice())).sum()
    }
}
