//! Small fixed convolution stacks.
//!
//! The pipeline needs encoders, parameter heads, and a decoder, but none of
//! their weights are part of this library's claims: they are either drawn
//! once from a seeded generator or loaded from tensor files. This module
//! provides the minimal plumbing: a 2D convolution layer with "same" zero
//! padding, optional striding, and a pointwise activation, plus a sequential
//! stack over such layers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    /// `x` for positive inputs, `slope * x` otherwise.
    LeakyRelu(f32),
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope as f64 * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// One convolution: weight `[C_out, C_in, k, k]`, per-output-channel bias,
/// zero padding of `k/2` on each side, stride `s`, then the activation.
/// Output extents are `ceil(H/s) x ceil(W/s)`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    weight: Tensor,
    bias: Vec<f32>,
    stride: usize,
    activation: Activation,
}

impl ConvLayer {
    pub fn new(
        weight: Tensor,
        bias: Vec<f32>,
        stride: usize,
        activation: Activation,
    ) -> Result<Self> {
        if weight.rank() != 4 || weight.shape()[2] != weight.shape()[3] {
            return Err(Error::ShapeMismatch {
                context: "ConvLayer weight",
                expected: vec![0, 0, 0, 0],
                got: weight.shape().to_vec(),
            });
        }
        let k = weight.shape()[2];
        if k % 2 == 0 {
            return Err(Error::InvalidParameter {
                name: "kernel",
                reason: format!("same-padding requires an odd kernel, got {k}"),
            });
        }
        if bias.len() != weight.shape()[0] {
            return Err(Error::LengthMismatch {
                shape: weight.shape().to_vec(),
                expected: weight.shape()[0],
                got: bias.len(),
            });
        }
        if let Some(&bad) = bias.iter().find(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "bias",
                reason: format!("non-finite entry {bad}"),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidParameter {
                name: "stride",
                reason: "must be at least 1".into(),
            });
        }
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            activation,
        })
    }

    /// Fresh layer with weights drawn uniformly from `+-sqrt(1/(C_in k^2))`
    /// and zero bias. Consumes a fixed amount of generator state, so layer
    /// construction order fully determines every parameter.
    pub fn seeded(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (1.0 / (c_in * k * k) as f32).sqrt();
        let weight = Tensor::new(
            &[c_out, c_in, k, k],
            (0..c_out * c_in * k * k)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
        )?;
        ConvLayer::new(weight, vec![0.0; c_out], stride, activation)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.rank() != 3 || input.shape()[0] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                context: "ConvLayer input",
                expected: vec![self.in_channels(), 0, 0],
                got: input.shape().to_vec(),
            });
        }
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let co = self.out_channels();
        let k = self.kernel();
        let half = (k / 2) as isize;
        let s = self.stride;
        let oh = h.div_ceil(s);
        let ow = w.div_ceil(s);
        let plane = h * w;

        let mut out = vec![0.0f32; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let cy = (oy * s) as isize;
                    let cx = (ox * s) as isize;
                    let mut acc = self.bias[o] as f64;
                    for i in 0..ci {
                        for wy in -half..=half {
                            let y = cy + wy;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for wx in -half..=half {
                                let x = cx + wx;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                let wv = self.weight.at4(
                                    o,
                                    i,
                                    (wy + half) as usize,
                                    (wx + half) as usize,
                                ) as f64;
                                acc += wv
                                    * input.data()[i * plane + (y as usize) * w + x as usize]
                                        as f64;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = self.activation.apply(acc) as f32;
                }
            }
        }
        Tensor::new(&[co, oh, ow], out)
    }
}

/// Layers applied in sequence; each layer's input channel count must match
/// the previous layer's output.
#[derive(Debug, Clone)]
pub struct ConvStack {
    layers: Vec<ConvLayer>,
}

impl ConvStack {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter {
                name: "layers",
                reason: "stack needs at least one layer".into(),
            });
        }
        for pair in layers.windows(2) {
            if pair[1].in_channels() != pair[0].out_channels() {
                return Err(Error::ShapeMismatch {
                    context: "ConvStack",
                    expected: vec![pair[0].out_channels()],
                    got: vec![pair[1].in_channels()],
                });
            }
        }
        Ok(ConvStack { layers })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut current = self.layers[0].forward(input)?;
        for layer in &self.layers[1..] {
            current = layer.forward(&current)?;
        }
        Ok(current)
    }

    /// Output of every layer, shallowest first.
    pub fn forward_all(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            current = layer.forward(&current)?;
            outputs.push(current.clone());
        }
        Ok(outputs)
    }
}
