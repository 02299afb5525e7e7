//! Network construction, orthogonal initialization, the weight clamp, and
//! tape binding for forward passes.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Upper weight magnitude: sqrt(2), the stability boundary of the
/// extraction dynamics.
pub const WEIGHT_CLAMP: f64 = std::f64::consts::SQRT_2;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        fan_in: usize,
        fan_out: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    LeakyRelu {
        slope: f64,
    },
    Arsinh,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn is_activation(&self) -> bool {
        !self.is_parametric()
    }

    /// Per-example output shape given the input shape, or a chaining error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Linear { fan_in, fan_out, .. } => {
                let flat: usize = input.iter().product();
                if flat != *fan_in {
                    return Err(Error::shape(format!(
                        "linear layer expects {} inputs, previous extent is {:?} ({} values)",
                        fan_in, input, flat
                    )));
                }
                Ok(vec![*fan_out])
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => {
                if input.len() != 3 {
                    return Err(Error::shape(format!(
                        "conv2d expects [C,H,W] input, previous extent is {:?}",
                        input
                    )));
                }
                let (c, h, w) = (input[0], input[1], input[2]);
                if c != *in_ch {
                    return Err(Error::shape(format!(
                        "conv2d expects {} channels, previous extent has {}",
                        in_ch, c
                    )));
                }
                if *stride == 0 {
                    return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(Error::shape(format!(
                        "conv2d non-positive output extent for H={} W={} k={} padding={}",
                        h, w, kernel, padding
                    )));
                }
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![*out_ch, ho, wo])
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(*slope > 0.0 && *slope < 1.0) {
                    return Err(Error::InvalidArg(format!(
                        "leaky_relu slope must be in (0,1), got {}",
                        slope
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Arsinh => Ok(input.to_vec()),
        }
    }
}

/// Architecture identity of a network; this is what checkpoints store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Row-major [rows x cols] matrix with orthonormal columns (rows >= cols)
/// or orthonormal rows (rows < cols), from the QR of a seeded Gaussian.
pub fn orthogonal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let big = rows.max(cols);
    let small = rows.min(cols);
    let g = DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix signs so the factorization (and hence the init) is unique
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            for i in 0..big {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    if rows >= cols {
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = q[(i, j)];
            }
        }
    } else {
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = q[(j, i)];
            }
        }
    }
    out
}

/// Gaussian-filled matrix, for benchmarks that deliberately skip the
/// orthogonal init.
pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        })
        .collect()
}

/// Validate chaining and build a network with orthogonal weights and zero
/// biases. The same seed yields bit-identical parameters.
pub fn build_network(
    name: &str,
    input_shape: &[usize],
    specs: &[LayerSpec],
    seed: u64,
) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = input_shape.to_vec();
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        cur = spec.output_shape(&cur)?;
        let (weight, bias) = match spec {
            LayerSpec::Linear { fan_in, fan_out, bias } => {
                let w = orthogonal_matrix(&mut rng, *fan_in, *fan_out);
                (
                    Some(Tensor::new(vec![*fan_in, *fan_out], w)?),
                    bias.then(|| Tensor::zeros(vec![*fan_out])),
                )
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, bias, .. } => {
                // kernels flattened to [F x C*k*k] for the QR, reshaped back
                let w = orthogonal_matrix(&mut rng, *out_ch, in_ch * kernel * kernel);
                (
                    Some(Tensor::new(vec![*out_ch, *in_ch, *kernel, *kernel], w)?),
                    bias.then(|| Tensor::zeros(vec![*out_ch])),
                )
            }
            _ => (None, None),
        };
        layers.push(Layer {
            spec: spec.clone(),
            weight,
            bias,
        });
    }
    Ok(Network {
        name: name.to_string(),
        input_shape: input_shape.to_vec(),
        layers,
    })
}

impl Network {
    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
        }
    }

    /// Per-example output shape.
    pub fn output_shape(&self) -> Vec<usize> {
        let mut cur = self.input_shape.clone();
        for l in &self.layers {
            cur = l.spec.output_shape(&cur).expect("validated at build time");
        }
        cur
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// All parameter tensors in layer order (weight before bias).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(w) = &l.weight {
                out.push(w);
            }
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Some(w) = &mut l.weight {
                out.push(w);
            }
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.all_finite())
    }

    /// Bind parameters onto a tape. `Trainable` registers differentiable
    /// leaves; `Frozen` registers constants.
    pub fn bind<'n>(&'n self, tape: &mut Tape, mode: BindMode) -> BoundNet<'n> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let weight = l.weight.as_ref().map(|w| match mode {
                BindMode::Trainable => tape.leaf(w),
                BindMode::Frozen => tape.constant(w),
            });
            let bias = l.bias.as_ref().map(|b| match mode {
                BindMode::Trainable => tape.leaf(b),
                BindMode::Frozen => tape.constant(b),
            });
            layers.push(BoundLayer { weight, bias });
        }
        BoundNet { net: self, layers }
    }

    /// Pull gradients accumulated on bound parameter leaves back into the
    /// parameter tensors (accumulating).
    pub fn pull_grads(&mut self, tape: &Tape, bound: &[BoundLayer]) -> Result<()> {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for bl in bound {
            for node in [bl.weight, bl.bias].into_iter().flatten() {
                let g = tape
                    .grad(node)
                    .ok_or_else(|| Error::MissingGradient(self.name.clone()))?;
                grads.push(g.to_vec());
            }
        }
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            p.add_grad(&g);
        }
        Ok(())
    }
}

/// Elementwise clamp of every weight tensor to [-sqrt(2), sqrt(2)].
/// Biases are left untouched.
pub fn clamp_weights(net: &mut Network) {
    for l in &mut net.layers {
        if let Some(w) = &mut l.weight {
            for v in &mut w.values {
                *v = v.clamp(-WEIGHT_CLAMP, WEIGHT_CLAMP);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Option<NodeId>,
    pub bias: Option<NodeId>,
}

/// A network whose parameters are registered on a tape.
pub struct BoundNet<'n> {
    pub net: &'n Network,
    pub layers: Vec<BoundLayer>,
}

impl BoundNet<'_> {
    /// Forward a batch node `x` of shape [N, ...]; returns the final
    /// activation node.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let batch = *tape
            .shape(x)
            .first()
            .ok_or_else(|| Error::shape("forward expects a batched input"))?;
        let expect: usize = self.net.input_len();
        let got: usize = tape.shape(x)[1..].iter().product();
        if got != expect {
            return Err(Error::shape(format!(
                "network `{}` expects {} inputs per example, got {}",
                self.net.name, expect, got
            )));
        }
        let mut cur = x;
        let mut cur_shape = self.net.input_shape.clone();
        for (l, bl) in self.net.layers.iter().zip(&self.layers) {
            match &l.spec {
                LayerSpec::Linear { fan_in, .. } => {
                    if tape.shape(cur).len() != 2 {
                        cur = tape.reshape(cur, vec![batch, *fan_in])?;
                    }
                    cur = tape.matmul(cur, bl.weight.expect("linear has weight"))?;
                    if let Some(b) = bl.bias {
                        cur = tape.add_bias(cur, b)?;
                    }
                }
                LayerSpec::Conv2d { .. } => {
                    if tape.shape(cur).len() != 4 {
                        let mut s = vec![batch];
                        s.extend_from_slice(&cur_shape);
                        cur = tape.reshape(cur, s)?;
                    }
                    let (stride, padding) = match &l.spec {
                        LayerSpec::Conv2d { stride, padding, .. } => (*stride, *padding),
                        _ => unreachable!(),
                    };
                    cur = tape.conv2d(cur, bl.weight.expect("conv has weight"), stride, padding)?;
                    if let Some(b) = bl.bias {
                        cur = tape.add_chan_bias(cur, b)?;
                    }
                }
                LayerSpec::LeakyRelu { slope } => {
                    cur = tape.leaky_relu(cur, *slope)?;
                }
                LayerSpec::Arsinh => {
                    cur = tape.arsinh(cur);
                }
            }
            cur_shape = l.spec.output_shape(&cur_shape)?;
        }
        // flatten trailing dims so every network ends in [N, features]
        if tape.shape(cur).len() != 2 {
            let feat: usize = tape.shape(cur)[1..].iter().product();
            cur = tape.reshape(cur, vec![batch, feat])?;
        }
        Ok(cur)
    }
}

/// One forward pass outside any training loop; returns the output tensor.
pub fn forward(net: &Network, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xn = tape.constant(x);
    let bound = net.bind(&mut tape, BindMode::Frozen);
    let out = bound.forward(&mut tape, xn)?;
    Tensor::new(tape.shape(out).to_vec(), tape.value(out).to_vec())
}
