//! Forward-only implementations of the hand-designed network blocks:
//! dilated spatial attention, instance normalization, and per-head
//! attention-rollout patch selection.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("{context}: expected shape {expected}, got {got:?}")]
    BadShape {
        context: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("attention stack is empty")]
    EmptyStack,
    #[error(
        "layer {layer} has {got} heads / {got_tokens} tokens, expected {want} / {want_tokens}"
    )]
    LayerMismatch {
        layer: usize,
        got: usize,
        want: usize,
        got_tokens: usize,
        want_tokens: usize,
    },
    #[error("layer {layer}, head {head}, row {row} sums to {sum}, not 1 within 1e-5")]
    NotRowStochastic {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },
    #[error("query row {query} out of range for {tokens} tokens")]
    QueryOutOfRange { query: usize, tokens: usize },
}

/// 3x3, 2-input-channel dilated convolution kernel of the spatial attention
/// block. Dilation and padding are both fixed at 2 (stride 1), so the
/// attention map keeps the input's spatial size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsaKernel {
    /// `weights[input_channel][ky][kx]`, input channel 0 = channel-wise
    /// average pool, 1 = channel-wise max pool.
    pub weights: [[[f32; 3]; 3]; 2],
    pub bias: f32,
}

pub const DSA_DILATION: usize = 2;
pub const DSA_PADDING: usize = 2;

impl DsaKernel {
    pub fn zeros() -> Self {
        Self {
            weights: [[[0.0; 3]; 3]; 2],
            bias: 0.0,
        }
    }
}

/// Output of [`dsa_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct DsaOutput {
    /// `[1, H, W]` sigmoid attention map.
    pub attention: Tensor<f32>,
    /// `[C, H, W]` features after the attention residual:
    /// `out = in + in * attention`.
    pub features: Tensor<f32>,
}

/// Dilated spatial attention forward pass over `[C, H, W]` features.
///
/// Channel-wise average and max pooling produce a 2-channel map; a 3x3
/// dilated convolution (dilation 2, zero padding 2) plus sigmoid gives the
/// attention map, which scales the input through a residual connection.
pub fn dsa_forward(features: &Tensor<f32>, kernel: &DsaKernel) -> Result<DsaOutput, NeuralError> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(NeuralError::BadShape {
            context: "dsa features",
            expected: "[C, H, W]",
            got: shape.to_vec(),
        });
    }
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let data = features.data();

    let mut avg = vec![0.0f64; plane];
    let mut max = vec![f64::NEG_INFINITY; plane];
    for c in 0..channels {
        for i in 0..plane {
            let v = data[c * plane + i] as f64;
            avg[i] += v;
            if v > max[i] {
                max[i] = v;
            }
        }
    }
    for v in &mut avg {
        *v /= channels as f64;
    }

    let mut attention = Tensor::<f32>::zeros(&[1, h, w]);
    let att = attention.data_mut();
    let d = DSA_DILATION as i64;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = kernel.bias as f64;
            for (ci, channel) in [&avg, &max].into_iter().enumerate() {
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let sy = y + (ky - 1) * d;
                        let sx = x + (kx - 1) * d;
                        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                            continue;
                        }
                        acc += kernel.weights[ci][ky as usize][kx as usize] as f64
                            * channel[sy as usize * w + sx as usize];
                    }
                }
            }
            att[y as usize * w + x as usize] = sigmoid(acc) as f32;
        }
    }

    let mut out = features.clone();
    let out_data = out.data_mut();
    for c in 0..channels {
        for i in 0..plane {
            let a = att[i];
            out_data[c * plane + i] += data[c * plane + i] * a;
        }
    }
    Ok(DsaOutput {
        attention,
        features: out,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-sample, per-channel standardization of a `[B, C, H, W]` tensor.
pub fn instance_normalize(x: &Tensor<f32>, epsilon: f32) -> Result<Tensor<f32>, NeuralError> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(NeuralError::BadShape {
            context: "instance norm input",
            expected: "[B, C, H, W]",
            got: shape.to_vec(),
        });
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let start = (bi * c + ci) * plane;
            let slice = &x.data()[start..start + plane];
            let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = slice
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / plane as f64;
            let denom = (var + epsilon as f64).sqrt();
            for (o, &v) in out.data_mut()[start..start + plane].iter_mut().zip(slice) {
                *o = ((v as f64 - mean) / denom) as f32;
            }
        }
    }
    Ok(out)
}

/// Per-layer multi-head attention matrices plus the query token whose row
/// drives patch selection.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    layers: Vec<Tensor<f32>>,
    heads: usize,
    tokens: usize,
    query_row: usize,
}

impl AttentionStack {
    /// Validates that every layer is `[H, T, T]` with matching H and T and
    /// that every attention row sums to 1 within 1e-5.
    pub fn new(layers: Vec<Tensor<f32>>, query_row: usize) -> Result<Self, NeuralError> {
        let first = layers.first().ok_or(NeuralError::EmptyStack)?;
        let shape = first.shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(NeuralError::BadShape {
                context: "attention layer",
                expected: "[H, T, T]",
                got: shape.to_vec(),
            });
        }
        let (heads, tokens) = (shape[0], shape[1]);
        if tokens < 2 {
            // With a single token there is no non-query column to select.
            return Err(NeuralError::BadShape {
                context: "attention layer",
                expected: "[H, T >= 2, T >= 2]",
                got: shape.to_vec(),
            });
        }
        if query_row >= tokens {
            return Err(NeuralError::QueryOutOfRange {
                query: query_row,
                tokens,
            });
        }
        for (li, layer) in layers.iter().enumerate() {
            let s = layer.shape();
            if s.len() != 3 || s[0] != heads || s[1] != tokens || s[2] != tokens {
                return Err(NeuralError::LayerMismatch {
                    layer: li,
                    got: s.first().copied().unwrap_or(0),
                    want: heads,
                    got_tokens: s.get(1).copied().unwrap_or(0),
                    want_tokens: tokens,
                });
            }
            for head in 0..heads {
                for row in 0..tokens {
                    let base = (head * tokens + row) * tokens;
                    let sum: f64 = layer.data()[base..base + tokens]
                        .iter()
                        .map(|&v| v as f64)
                        .sum();
                    if (sum - 1.0).abs() > 1e-5 {
                        return Err(NeuralError::NotRowStochastic {
                            layer: li,
                            head,
                            row,
                            sum,
                        });
                    }
                }
            }
        }
        Ok(Self {
            layers,
            heads,
            tokens,
            query_row,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn query_row(&self) -> usize {
        self.query_row
    }
}

/// For each head, the patch that the rolled-out attention focuses on most.
///
/// Per head h, the joint attention is the matrix product
/// `A_L[h] * A_{L-1}[h] * ... * A_1[h]`; the result is the argmax over the
/// non-query columns of the query row, ties broken by the smallest index.
/// With `identity_mix`, each layer is first replaced by `0.5 (A + I)`
/// (rows stay stochastic), the usual rollout residual correction.
pub fn select_key_patches(stack: &AttentionStack, identity_mix: bool) -> Vec<usize> {
    let t = stack.tokens;
    let mut selected = Vec::with_capacity(stack.heads);
    for head in 0..stack.heads {
        // joint starts as the first layer, then is left-multiplied by each
        // subsequent layer: joint = A_l * joint.
        let mut joint = head_matrix(&stack.layers[0], head, t, identity_mix);
        for layer in &stack.layers[1..] {
            let a = head_matrix(layer, head, t, identity_mix);
            joint = mat_mul(&a, &joint, t);
        }
        let row = &joint[stack.query_row * t..(stack.query_row + 1) * t];
        let mut best: Option<(usize, f64)> = None;
        for (col, &v) in row.iter().enumerate() {
            if col == stack.query_row {
                continue;
            }
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((col, v));
            }
        }
        selected.push(best.expect("tokens >= 2 ensured by non-query column").0);
    }
    selected
}

fn head_matrix(layer: &Tensor<f32>, head: usize, t: usize, identity_mix: bool) -> Vec<f64> {
    let base = head * t * t;
    let mut m: Vec<f64> = layer.data()[base..base + t * t]
        .iter()
        .map(|&v| v as f64)
        .collect();
    if identity_mix {
        for (i, v) in m.iter_mut().enumerate() {
            *v *= 0.5;
            if i / t == i % t {
                *v += 0.5;
            }
        }
    }
    m
}

fn mat_mul(a: &[f64], b: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; t * t];
    for i in 0..t {
        for k in 0..t {
            let aik = a[i * t + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..t {
                out[i * t + j] += aik * b[k * t + j];
            }
        }
    }
    out
}
