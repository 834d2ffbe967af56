//! Naive `f64` evaluator for [`Sequential`] stacks.
//!
//! Direct loop implementations written independently of the tape kernels;
//! used as the finite-difference shadow for gradient checks.

use crate::error::{Error, Result};
use crate::nn::layers::{LayerSpec, Sequential, BN_EPS};

#[derive(Clone, Debug)]
pub struct RefLayer {
    pub spec: LayerSpec,
    pub params: Vec<Vec<f64>>,
    pub buffers: Vec<Vec<f64>>,
}

/// `f64` copy of a network.
#[derive(Clone, Debug)]
pub struct RefNet {
    pub layers: Vec<RefLayer>,
}

/// Output of a reference evaluation.
#[derive(Clone, Debug)]
pub struct RefOutput {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    /// Sign (-1, 0, 1) of every ReLU input, in evaluation order.
    pub relu_signs: Vec<i8>,
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl RefNet {
    pub fn from_sequential(net: &Sequential) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| RefLayer {
                spec: l.spec.clone(),
                params: l.params.iter().map(|p| to64(p.data())).collect(),
                buffers: l.buffers.iter().map(|b| to64(b.data())).collect(),
            })
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params.iter()).map(|p| p.len()).sum()
    }

    /// Mutable access to the `index`-th scalar parameter in storage order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            for p in &mut layer.params {
                if index < p.len() {
                    return &mut p[index];
                }
                index -= p.len();
            }
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, input: &[f64], shape: &[usize], train: bool) -> Result<RefOutput> {
        let mut x = input.to_vec();
        let mut s = shape.to_vec();
        let mut relu_signs = Vec::new();
        for layer in &self.layers {
            let out_shape = layer.spec.output_shape(&s)?;
            x = match layer.spec {
                LayerSpec::Dense { inputs, outputs } => {
                    let (w, b) = (&layer.params[0], &layer.params[1]);
                    let mut y = vec![0.0; s[0] * outputs];
                    for n in 0..s[0] {
                        for o in 0..outputs {
                            let mut acc = b[o];
                            for i in 0..inputs {
                                acc += w[o * inputs + i] * x[n * inputs + i];
                            }
                            y[n * outputs + o] = acc;
                        }
                    }
                    y
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad } => {
                    let (w, b) = (&layer.params[0], &layer.params[1]);
                    let (h, wd) = (s[2] as isize, s[3] as isize);
                    let (ho, wo) = (out_shape[2], out_shape[3]);
                    let mut y = vec![0.0; s[0] * out_channels * ho * wo];
                    for n in 0..s[0] {
                        for co in 0..out_channels {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let mut acc = b[co];
                                    for ci in 0..in_channels {
                                        for ky in 0..kernel {
                                            for kx in 0..kernel {
                                                let iy = (oy * stride + ky) as isize - pad as isize;
                                                let ix = (ox * stride + kx) as isize - pad as isize;
                                                if iy >= 0 && iy < h && ix >= 0 && ix < wd {
                                                    let xi = ((n * in_channels + ci) as isize * h + iy) * wd + ix;
                                                    let wi = ((co * in_channels + ci) * kernel + ky) * kernel + kx;
                                                    acc += w[wi] * x[xi as usize];
                                                }
                                            }
                                        }
                                    }
                                    y[((n * out_channels + co) * ho + oy) * wo + ox] = acc;
                                }
                            }
                        }
                    }
                    y
                }
                LayerSpec::Deconv2d { in_channels, out_channels, kernel, stride, pad, .. } => {
                    let (w, b) = (&layer.params[0], &layer.params[1]);
                    let (h, wd) = (s[2], s[3]);
                    let (ho, wo) = (out_shape[2] as isize, out_shape[3] as isize);
                    let plane = (ho * wo) as usize;
                    let mut y = vec![0.0; s[0] * out_channels * plane];
                    for n in 0..s[0] {
                        for co in 0..out_channels {
                            y[(n * out_channels + co) * plane..(n * out_channels + co + 1) * plane].fill(b[co]);
                        }
                        for ci in 0..in_channels {
                            for iy in 0..h {
                                for ix in 0..wd {
                                    let xv = x[((n * in_channels + ci) * h + iy) * wd + ix];
                                    for co in 0..out_channels {
                                        for ky in 0..kernel {
                                            for kx in 0..kernel {
                                                let oy = (iy * stride + ky) as isize - pad as isize;
                                                let ox = (ix * stride + kx) as isize - pad as isize;
                                                if oy >= 0 && oy < ho && ox >= 0 && ox < wo {
                                                    let wi = ((ci * out_channels + co) * kernel + ky) * kernel + kx;
                                                    let yi = (n * out_channels + co) * plane + (oy * wo + ox) as usize;
                                                    y[yi] += xv * w[wi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    y
                }
                LayerSpec::Relu => x
                    .iter()
                    .map(|&v| {
                        relu_signs.push(if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 });
                        v.max(0.0)
                    })
                    .collect(),
                LayerSpec::Sigmoid => x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
                LayerSpec::BatchNorm { features } => {
                    let n = s[0];
                    let sp: usize = s[2..].iter().product();
                    let idx = |ni: usize, c: usize, j: usize| (ni * features + c) * sp + j;
                    let (g, bt) = (&layer.params[0], &layer.params[1]);
                    let mut y = x.clone();
                    for c in 0..features {
                        let (mean, var) = if train {
                            let m = (n * sp) as f64;
                            let mut mean = 0.0;
                            for ni in 0..n {
                                for j in 0..sp {
                                    mean += x[idx(ni, c, j)];
                                }
                            }
                            mean /= m;
                            let mut var = 0.0;
                            for ni in 0..n {
                                for j in 0..sp {
                                    var += (x[idx(ni, c, j)] - mean).powi(2);
                                }
                            }
                            (mean, var / m)
                        } else {
                            (layer.buffers[0][c], layer.buffers[1][c])
                        };
                        let inv = 1.0 / (var + BN_EPS as f64).sqrt();
                        for ni in 0..n {
                            for j in 0..sp {
                                let k = idx(ni, c, j);
                                y[k] = g[c] * (x[k] - mean) * inv + bt[c];
                            }
                        }
                    }
                    y
                }
                LayerSpec::Flatten | LayerSpec::Unflatten { .. } => x,
                LayerSpec::Crop { height, width } => {
                    let (h, w) = (s[2], s[3]);
                    let (top, left) = ((h - height) / 2, (w - width) / 2);
                    let mut y = Vec::with_capacity(s[0] * s[1] * height * width);
                    for p in 0..s[0] * s[1] {
                        for r in 0..height {
                            for c in 0..width {
                                y.push(x[p * h * w + (r + top) * w + c + left]);
                            }
                        }
                    }
                    y
                }
            };
            s = out_shape;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("reference evaluation produced non-finite values"));
        }
        Ok(RefOutput { values: x, shape: s, relu_signs })
    }
}
