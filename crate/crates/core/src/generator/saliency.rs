use crate::agent::{argmax, QNetwork};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{ForwardOpts, GradMode, Tape};

const BLUR: usize = 5;
const CHUNK: usize = 64;

/// Per-pixel weights over an `H x W` frame, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f32>,
    /// Set when the gradient vanished and the uniform mask was substituted.
    pub uniform_fallback: bool,
}

impl SaliencyMask {
    pub fn uniform(height: usize, width: usize) -> Self {
        let d = height * width;
        Self { height, width, weights: vec![1.0 / d as f32; d], uniform_fallback: true }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().map(|&v| v as f64).sum()
    }

    /// Builds a mask from raw nonnegative per-pixel magnitudes.
    pub fn from_magnitudes(height: usize, width: usize, raw: &[f64], blur: bool) -> Self {
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Self::uniform(height, width);
        }
        let mut w: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        if blur {
            w = box_blur(&w, height, width, BLUR);
        }
        let total: f64 = w.iter().sum();
        let weights = w.iter().map(|v| (v / total) as f32).collect();
        Self { height, width, weights, uniform_fallback: false }
    }
}

/// Zero-padded `size x size` mean filter.
pub fn box_blur(x: &[f64], height: usize, width: usize, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let norm = (size * size) as f64;
    let mut out = vec![0.0; x.len()];
    for y in 0..height as isize {
        for c in 0..width as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, c + dx);
                    if yy >= 0 && yy < height as isize && xx >= 0 && xx < width as isize {
                        acc += x[(yy * width as isize + xx) as usize];
                    }
                }
            }
            out[(y * width as isize + c) as usize] = acc / norm;
        }
    }
    out
}

/// Guided-backprop saliency of the greedy action's q-value for each frame:
/// per-pixel L1 norm over stacked frames, normalized, optionally blurred
/// with a 5x5 mean filter and renormalized.
pub fn saliency_masks(agent: &QNetwork, frames: &[Observation], blur: bool) -> Result<Vec<SaliencyMask>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(CHUNK) {
        let batch = Observation::batch(chunk)?;
        let mut tape = Tape::new(GradMode::Guided);
        let x = tape.leaf(batch, true);
        let pass = agent.forward(&mut tape, x, ForwardOpts::EVAL)?;
        let m = agent.action_count();
        let q = tape.value(pass.output).data().to_vec();
        let mut seed = vec![0.0; q.len()];
        for (i, row) in q.chunks(m).enumerate() {
            seed[i * m + argmax(row)] = 1.0;
        }
        tape.backward_with_seed(pass.output, &seed)?;
        let [k, h, w] = agent.input_shape();
        let d = h * w;
        let grad = tape.grad(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; chunk.len() * k * d]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite saliency gradient"));
        }
        for g in grad.chunks(k * d) {
            let mut raw = vec![0.0f64; d];
            for c in 0..k {
                for (p, r) in raw.iter_mut().enumerate() {
                    *r += (g[c * d + p] as f64).abs();
                }
            }
            out.push(SaliencyMask::from_magnitudes(h, w, &raw, blur));
        }
    }
    Ok(out)
}

pub fn saliency_mask(agent: &QNetwork, s: &Observation, blur: bool) -> Result<SaliencyMask> {
    Ok(saliency_masks(agent, std::slice::from_ref(s), blur)?.remove(0))
}
