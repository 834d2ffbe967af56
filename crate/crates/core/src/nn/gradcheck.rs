//! Finite-difference verification of tape gradients.
//!
//! The scalar probed is `L = sum_i r_i * y_i` for a fixed random projection
//! `r` of the network output. Autodiff gradients come from the `f32` tape;
//! central differences are taken on the `f64` [`RefNet`] shadow, so rounding
//! in the difference quotient stays far below the tolerances checked.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::layers::{ForwardOpts, Sequential};
use crate::nn::reference::RefNet;
use crate::nn::tape::{GradMode, Tape};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    pub step: f64,
    /// Evaluate batch-norm with batch statistics.
    pub train: bool,
    /// Upper bound on probed coordinates (inputs + parameters); larger
    /// networks are subsampled deterministically.
    pub max_coords: usize,
    /// Per-element relative errors are normalized by
    /// `max(|ad|, |fd|, floor * max_j |fd_j|)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self { step: 1e-3, train: false, max_coords: 4000, floor: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink.
    pub excluded: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with a floor proportional to the gradient's scale.
pub fn relative_errors(autodiff: &[f64], numeric: &[f64], floor: f64) -> Vec<f64> {
    let scale = numeric.iter().chain(autodiff).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (floor * scale).max(1e-12);
    autodiff
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect()
}

/// Compares autodiff gradients of `net` (w.r.t. input and parameters)
/// against central finite differences.
pub fn finite_diff_check(net: &Sequential, input: &Tensor, tolerance: f64, opts: GradCheckOpts) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let out_shape = net.output_shape(input.shape())?;
    let projection = Tensor::randn(&out_shape, 1.0, &mut rng);

    let mut tape = Tape::new(GradMode::Standard);
    let x = tape.leaf(input.clone(), true);
    let pass = net.forward(&mut tape, x, ForwardOpts { train: opts.train, trainable: true })?;
    tape.backward_with_seed(pass.output, projection.data())?;
    let mut ad: Vec<f64> = tape.grad(x).map(|g| g.iter().map(|&v| v as f64).collect()).unwrap_or_else(|| vec![0.0; input.len()]);
    for &p in &pass.params {
        let len = tape.value(p).len();
        match tape.grad(p) {
            Some(g) => ad.extend(g.iter().map(|&v| v as f64)),
            None => ad.extend(std::iter::repeat(0.0).take(len)),
        }
    }

    let base = RefNet::from_sequential(net);
    let x64: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let r64: Vec<f64> = projection.data().iter().map(|&v| v as f64).collect();
    let n_in = x64.len();
    let total = n_in + base.param_count();
    let coords: Vec<usize> = if total <= opts.max_coords {
        (0..total).collect()
    } else {
        let mut c = sample(&mut rng, total, opts.max_coords).into_vec();
        c.sort_unstable();
        c
    };

    let base_signs = base.forward(&x64, input.shape(), opts.train)?.relu_signs;
    let mut ad_kept = Vec::new();
    let mut fd_kept = Vec::new();
    let mut excluded = 0;
    for &c in &coords {
        let eval = |delta: f64| -> Result<(f64, Vec<i8>)> {
            let mut net64 = base.clone();
            let mut xin = x64.clone();
            if c < n_in {
                xin[c] += delta;
            } else {
                *net64.param_mut(c - n_in) += delta;
            }
            let out = net64.forward(&xin, input.shape(), opts.train)?;
            let l = out.values.iter().zip(&r64).map(|(a, b)| a * b).sum();
            Ok((l, out.relu_signs))
        };
        let (lp, sp) = eval(opts.step)?;
        let (lm, sm) = eval(-opts.step)?;
        if sp != sm || sp != base_signs {
            excluded += 1;
            continue;
        }
        fd_kept.push((lp - lm) / (2.0 * opts.step));
        ad_kept.push(ad[c]);
    }
    let errs = relative_errors(&ad_kept, &fd_kept, opts.floor);
    let max_rel_err = errs.into_iter().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, checked: fd_kept.len(), excluded, tolerance, passed: max_rel_err <= tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::LayerSpec;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_layer_is_exact() {
        let net = Sequential::new(vec![LayerSpec::dense(5, 3)], &mut rng(1));
        let x = Tensor::randn(&[2, 5], 1.0, &mut rng(2));
        let rep = finite_diff_check(&net, &x, 1e-6, GradCheckOpts::default()).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.excluded, 0);
        assert_eq!(rep.checked, 10 + 18);
    }

    #[test]
    fn relu_at_exact_zero_is_excluded_not_failed() {
        let net = Sequential::new(vec![LayerSpec::Relu], &mut rng(1));
        let x = Tensor::new(vec![1, 3], vec![0.0, 1.0, -1.0]).unwrap();
        let rep = finite_diff_check(&net, &x, 1e-4, GradCheckOpts::default()).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.excluded >= 1);
    }
}
