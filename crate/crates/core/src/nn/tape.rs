//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse once. In [`GradMode::Guided`] the ReLU rule
//! only lets gradient through where both the forward input and the upstream
//! gradient are positive; every other rule is the exact chain rule.

use crate::error::{Error, Result};
use crate::nn::kernels::{col2im, conv_out, deconv_out, gemm, im2col, ConvGeometry};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradMode {
    #[default]
    Standard,
    Guided,
}

/// Statistics source for a batch-normalization node.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f32 },
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f32], var: &'a [f32], eps: f32 },
}

/// Batch statistics measured by a training-mode batch-norm node
/// (unbiased variance, as used for running-average updates).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry, out_ch: usize },
    Deconv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry, in_ch: usize },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    Reshape { x: NodeId },
    Crop { x: NodeId, top: usize, left: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f32 },
    AddScalar { x: NodeId },
    Square { x: NodeId },
    Exp { x: NodeId },
    Sum { x: NodeId },
    SliceCols { x: NodeId, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation for one forward/backward episode.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    mode: GradMode,
    backward_done: bool,
}

fn bn_dims(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let s = shape[2..].iter().product::<usize>();
    (n, c, s)
}

impl Tape {
    pub fn new(mode: GradMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient accumulated at `id` by the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// `x [N, in] * w[out, in]^T + b[out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!("dense: input {xs:?} vs weight {ws:?} (expected [N, {}])", ws.get(1).copied().unwrap_or(0))));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0f32; n * out];
        gemm(n, inp, out, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != out {
                return Err(Error::dim(format!("dense bias has {} entries, expected {out}", bv.len())));
            }
            for row in y.chunks_mut(out) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![n, out], y)?, rg, Op::Dense { x, w, b }))
    }

    /// Strided 2-D convolution; `x [N, Cin, H, W]`, `w [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::dim(format!("conv2d: input {xs:?} vs weight {ws:?} (expected [N, {}, H, W])", ws.get(1).copied().unwrap_or(0))));
        }
        let k = ws[2];
        let (ho, wo) = match (conv_out(xs[2], k, stride, pad), conv_out(xs[3], k, stride, pad)) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::dim(format!("conv2d: input {xs:?} too small for kernel {k}"))),
        };
        let geom = ConvGeometry { channels: xs[1], big_h: xs[2], big_w: xs[3], small_h: ho, small_w: wo, kernel: k, stride, pad };
        let out_ch = ws[0];
        let n = xs[0];
        let in_len = xs[1] * xs[2] * xs[3];
        let out_len = out_ch * ho * wo;
        let mut col = vec![0.0f32; geom.col_rows() * geom.col_cols()];
        let mut y = vec![0.0f32; n * out_len];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                im2col(&xv[i * in_len..(i + 1) * in_len], &geom, &mut col);
                gemm(out_ch, geom.col_rows(), geom.col_cols(), wv, false, &col, false, 0.0, &mut y[i * out_len..(i + 1) * out_len]);
            }
        }
        if let Some(b) = b {
            self.add_channel_bias(&mut y, b, out_ch, ho * wo)?;
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![n, out_ch, ho, wo], y)?, rg, Op::Conv { x, w, b, geom, out_ch }))
    }

    /// Transposed convolution; `x [N, Cin, H, W]`, `w [Cin, Cout, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn deconv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] {
            return Err(Error::dim(format!("deconv2d: input {xs:?} vs weight {ws:?} (expected [N, {}, H, W])", ws.first().copied().unwrap_or(0))));
        }
        let k = ws[2];
        let (ho, wo) = match (deconv_out(xs[2], k, stride, pad, out_pad), deconv_out(xs[3], k, stride, pad, out_pad)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(Error::dim(format!("deconv2d: invalid geometry for input {xs:?}"))),
        };
        let out_ch = ws[1];
        let geom = ConvGeometry { channels: out_ch, big_h: ho, big_w: wo, small_h: xs[2], small_w: xs[3], kernel: k, stride, pad };
        let in_ch = xs[1];
        let n = xs[0];
        let in_len = in_ch * xs[2] * xs[3];
        let out_len = out_ch * ho * wo;
        let mut col = vec![0.0f32; geom.col_rows() * geom.col_cols()];
        let mut y = vec![0.0f32; n * out_len];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                gemm(geom.col_rows(), in_ch, geom.col_cols(), wv, true, &xv[i * in_len..(i + 1) * in_len], false, 0.0, &mut col);
                col2im(&col, &geom, &mut y[i * out_len..(i + 1) * out_len]);
            }
        }
        if let Some(b) = b {
            self.add_channel_bias(&mut y, b, out_ch, ho * wo)?;
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![n, out_ch, ho, wo], y)?, rg, Op::Deconv { x, w, b, geom, in_ch }))
    }

    fn add_channel_bias(&self, y: &mut [f32], b: NodeId, channels: usize, plane: usize) -> Result<()> {
        let bv = self.value(b).data();
        if bv.len() != channels {
            return Err(Error::dim(format!("bias has {} entries, expected {channels}", bv.len())));
        }
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let bias = bv[i % channels];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        Ok(())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Sigmoid { x })
    }

    /// Per-channel normalization over `[N, C]` or `[N, C, ...]` inputs.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BnMode<'_>) -> Result<(NodeId, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim(format!("batch_norm needs rank >= 2, got {xs:?}")));
        }
        let (n, c, s) = bn_dims(&xs);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim(format!("batch_norm affine params must have {c} entries")));
        }
        let xv = self.value(x).data();
        let m = n * s;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        let (train, eps) = match mode {
            BnMode::Train { eps } => {
                if m < 2 {
                    return Err(Error::dim("training-mode batch_norm needs at least 2 values per channel"));
                }
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        mean[ci] += xv[base..base + s].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        var[ci] += xv[base..base + s].iter().map(|&v| (v as f64 - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (true, eps)
            }
            BnMode::Eval { mean: rm, var: rv, eps } => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::dim(format!("running statistics must have {c} entries")));
                }
                for ci in 0..c {
                    mean[ci] = rm[ci] as f64;
                    var[ci] = rv[ci] as f64;
                }
                (false, eps)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut y = vec![0.0f32; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                let mu = mean[ci] as f32;
                for j in base..base + s {
                    let h = (xv[j] - mu) * inv_std[ci];
                    xhat[j] = h;
                    y[j] = g[ci] * h + bta[ci];
                }
            }
        }
        let stats = train.then(|| {
            let unbias = m as f64 / (m as f64 - 1.0);
            BatchStats {
                mean: mean.iter().map(|&v| v as f32).collect(),
                var: var.iter().map(|&v| (v * unbias) as f32).collect(),
            }
        });
        let rg = self.rg(&[x, gamma, beta]);
        let id = self.push(Tensor::new(xs, y)?, rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train });
        Ok((id, stats))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape { x }))
    }

    /// Center crop of the two trailing spatial axes of `[N, C, H, W]`.
    pub fn center_crop(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < height || xs[3] < width {
            return Err(Error::dim(format!("cannot crop {xs:?} to {height}x{width}")));
        }
        let top = (xs[2] - height) / 2;
        let left = (xs[3] - width) / 2;
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(xs[0] * xs[1] * height * width);
        for plane in xv.chunks(xs[2] * xs[3]) {
            for r in top..top + height {
                y.extend_from_slice(&plane[r * xs[3] + left..r * xs[3] + left + width]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1], height, width], y)?, rg, Op::Crop { x, top, left }))
    }

    fn zip_op(&mut self, a: NodeId, b: NodeId, f: impl Fn(f32, f32) -> f32, name: &str) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!("{name}: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_op(a, b, |x, y| x + y, "add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_op(a, b, |x, y| x - y, "sub")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_op(a, b, |x, y| x * y, "mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul { a, b }))
    }

    fn map_op(&self, x: NodeId, f: impl Fn(f32) -> f32) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let t = self.map_op(x, |a| a * c);
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let t = self.map_op(x, |a| a + c);
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::AddScalar { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let t = self.map_op(x, |a| a * a);
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Square { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let t = self.map_op(x, f32::exp);
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Exp { x })
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), rg, Op::Sum { x })
    }

    /// Columns `start..start+len` of a `[N, C]` node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start + len > xs[1] || len == 0 {
            return Err(Error::dim(format!("slice_cols {start}..{} out of range for {xs:?}", start + len)));
        }
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(xs[0] * len);
        for row in xv.chunks(xs[1]) {
            y.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![xs[0], len], y)?, rg, Op::SliceCols { x, start }))
    }

    /// Backpropagates from a scalar node with seed gradient 1.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if out.0 >= self.nodes.len() {
            return Err(Error::state("backward called before the output was recorded"));
        }
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::state(format!("backward needs a scalar output, got {:?}", self.shape(out))));
        }
        self.backward_with_seed(out, &[1.0])
    }

    /// Backpropagates from `out` with an explicit upstream gradient.
    pub fn backward_with_seed(&mut self, out: NodeId, seed: &[f32]) -> Result<()> {
        if self.nodes.is_empty() || out.0 >= self.nodes.len() {
            return Err(Error::state("backward called before any forward pass"));
        }
        if self.backward_done {
            return Err(Error::state("backward already ran on this tape"));
        }
        if seed.len() != self.nodes[out.0].value.len() {
            return Err(Error::dim(format!("seed has {} entries, output has {}", seed.len(), self.nodes[out.0].value.len())));
        }
        if !self.nodes[out.0].requires_grad {
            return Err(Error::state("output does not depend on any differentiable input"));
        }
        self.backward_done = true;
        self.grads[out.0] = Some(seed.to_vec());
        let guided = self.mode == GradMode::Guided;
        let Tape { nodes, grads, .. } = self;
        for i in (0..=out.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g, guided);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Lazily zero-initialized gradient buffer for `id`, or `None` when the node
/// is not differentiable.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], id: NodeId) -> Option<&'a mut Vec<f32>> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let len = nodes[id.0].value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32], guided: bool) {
    let value = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Dense { x, w, b } => {
            let xs = nodes[x.0].value.shape();
            let (n, inp) = (xs[0], xs[1]);
            let out = value.shape()[1];
            if let Some(dx) = slot(nodes, grads, *x) {
                gemm(n, out, inp, g, false, nodes[w.0].value.data(), false, 1.0, dx);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                gemm(out, n, inp, g, true, nodes[x.0].value.data(), false, 1.0, dw);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in g.chunks(out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Op::Conv { x, w, b, geom, out_ch } => {
            let n = value.shape()[0];
            let in_len = geom.channels * geom.big_h * geom.big_w;
            let plane = geom.col_cols();
            let out_len = out_ch * plane;
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let mut col = vec![0.0f32; rows * cols];
            let need_dx = nodes[x.0].requires_grad;
            let need_dw = nodes[w.0].requires_grad;
            let xv = nodes[x.0].value.data();
            let wv = nodes[w.0].value.data();
            if need_dw {
                let dw = slot(nodes, grads, *w).expect("requires grad");
                for s in 0..n {
                    im2col(&xv[s * in_len..(s + 1) * in_len], geom, &mut col);
                    gemm(*out_ch, cols, rows, &g[s * out_len..(s + 1) * out_len], false, &col, true, 1.0, dw);
                }
            }
            if need_dx {
                let dx = slot(nodes, grads, *x).expect("requires grad");
                for s in 0..n {
                    gemm(rows, *out_ch, cols, wv, true, &g[s * out_len..(s + 1) * out_len], false, 0.0, &mut col);
                    col2im(&col, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                }
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    channel_bias_grad(g, db, *out_ch, plane);
                }
            }
        }
        Op::Deconv { x, w, b, geom, in_ch } => {
            let n = value.shape()[0];
            let plane_in = geom.small_h * geom.small_w;
            let in_len = in_ch * plane_in;
            let out_plane = geom.big_h * geom.big_w;
            let out_len = geom.channels * out_plane;
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let mut col = vec![0.0f32; rows * cols];
            let need_dx = nodes[x.0].requires_grad;
            let need_dw = nodes[w.0].requires_grad;
            let xv = nodes[x.0].value.data();
            let wv = nodes[w.0].value.data();
            let mut dx_buf = need_dx.then(|| vec![0.0f32; n * in_len]);
            let mut dw_buf = need_dw.then(|| vec![0.0f32; in_ch * rows]);
            for s in 0..n {
                im2col(&g[s * out_len..(s + 1) * out_len], geom, &mut col);
                if let Some(dx) = dx_buf.as_mut() {
                    gemm(*in_ch, rows, cols, wv, false, &col, false, 0.0, &mut dx[s * in_len..(s + 1) * in_len]);
                }
                if let Some(dw) = dw_buf.as_mut() {
                    gemm(*in_ch, cols, rows, &xv[s * in_len..(s + 1) * in_len], false, &col, true, 1.0, dw);
                }
            }
            if let Some(buf) = dx_buf {
                add_into(slot(nodes, grads, *x).expect("requires grad"), &buf);
            }
            if let Some(buf) = dw_buf {
                add_into(slot(nodes, grads, *w).expect("requires grad"), &buf);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    channel_bias_grad(g, db, geom.channels, out_plane);
                }
            }
        }
        Op::Relu { x } => {
            let xv = nodes[x.0].value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    let pass = xi > 0.0 && (!guided || gi > 0.0);
                    if pass {
                        *d += gi;
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            let yv = value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(yv) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let (n, c, s) = bn_dims(value.shape());
            let m = (n * s) as f64;
            let gv = nodes[gamma.0].value.data();
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    for j in base..base + s {
                        sum_g[ci] += g[j] as f64;
                        sum_gx[ci] += (g[j] * xhat[j]) as f64;
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        let k = gv[ci] as f64 * inv_std[ci] as f64;
                        for j in base..base + s {
                            let v = if *train {
                                k / m * (m * g[j] as f64 - sum_g[ci] - xhat[j] as f64 * sum_gx[ci])
                            } else {
                                k * g[j] as f64
                            };
                            dx[j] += v as f32;
                        }
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for ci in 0..c {
                    dg[ci] += sum_gx[ci] as f32;
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for ci in 0..c {
                    db[ci] += sum_g[ci] as f32;
                }
            }
        }
        Op::Reshape { x } | Op::AddScalar { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
        }
        Op::Crop { x, top, left } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (h, w) = (value.shape()[2], value.shape()[3]);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (p, gplane) in g.chunks(h * w).enumerate() {
                    let base = p * xs[2] * xs[3];
                    for r in 0..h {
                        let dst = base + (r + top) * xs[3] + left;
                        add_into(&mut dx[dst..dst + w], &gplane[r * w..(r + 1) * w]);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Sub { a, b } => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
            }
        }
        Op::Mul { a, b } => {
            let bv = nodes[b.0].value.data();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            let av = nodes[a.0].value.data();
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
        }
        Op::Square { x } => {
            let xv = nodes[x.0].value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    *d += 2.0 * xi * gi;
                }
            }
        }
        Op::Exp { x } => {
            let yv = value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(yv) {
                    *d += gi * y;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let g0 = g[0];
                dx.iter_mut().for_each(|d| *d += g0);
            }
        }
        Op::SliceCols { x, start } => {
            let cols = nodes[x.0].value.shape()[1];
            let len = value.shape()[1];
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, grow) in g.chunks(len).enumerate() {
                    add_into(&mut dx[r * cols + start..r * cols + start + len], grow);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn channel_bias_grad(g: &[f32], db: &mut [f32], channels: usize, plane: usize) {
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_forward_definition() {
        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 1.0]), true);
        let y = tape.relu(x);
        tape.backward_with_seed(y, &[1.0, 1.0]).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn guided_relu_blocks_negative_inputs_and_negative_gradients() {
        let mut tape = Tape::new(GradMode::Guided);
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0, 3.0]), true);
        let y = tape.relu(x);
        tape.backward_with_seed(y, &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.5]);

        let mut std_tape = Tape::new(GradMode::Standard);
        let x = std_tape.leaf(Tensor::from_vec(vec![-1.0, 2.0, 3.0]), true);
        let y = std_tape.relu(x);
        std_tape.backward_with_seed(y, &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(std_tape.grad(x).unwrap(), &[0.0, -1.0, 0.5]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut tape = Tape::new(GradMode::Standard);
        let mut other = Tape::new(GradMode::Standard);
        let id = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(id), Err(Error::State(_))));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::State(_))));
    }

    #[test]
    fn conv_output_shape_halves() {
        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let w = tape.constant(Tensor::zeros(&[32, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 16, 16]);
    }

    #[test]
    fn dense_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 5]));
        assert!(matches!(tape.dense(x, w, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn frozen_weights_receive_no_gradient() {
        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).reshape(&[1, 2]).unwrap(), true);
        let w = tape.constant(Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap());
        let y = tape.dense(x, w, None).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[3.0, -1.0]);
    }
}
