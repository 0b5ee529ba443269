//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: ops append nodes in topological order, `backward`
//! walks the tape once in reverse. Everything is `f64`; a graph is built,
//! used, and dropped within one training step, single-threaded.
//!
//! Feature maps are channel-major: 3D values are `[C, Z, Y, X]` with X
//! fastest (each channel has the same memory order as a `Volume`), 2D values
//! are `[C, V, U]` with U fastest.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod init;

pub use adam::{AdamError, AdamState, LrSchedule};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use init::{init_gaussian, init_he};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Plain tensor: shape, values, and an optional gradient accumulator used by
/// the optimizer between backward and the parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "shape {:?} does not hold {} values",
                shape,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite("tensor construction"));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    /// Marks the tensor as trainable and attaches a zeroed gradient.
    pub fn into_param(mut self) -> Tensor {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct ConvMeta {
    x: Var,
    w: Var,
    cin: usize,
    cout: usize,
    in_sp: [usize; 3],
    out_sp: [usize; 3],
    kd: [usize; 3],
    pad: [usize; 3],
    stride: usize,
}

enum Op {
    Leaf,
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Concat { xs: Vec<Var>, axis: usize },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Conv(ConvMeta),
    SoftmaxCe { logits: Var, targets: Vec<u8>, classes: usize },
    WeightedSum { x: Var, weights: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Append-only; `backward` consumes intermediate
/// gradients as it goes, so afterwards only leaf gradients remain readable.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite node value");
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, needs_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` with respect to `v`. Present for
    /// leaves that require grad; interior gradients are dropped as backward
    /// passes them.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Non-trainable leaf (images, summaries, constants).
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    /// Trainable leaf: copies the parameter's current values onto the tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        let needs = self.nodes[x.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, needs, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(AutodiffError::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, needs, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        let needs = self.nodes[x.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, needs, Op::Scale { x, c })
    }

    /// Fixed-weight reduction to a scalar; the test scalarizer for gradient
    /// checks and handy for loss mixing.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.nodes[x.0].value.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.nodes[x.0].value.len()
            )));
        }
        let v: f64 = self.nodes[x.0].value.iter().zip(weights).map(|(a, w)| a * w).sum();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(
            vec![1],
            vec![v],
            needs,
            Op::WeightedSum { x, weights: weights.to_vec() },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(AutodiffError::ShapeMismatch("concat of nothing".into()));
        }
        let rank = self.nodes[xs[0].0].shape.len();
        if axis >= rank {
            return Err(AutodiffError::ShapeMismatch(format!(
                "concat axis {axis} for rank {rank}"
            )));
        }
        let mut out_shape = self.nodes[xs[0].0].shape.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != rank
                || s[..axis] != out_shape[..axis]
                || s[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "concat {:?} with {:?} on axis {axis}",
                    out_shape, s
                )));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut value = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &x in xs {
            let part = self.nodes[x.0].shape[axis];
            let src = &self.nodes[x.0].value;
            for o in 0..outer {
                let dst_start = (o * total_axis + offset) * inner;
                let src_start = o * part * inner;
                value[dst_start..dst_start + part * inner]
                    .copy_from_slice(&src[src_start..src_start + part * inner]);
            }
            offset += part;
        }
        let needs = xs.iter().any(|&x| self.nodes[x.0].needs_grad);
        Ok(self.push(out_shape, value, needs, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Per-channel affine y[c, ...] = scale[c] * x[c, ...] + shift[c]; the
    /// normalization stand-in after every conv.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let c = self.nodes[x.0].shape[0];
        if self.nodes[scale.0].shape != [c] || self.nodes[shift.0].shape != [c] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "channel_affine: {c} channels, scale {:?}, shift {:?}",
                self.nodes[scale.0].shape, self.nodes[shift.0].shape
            )));
        }
        let per = self.nodes[x.0].value.len() / c;
        let mut value = vec![0.0; self.nodes[x.0].value.len()];
        for ch in 0..c {
            let a = self.nodes[scale.0].value[ch];
            let b = self.nodes[shift.0].value[ch];
            let src = &self.nodes[x.0].value[ch * per..(ch + 1) * per];
            let dst = &mut value[ch * per..(ch + 1) * per];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = a * s + b;
            }
        }
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[scale.0].needs_grad
            || self.nodes[shift.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, value, needs, Op::ChannelAffine { x, scale, shift }))
    }

    /// 3D cross-correlation. Input `[Cin, Z, Y, X]`, kernel
    /// `[Cout, Cin, KZ, KY, KX]`, one stride for all axes.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv3d wants input rank 4 and kernel rank 5, got {:?} and {:?}",
                xs, ws
            )));
        }
        self.conv_common(
            x,
            w,
            xs[0],
            [xs[1], xs[2], xs[3]],
            ws[0],
            ws[1],
            [ws[2], ws[3], ws[4]],
            stride,
            padding,
            false,
        )
    }

    /// 2D cross-correlation via the 3D routine with a depth-1 axis. Input
    /// `[Cin, V, U]`, kernel `[Cout, Cin, KV, KU]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv2d wants input rank 3 and kernel rank 4, got {:?} and {:?}",
                xs, ws
            )));
        }
        self.conv_common(
            x,
            w,
            xs[0],
            [1, xs[1], xs[2]],
            ws[0],
            ws[1],
            [1, ws[2], ws[3]],
            stride,
            padding,
            true,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_common(
        &mut self,
        x: Var,
        w: Var,
        cin_x: usize,
        in_sp: [usize; 3],
        cout: usize,
        cin_w: usize,
        kd: [usize; 3],
        stride: usize,
        padding: Padding,
        rank2: bool,
    ) -> Result<Var> {
        if cin_x != cin_w {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv channels: input {cin_x}, kernel {cin_w}"
            )));
        }
        if stride == 0 {
            return Err(AutodiffError::ShapeMismatch("conv stride 0".into()));
        }
        let mut out_sp = [0usize; 3];
        let mut pad = [0usize; 3];
        for a in 0..3 {
            let (o, p) = conv_axis(in_sp[a], kd[a], stride, padding).ok_or_else(|| {
                AutodiffError::ShapeMismatch(format!(
                    "conv axis {a}: kernel {} over extent {} (valid padding)",
                    kd[a], in_sp[a]
                ))
            })?;
            out_sp[a] = o;
            pad[a] = p;
        }
        let meta = ConvMeta { x, w, cin: cin_x, cout, in_sp, out_sp, kd, pad, stride };
        let value = conv_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, &meta);
        let shape = if rank2 {
            vec![cout, out_sp[1], out_sp[2]]
        } else {
            vec![cout, out_sp[0], out_sp[1], out_sp[2]]
        };
        let needs = self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad;
        Ok(self.push(shape, value, needs, Op::Conv(meta)))
    }

    /// Mean over voxels of -log softmax(logits)[target]; max-subtracted for
    /// stability. Logits `[C, ...spatial]`, targets one label per voxel in
    /// spatial order.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let shape = &self.nodes[logits.0].shape;
        let classes = shape[0];
        let nvox: usize = shape[1..].iter().product();
        if targets.len() != nvox {
            return Err(AutodiffError::ShapeMismatch(format!(
                "softmax_ce: {} targets for {nvox} voxels",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= classes) {
            return Err(AutodiffError::LabelOutOfRange { label: bad, classes });
        }
        let v = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let mut m = f64::NEG_INFINITY;
            for c in 0..classes {
                m = m.max(v[c * nvox + i]);
            }
            let mut z = 0.0;
            for c in 0..classes {
                z += (v[c * nvox + i] - m).exp();
            }
            total += z.ln() - (v[t as usize * nvox + i] - m);
        }
        let mean = total / nvox as f64;
        if !mean.is_finite() {
            return Err(AutodiffError::NonFinite("softmax_ce"));
        }
        let needs = self.nodes[logits.0].needs_grad;
        Ok(self.push(
            vec![1],
            vec![mean],
            needs,
            Op::SoftmaxCe { logits, targets: targets.to_vec(), classes },
        ))
    }

    /// Channel softmax of a logits node, computed off-tape (inference).
    pub fn softmax_values(&self, logits: Var) -> Vec<f64> {
        let shape = &self.nodes[logits.0].shape;
        let classes = shape[0];
        let nvox: usize = shape[1..].iter().product();
        softmax_channels(&self.nodes[logits.0].value, classes, nvox)
    }

    /// Reverse pass from a scalar node. Leaf gradients accumulate in the
    /// graph; read them with [`Graph::grad`]. Interior gradients are freed
    /// on the way down.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "backward from non-scalar {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                self.grads[id] = None;
                continue;
            }
            let Some(gout) = self.grads[id].take() else { continue };
            self.apply_backward(id, &gout);
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.grads[id] = Some(gout);
            }
        }
        Ok(())
    }

    fn grad_mut(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn apply_backward(&mut self, id: usize, gout: &[f64]) {
        // split borrows: the op description is moved out and restored
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Relu { x } => {
                if self.needs(*x) {
                    let mask: Vec<bool> =
                        self.nodes[x.0].value.iter().map(|&v| v > 0.0).collect();
                    let g = self.grad_mut(*x);
                    for (i, (&go, keep)) in gout.iter().zip(mask).enumerate() {
                        if keep {
                            g[i] += go;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &v in [a, b] {
                    if self.needs(v) {
                        let g = self.grad_mut(v);
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let c = *c;
                    let g = self.grad_mut(*x);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += c * go;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    let go = gout[0];
                    let g = self.grad_mut(*x);
                    for (gi, &w) in g.iter_mut().zip(weights) {
                        *gi += w * go;
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[id].shape.clone();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let part = self.nodes[x.0].shape[*axis];
                    if self.needs(x) {
                        let g = self.grad_mut(x);
                        for o in 0..outer {
                            let src_start = (o * total_axis + offset) * inner;
                            let dst_start = o * part * inner;
                            for i in 0..part * inner {
                                g[dst_start + i] += gout[src_start + i];
                            }
                        }
                    }
                    offset += part;
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let c = self.nodes[x.0].shape[0];
                let per = self.nodes[x.0].value.len() / c;
                if self.needs(*x) {
                    let a: Vec<f64> = self.nodes[scale.0].value.clone();
                    let g = self.grad_mut(*x);
                    for ch in 0..c {
                        for i in 0..per {
                            g[ch * per + i] += a[ch] * gout[ch * per + i];
                        }
                    }
                }
                if self.needs(*scale) {
                    let xv: Vec<f64> = self.nodes[x.0].value.clone();
                    let g = self.grad_mut(*scale);
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for i in 0..per {
                            acc += xv[ch * per + i] * gout[ch * per + i];
                        }
                        g[ch] += acc;
                    }
                }
                if self.needs(*shift) {
                    let g = self.grad_mut(*shift);
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for i in 0..per {
                            acc += gout[ch * per + i];
                        }
                        g[ch] += acc;
                    }
                }
            }
            Op::Conv(meta) => {
                if self.needs(meta.x) {
                    let w = self.nodes[meta.w.0].value.clone();
                    let gx = conv_backward_input(gout, &w, meta);
                    let g = self.grad_mut(meta.x);
                    for (gi, d) in g.iter_mut().zip(gx) {
                        *gi += d;
                    }
                }
                if self.needs(meta.w) {
                    let xv = self.nodes[meta.x.0].value.clone();
                    let gw = conv_backward_kernel(gout, &xv, meta);
                    let g = self.grad_mut(meta.w);
                    for (gi, d) in g.iter_mut().zip(gw) {
                        *gi += d;
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, classes } => {
                if self.needs(*logits) {
                    let nvox = targets.len();
                    let probs = softmax_channels(&self.nodes[logits.0].value, *classes, nvox);
                    let go = gout[0] / nvox as f64;
                    let g = self.grad_mut(*logits);
                    for (i, &t) in targets.iter().enumerate() {
                        for c in 0..*classes {
                            let ind = (c == t as usize) as usize as f64;
                            g[c * nvox + i] += go * (probs[c * nvox + i] - ind);
                        }
                    }
                }
            }
        }
        self.nodes[id].op = op;
    }
}

/// Output extent and low-side padding for one axis. TF-style: Same keeps
/// out = ceil(in/stride); Valid requires kernel ≤ extent.
fn conv_axis(in_len: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if k > in_len {
                return None;
            }
            Some(((in_len - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = in_len.div_ceil(stride);
            let span = (out - 1) * stride + k;
            let pad_total = span.saturating_sub(in_len);
            Some((out, pad_total / 2))
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], m: &ConvMeta) -> Vec<f64> {
    let [oz, oy, ox] = m.out_sp;
    let mut out = vec![0.0; m.cout * oz * oy * ox];
    if m.stride == 1 {
        conv_forward_s1(x, w, m, &mut out);
    } else {
        conv_forward_generic(x, w, m, &mut out);
    }
    out
}

/// Valid output range `[lo, hi)` on one axis for kernel offset `k`:
/// input index o*stride - pad + k must land in [0, in_len).
fn out_range(in_len: usize, out_len: usize, pad: usize, k: usize, stride: usize) -> (usize, usize) {
    let lo_num = pad as i64 - k as i64;
    let lo = if lo_num <= 0 { 0 } else { (lo_num as usize).div_ceil(stride) };
    let hi_num = in_len as i64 - 1 + pad as i64 - k as i64;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Stride-1 path: each kernel scalar does one shifted row multiply-add, so
/// the inner loop is contiguous on both sides.
fn conv_forward_s1(x: &[f64], w: &[f64], m: &ConvMeta, out: &mut [f64]) {
    let [nz, ny, nx] = m.in_sp;
    let [oz, oy, ox] = m.out_sp;
    let [kzn, kyn, kxn] = m.kd;
    let [pz, py, px] = m.pad;
    for co in 0..m.cout {
        for ci in 0..m.cin {
            for kz in 0..kzn {
                let (z_lo, z_hi) = out_range(nz, oz, pz, kz, 1);
                for ky in 0..kyn {
                    let (y_lo, y_hi) = out_range(ny, oy, py, ky, 1);
                    for kx in 0..kxn {
                        let (x_lo, x_hi) = out_range(nx, ox, px, kx, 1);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let wv = w[(((co * m.cin + ci) * kzn + kz) * kyn + ky) * kxn + kx];
                        for z0 in z_lo..z_hi {
                            let iz = z0 + kz - pz;
                            for y0 in y_lo..y_hi {
                                let iy = y0 + ky - py;
                                let src = (ci * nz + iz) * ny * nx + iy * nx + (x_lo + kx - px);
                                let dst = (co * oz + z0) * oy * ox + y0 * ox + x_lo;
                                let n = x_hi - x_lo;
                                let xr = &x[src..src + n];
                                let or = &mut out[dst..dst + n];
                                for i in 0..n {
                                    or[i] += wv * xr[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward_generic(x: &[f64], w: &[f64], m: &ConvMeta, out: &mut [f64]) {
    let [nz, ny, nx] = m.in_sp;
    let [oz, oy, ox] = m.out_sp;
    let [kzn, kyn, kxn] = m.kd;
    let [pz, py, px] = m.pad;
    let s = m.stride;
    for co in 0..m.cout {
        for z0 in 0..oz {
            for y0 in 0..oy {
                for x0 in 0..ox {
                    let mut acc = 0.0;
                    for ci in 0..m.cin {
                        for kz in 0..kzn {
                            let iz = (z0 * s + kz) as i64 - pz as i64;
                            if iz < 0 || iz >= nz as i64 {
                                continue;
                            }
                            for ky in 0..kyn {
                                let iy = (y0 * s + ky) as i64 - py as i64;
                                if iy < 0 || iy >= ny as i64 {
                                    continue;
                                }
                                for kx in 0..kxn {
                                    let ix = (x0 * s + kx) as i64 - px as i64;
                                    if ix < 0 || ix >= nx as i64 {
                                        continue;
                                    }
                                    let xi = (ci * nz + iz as usize) * ny * nx
                                        + iy as usize * nx
                                        + ix as usize;
                                    let wi =
                                        (((co * m.cin + ci) * kzn + kz) * kyn + ky) * kxn + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[(co * oz + z0) * oy * ox + y0 * ox + x0] = acc;
                }
            }
        }
    }
}

fn conv_backward_input(gout: &[f64], w: &[f64], m: &ConvMeta) -> Vec<f64> {
    let [nz, ny, nx] = m.in_sp;
    let [oz, oy, ox] = m.out_sp;
    let [kzn, kyn, kxn] = m.kd;
    let [pz, py, px] = m.pad;
    let s = m.stride;
    let mut gx = vec![0.0; m.cin * nz * ny * nx];
    if s == 1 {
        for co in 0..m.cout {
            for ci in 0..m.cin {
                for kz in 0..kzn {
                    let (z_lo, z_hi) = out_range(nz, oz, pz, kz, 1);
                    for ky in 0..kyn {
                        let (y_lo, y_hi) = out_range(ny, oy, py, ky, 1);
                        for kx in 0..kxn {
                            let (x_lo, x_hi) = out_range(nx, ox, px, kx, 1);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let wv = w[(((co * m.cin + ci) * kzn + kz) * kyn + ky) * kxn + kx];
                            for z0 in z_lo..z_hi {
                                let iz = z0 + kz - pz;
                                for y0 in y_lo..y_hi {
                                    let iy = y0 + ky - py;
                                    let src =
                                        (co * oz + z0) * oy * ox + y0 * ox + x_lo;
                                    let dst = (ci * nz + iz) * ny * nx
                                        + iy * nx
                                        + (x_lo + kx - px);
                                    let n = x_hi - x_lo;
                                    let gr = &gout[src..src + n];
                                    let gxr = &mut gx[dst..dst + n];
                                    for i in 0..n {
                                        gxr[i] += wv * gr[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        for co in 0..m.cout {
            for z0 in 0..oz {
                for y0 in 0..oy {
                    for x0 in 0..ox {
                        let go = gout[(co * oz + z0) * oy * ox + y0 * ox + x0];
                        for ci in 0..m.cin {
                            for kz in 0..kzn {
                                let iz = (z0 * s + kz) as i64 - pz as i64;
                                if iz < 0 || iz >= nz as i64 {
                                    continue;
                                }
                                for ky in 0..kyn {
                                    let iy = (y0 * s + ky) as i64 - py as i64;
                                    if iy < 0 || iy >= ny as i64 {
                                        continue;
                                    }
                                    for kx in 0..kxn {
                                        let ix = (x0 * s + kx) as i64 - px as i64;
                                        if ix < 0 || ix >= nx as i64 {
                                            continue;
                                        }
                                        let xi = (ci * nz + iz as usize) * ny * nx
                                            + iy as usize * nx
                                            + ix as usize;
                                        let wi = (((co * m.cin + ci) * kzn + kz) * kyn + ky)
                                            * kxn
                                            + kx;
                                        gx[xi] += w[wi] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_backward_kernel(gout: &[f64], x: &[f64], m: &ConvMeta) -> Vec<f64> {
    let [nz, ny, nx] = m.in_sp;
    let [oz, oy, ox] = m.out_sp;
    let [kzn, kyn, kxn] = m.kd;
    let [pz, py, px] = m.pad;
    let s = m.stride;
    let mut gw = vec![0.0; m.cout * m.cin * kzn * kyn * kxn];
    if s == 1 {
        for co in 0..m.cout {
            for ci in 0..m.cin {
                for kz in 0..kzn {
                    let (z_lo, z_hi) = out_range(nz, oz, pz, kz, 1);
                    for ky in 0..kyn {
                        let (y_lo, y_hi) = out_range(ny, oy, py, ky, 1);
                        for kx in 0..kxn {
                            let (x_lo, x_hi) = out_range(nx, ox, px, kx, 1);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for z0 in z_lo..z_hi {
                                let iz = z0 + kz - pz;
                                for y0 in y_lo..y_hi {
                                    let iy = y0 + ky - py;
                                    let src =
                                        (co * oz + z0) * oy * ox + y0 * ox + x_lo;
                                    let xin = (ci * nz + iz) * ny * nx
                                        + iy * nx
                                        + (x_lo + kx - px);
                                    let n = x_hi - x_lo;
                                    let gr = &gout[src..src + n];
                                    let xr = &x[xin..xin + n];
                                    for i in 0..n {
                                        acc += gr[i] * xr[i];
                                    }
                                }
                            }
                            gw[(((co * m.cin + ci) * kzn + kz) * kyn + ky) * kxn + kx] += acc;
                        }
                    }
                }
            }
        }
    } else {
        for co in 0..m.cout {
            for z0 in 0..oz {
                for y0 in 0..oy {
                    for x0 in 0..ox {
                        let go = gout[(co * oz + z0) * oy * ox + y0 * ox + x0];
                        for ci in 0..m.cin {
                            for kz in 0..kzn {
                                let iz = (z0 * s + kz) as i64 - pz as i64;
                                if iz < 0 || iz >= nz as i64 {
                                    continue;
                                }
                                for ky in 0..kyn {
                                    let iy = (y0 * s + ky) as i64 - py as i64;
                                    if iy < 0 || iy >= ny as i64 {
                                        continue;
                                    }
                                    for kx in 0..kxn {
                                        let ix = (x0 * s + kx) as i64 - px as i64;
                                        if ix < 0 || ix >= nx as i64 {
                                            continue;
                                        }
                                        let xi = (ci * nz + iz as usize) * ny * nx
                                            + iy as usize * nx
                                            + ix as usize;
                                        let wi = (((co * m.cin + ci) * kzn + kz) * kyn + ky)
                                            * kxn
                                            + kx;
                                        gw[wi] += x[xi] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Channel softmax with max-subtraction; `values` is `[C, nvox]` class-major.
pub fn softmax_channels(values: &[f64], classes: usize, nvox: usize) -> Vec<f64> {
    debug_assert_eq!(values.len(), classes * nvox);
    let mut out = vec![0.0; values.len()];
    for i in 0..nvox {
        let mut m = f64::NEG_INFINITY;
        for c in 0..classes {
            m = m.max(values[c * nvox + i]);
        }
        let mut z = 0.0;
        for c in 0..classes {
            let e = (values[c * nvox + i] - m).exp();
            out[c * nvox + i] = e;
            z += e;
        }
        for c in 0..classes {
            out[c * nvox + i] /= z;
        }
    }
    out
}

/// Plain cross-entropy of an already-softmaxed probability field against
/// hard labels, mean over voxels. Used for the nearest-target selection,
/// which needs losses without building tapes.
pub fn cross_entropy_of_probs(probs: &[f64], classes: usize, targets: &[u8]) -> f64 {
    let nvox = targets.len();
    debug_assert_eq!(probs.len(), classes * nvox);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        total += -(probs[t as usize * nvox + i].max(1e-300)).ln();
    }
    total / nvox as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_vec(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
        (0..n).map(|_| rng.next_gaussian()).collect()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(vec![1, 3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let w = g.input(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = g.conv2d(x, w, 1, Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 4]);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv3d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(vec![1, 2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let w = g.input(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let y = g.conv3d(x, w, 1, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3, 4]);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv2d_ones_kernel_counts_window() {
        let mut g = Graph::new();
        let x = g.input(vec![1, 5, 5], vec![1.0; 25]).unwrap();
        let w = g.input(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = g.conv2d(x, w, 1, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        assert!(g.value(y).iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_is_cross_correlation_not_flipped() {
        let mut g = Graph::new();
        let x = g.input(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = g.input(vec![1, 1, 1, 3], vec![1.0, 10.0, 100.0]).unwrap();
        let y = g.conv2d(x, w, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y), &[321.0, 432.0]);
    }

    #[test]
    fn conv_same_padding_border() {
        let mut g = Graph::new();
        let x = g.input(vec![1, 3, 3, 3], vec![1.0; 27]).unwrap();
        let w = g.input(vec![1, 1, 3, 3, 3], vec![1.0; 27]).unwrap();
        let y = g.conv3d(x, w, 1, Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);
        let v = g.value(y);
        assert_eq!(v[13], 27.0); // center sees the full window
        assert_eq!(v[0], 8.0); // corner sees a 2x2x2 window
    }

    #[test]
    fn conv_stride_two_matches_enumeration() {
        let mut rng = SplitMix64::new(5);
        let xv = rand_vec(2 * 5 * 6 * 7, &mut rng);
        let wv = rand_vec(3 * 2 * 3 * 3 * 3, &mut rng);
        let mut g = Graph::new();
        let x = g.input(vec![2, 5, 6, 7], xv.clone()).unwrap();
        let w = g.input(vec![3, 2, 3, 3, 3], wv.clone()).unwrap();
        let y = g.conv3d(x, w, 2, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[3, 2, 2, 3]);
        // direct definition: out[o] = sum x[o*2 + k] w[k]
        let (nz, ny, nx) = (5, 6, 7);
        for co in 0..3 {
            for z0 in 0..2 {
                for y0 in 0..2 {
                    for x0 in 0..3 {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let xi = (ci * nz + (z0 * 2 + kz)) * ny * nx
                                            + (y0 * 2 + ky) * nx
                                            + (x0 * 2 + kx);
                                        let wi =
                                            (((co * 2 + ci) * 3 + kz) * 3 + ky) * 3 + kx;
                                        acc += xv[xi] * wv[wi];
                                    }
                                }
                            }
                        }
                        let got = g.value(y)[(co * 2 + z0) * 2 * 3 + y0 * 3 + x0];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversize_valid() {
        let mut g = Graph::new();
        let x = g.input(vec![2, 3, 3], vec![0.0; 18]).unwrap();
        let w = g.input(vec![1, 3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap();
        assert!(g.conv2d(x, w, 1, Padding::Same).is_err());
        let w2 = g.input(vec![1, 2, 5, 5], vec![0.0; 50]).unwrap();
        assert!(g.conv2d(x, w2, 1, Padding::Valid).is_err());
    }

    #[test]
    fn relu_and_concat_shapes() {
        let mut g = Graph::new();
        let x = g.input(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let a = g.input(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let b = g.input(vec![2, 5], (0..10).map(|v| v as f64).collect()).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
        assert_eq!(
            g.value(c),
            &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 5.0, 6.0, 7.0, 8.0, 9.0]
        );
        assert!(g.concat(&[a, x], 0).is_err());
    }

    #[test]
    fn channel_affine_values() {
        let mut g = Graph::new();
        let x = g.input(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = g.input(vec![2], vec![10.0, 100.0]).unwrap();
        let b = g.input(vec![2], vec![0.5, -0.5]).unwrap();
        let y = g.channel_affine(x, s, b).unwrap();
        assert_eq!(g.value(y), &[10.5, 20.5, 299.5, 399.5]);
    }

    #[test]
    fn softmax_ce_uniform_and_confident() {
        let mut g = Graph::new();
        let logits = g.input(vec![4, 2], vec![0.3; 8]).unwrap();
        let l = g.softmax_ce(logits, &[0, 3]).unwrap();
        assert!((g.value(l)[0] - 4.0f64.ln()).abs() < 1e-12);

        // +10 margin toward the target class: loss = ln(1 + e^-10) < 1e-4
        let mut v = vec![0.0; 4];
        v[0] = 10.0; // class 0 at voxel 0
        v[2 + 1] = 10.0; // class 1 at voxel 1
        let logits = g.input(vec![2, 2], v).unwrap();
        let l = g.softmax_ce(logits, &[0, 1]).unwrap();
        assert!(g.value(l)[0] < 1e-4);

        let logits = g.input(vec![2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(
            g.softmax_ce(logits, &[0, 2]),
            Err(AutodiffError::LabelOutOfRange { label: 2, classes: 2 })
        );
    }

    #[test]
    fn softmax_channels_sums_to_one() {
        let mut rng = SplitMix64::new(9);
        let v = rand_vec(3 * 10, &mut rng);
        let p = softmax_channels(&v, 3, 10);
        for i in 0..10 {
            let s: f64 = (0..3).map(|c| p[c * 10 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((0..3).all(|c| p[c * 10 + i] > 0.0));
        }
    }

    #[test]
    fn concat_routes_gradients_to_operands() {
        let mut g = Graph::new();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().into_param();
        let b = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().into_param();
        let va = g.param(&a);
        let vb = g.param(&b);
        let c = g.concat(&[va, vb], 1).unwrap();
        let weights: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let l = g.weighted_sum(c, &weights).unwrap();
        g.backward(l).unwrap();
        // row-major [2, 5]: a gets columns 0..2, b gets columns 2..5
        assert_eq!(g.grad(va).unwrap(), &[1.0, 2.0, 6.0, 7.0]);
        assert_eq!(g.grad(vb).unwrap(), &[3.0, 4.0, 5.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn backward_is_linear_over_loss_sum() {
        let mut rng = SplitMix64::new(77);
        let xv = rand_vec(12, &mut rng);
        let w1: Vec<f64> = rand_vec(12, &mut rng);
        let w2: Vec<f64> = rand_vec(12, &mut rng);
        let t = Tensor::new(vec![3, 4], xv).unwrap().into_param();

        let grad_of = |weights: Vec<Vec<f64>>| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.param(&t);
            let r = g.relu(x);
            let mut losses = Vec::new();
            for w in &weights {
                losses.push(g.weighted_sum(r, w).unwrap());
            }
            let total = if losses.len() == 1 {
                losses[0]
            } else {
                g.add(losses[0], losses[1]).unwrap()
            };
            g.backward(total).unwrap();
            g.grad(x).unwrap().to_vec()
        };

        let g1 = grad_of(vec![w1.clone()]);
        let g2 = grad_of(vec![w2.clone()]);
        let g12 = grad_of(vec![w1, w2]);
        for i in 0..12 {
            assert!((g12[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_backward_bit_deterministic() {
        let mut rng = SplitMix64::new(4242);
        let xv = rand_vec(2 * 4 * 4, &mut rng);
        let wv = rand_vec(3 * 2 * 3 * 3, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let x = g.input(vec![2, 4, 4], xv.clone()).unwrap();
            let w = Tensor::new(vec![3, 2, 3, 3], wv.clone()).unwrap().into_param();
            let vw = g.param(&w);
            let y = g.conv2d(x, vw, 1, Padding::Same).unwrap();
            let l = g.softmax_ce(y, &[0; 16]).unwrap();
            g.backward(l).unwrap();
            (g.value(l).to_vec(), g.grad(vw).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
