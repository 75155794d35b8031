use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator tags, used in error messages, gradient reports and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    Sigmoid,
    MaxPool2,
    BilinearResize,
    MatMul,
    Add,
    Mul,
    GlobalAvgPool,
    SoftmaxRows,
    Slice0,
    StackRows,
    BroadcastSpatial,
    Reshape,
    Sum,
    Scale,
    MseLoss,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::BilinearResize => "bilinear_resize",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::GlobalAvgPool => "global_average_pool",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Slice0 => "slice0",
            OpKind::StackRows => "stack_rows",
            OpKind::BroadcastSpatial => "broadcast_spatial",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
            OpKind::MseLoss => "mse_loss",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a loss aggregates over cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Reduction {
    /// Average over cells.
    #[default]
    Mean,
    /// Plain sum over cells.
    Sum,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    BilinearResize(Var),
    MatMul(Var, Var),
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    GlobalAvgPool(Var),
    SoftmaxRows(Var),
    Slice0 {
        input: Var,
        index: usize,
    },
    StackRows(Vec<Var>),
    BroadcastSpatial(Var),
    Reshape(Var),
    Sum(Var),
    Scale(Var, f64),
    MseLoss {
        pred: Var,
        target: Vec<f64>,
        reduction: Reduction,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: Vec<usize>,
        reduction: Reduction,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::BilinearResize(_) => OpKind::BilinearResize,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::Slice0 { .. } => OpKind::Slice0,
            Op::StackRows(_) => OpKind::StackRows,
            Op::BroadcastSpatial(_) => OpKind::BroadcastSpatial,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::MseLoss { .. } => OpKind::MseLoss,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A tape of operations. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted and backward walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
    track_signature: bool,
    signature: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negates the backward rule of one operator kind. Exists so that the
    /// gradient checker can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Records a hash of every ReLU sign pattern and max-pool argmax; see
    /// [`Graph::activation_signature`].
    pub fn track_signature(&mut self, on: bool) {
        self.track_signature = on;
    }

    /// Hash of the piecewise-linear branch taken by the forward pass. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn activation_signature(&self) -> u64 {
        self.signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let dims = t.dims().to_vec();
        self.nodes.push(Node {
            dims,
            value: t.into_data(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.dims.clone(), n.value.clone()).expect("node dims are consistent")
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the last [`Graph::backward`], if the node took part.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op.kind()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            dims,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mix_signature(&mut self, x: u64) {
        self.signature = crate::rng::mix64(self.signature ^ x.wrapping_add(0x9e37_79b9));
    }

    // ---- operators -------------------------------------------------------

    /// Stride-1 cross-correlation of `[Cin,H,W]` with `[Cout,Cin,k,k]` plus a
    /// per-channel bias, zero padding on every side.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (id, kd, bd) = (self.dims(input), self.dims(kernel), self.dims(bias));
        if id.len() != 3 || kd.len() != 4 || bd.len() != 1 {
            return Err(dim_err!(
                "conv2d expects [C,H,W], [Co,Ci,k,k], [Co]; got {id:?}, {kd:?}, {bd:?}"
            ));
        }
        let (cin, h, w) = (id[0], id[1], id[2]);
        let (cout, kcin, k) = (kd[0], kd[1], kd[2]);
        if kd[3] != k || k % 2 == 0 {
            return Err(dim_err!("conv2d kernel must be square and odd, got {kd:?}"));
        }
        if kcin != cin || bd[0] != cout {
            return Err(dim_err!(
                "conv2d channel mismatch: input {id:?}, kernel {kd:?}, bias {bd:?}"
            ));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(dim_err!(
                "conv2d kernel {k} larger than padded input {id:?}"
            ));
        }
        let ho = h + 2 * padding - k + 1;
        let wo = w + 2 * padding - k + 1;
        let x = &self.nodes[input.0].value;
        let kw = &self.nodes[kernel.0].value;
        let b = &self.nodes[bias.0].value;
        let plane = ho * wo;
        let cols = im2col(x, cin, h, w, k, padding, ho, wo);
        let mut out = vec![0.0; cout * plane];
        for (co, oplane) in out.chunks_mut(plane).enumerate() {
            oplane.fill(b[co]);
        }
        gemm_acc(kw, &cols, &mut out, cout, cin * k * k, plane);
        self.push(
            vec![cout, ho, wo],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
            &[input, kernel, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        if self.track_signature {
            let mut h = 0u64;
            for (i, &v) in self.value(x).iter().enumerate() {
                if v > 0.0 {
                    h = crate::rng::mix64(h ^ i as u64);
                }
            }
            self.mix_signature(h);
        }
        let dims = self.dims(x).to_vec();
        self.push(dims, out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let dims = self.dims(x).to_vec();
        self.push(dims, out, Op::Sigmoid(x), &[x])
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major order within the window.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x);
        if d.len() != 3 || d[1] % 2 != 0 || d[2] % 2 != 0 {
            return Err(dim_err!(
                "maxpool2 expects [C,H,W] with even H and W, got {d:?}"
            ));
        }
        let (c, h, w) = (d[0], d[1], d[2]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = (ch * h + 2 * oy) * w + 2 * ox;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        if self.track_signature {
            let h = argmax
                .iter()
                .fold(0u64, |h, &a| crate::rng::mix64(h ^ a as u64));
            self.mix_signature(h);
        }
        self.push(
            vec![c, ho, wo],
            out,
            Op::MaxPool2 { input: x, argmax },
            &[x],
        )
    }

    /// Bilinear resize of `[C,H,W]` to `[C,Ht,Wt]` with half-pixel centers:
    /// source coordinate `(i + 0.5) * H / Ht - 0.5`, clamped to `[0, H - 1]`.
    pub fn bilinear_resize(&mut self, x: Var, ht: usize, wt: usize) -> Result<Var> {
        let d = self.dims(x);
        if d.len() != 3 || ht == 0 || wt == 0 {
            return Err(dim_err!(
                "bilinear_resize expects [C,H,W] and positive targets, got {d:?} -> ({ht},{wt})"
            ));
        }
        let (c, h, w) = (d[0], d[1], d[2]);
        let ys = resize_axis(h, ht);
        let xs = resize_axis(w, wt);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * ht * wt);
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1, wy) in &ys {
                for &(x0, x1, wx) in &xs {
                    let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], wx);
                    let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], wx);
                    out.push(lerp(top, bottom, wy));
                }
            }
        }
        self.push(vec![c, ht, wt], out, Op::BilinearResize(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(dim_err!("matmul shape mismatch: {ad:?} x {bd:?}"));
        }
        let (n, k, m) = (ad[0], ad[1], bd[1]);
        let out = matmul_raw(self.value(a), self.value(b), n, k, m);
        self.push(vec![n, m], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.check_binary(a, b, "add")?;
        let out = self.binary_values(a, b, broadcast, |x, y| x + y);
        let dims = self.dims(a).to_vec();
        self.push(dims, out, Op::Add { a, b, broadcast }, &[a, b])
    }

    /// Elementwise (Hadamard) product. `b` may be a one-channel `[1,H,W]` map,
    /// which multiplies every channel of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.check_binary(a, b, "mul")?;
        let out = self.binary_values(a, b, broadcast, |x, y| x * y);
        let dims = self.dims(a).to_vec();
        self.push(dims, out, Op::Mul { a, b, broadcast }, &[a, b])
    }

    fn check_binary(&self, a: Var, b: Var, name: &str) -> Result<bool> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad == bd {
            Ok(false)
        } else if ad.len() == 3 && bd.len() == 3 && bd[0] == 1 && ad[1..] == bd[1..] {
            Ok(true)
        } else {
            Err(dim_err!("{name}: incompatible shapes {ad:?} and {bd:?}"))
        }
    }

    fn binary_values(
        &self,
        a: Var,
        b: Var,
        broadcast: bool,
        f: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        let (av, bv) = (self.value(a), self.value(b));
        if broadcast {
            let plane = bv.len();
            av.chunks(plane)
                .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        }
    }

    /// Mean over every axis but the first: `[C, ...] -> [C]`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x);
        if d.len() < 2 {
            return Err(dim_err!("global_average_pool expects [C,H,W], got {d:?}"));
        }
        let c = d[0];
        let plane = self.value(x).len() / c;
        let out = self
            .value(x)
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        self.push(vec![c], out, Op::GlobalAvgPool(x), &[x])
    }

    /// Row-wise softmax of an `[n, m]` matrix, stabilized by the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x);
        if d.len() != 2 {
            return Err(dim_err!("softmax_rows expects [n,m], got {d:?}"));
        }
        let m = d[1];
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let dims = d.to_vec();
        self.push(dims, out, Op::SoftmaxRows(x), &[x])
    }

    /// Entry `index` along the first axis, keeping that axis with size 1.
    pub fn slice0(&mut self, x: Var, index: usize) -> Result<Var> {
        let d = self.dims(x);
        if d.is_empty() || index >= d[0] {
            return Err(dim_err!("slice0 index {index} out of range for {d:?}"));
        }
        let stride = self.value(x).len() / d[0];
        let mut dims = d.to_vec();
        dims[0] = 1;
        let out = self.value(x)[index * stride..(index + 1) * stride].to_vec();
        self.push(dims, out, Op::Slice0 { input: x, index }, &[x])
    }

    /// Stacks equally sized tensors as the rows of an `[n, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(dim_err!("stack_rows needs at least one row"));
        };
        let d = self.value(first).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.value(r).len() != d {
                return Err(dim_err!("stack_rows: rows differ in size"));
            }
            out.extend_from_slice(self.value(r));
        }
        self.push(vec![rows.len(), d], out, Op::StackRows(rows.to_vec()), rows)
    }

    /// Places a length-`d` vector at every spatial position: `[d] -> [d,H,W]`.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if h == 0 || w == 0 {
            return Err(dim_err!("broadcast_spatial needs positive extent"));
        }
        let v = self.value(x);
        let d = v.len();
        let mut out = Vec::with_capacity(d * h * w);
        for &c in v {
            out.extend(core::iter::repeat_n(c, h * w));
        }
        self.push(vec![d, h, w], out, Op::BroadcastSpatial(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let n: usize = dims.iter().product();
        if n != self.value(x).len() || dims.iter().any(|&d| d == 0) {
            return Err(dim_err!("cannot reshape {:?} to {dims:?}", self.dims(x)));
        }
        let out = self.value(x).to_vec();
        self.push(dims.to_vec(), out, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let dims = self.dims(x).to_vec();
        self.push(dims, out, Op::Scale(x, factor), &[x])
    }

    /// Squared error against a fixed target, summed or averaged over cells.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor, reduction: Reduction) -> Result<Var> {
        if self.dims(pred) != target.dims() {
            return Err(dim_err!(
                "mse_loss shape mismatch: prediction {:?}, target {:?}",
                self.dims(pred),
                target.dims()
            ));
        }
        let n = target.len() as f64;
        let s: f64 = self
            .value(pred)
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let loss = match reduction {
            Reduction::Mean => s / n,
            Reduction::Sum => s,
        };
        self.push(
            vec![1],
            vec![loss],
            Op::MseLoss {
                pred,
                target: target.data().to_vec(),
                reduction,
            },
            &[pred],
        )
    }

    /// Softmax cross-entropy over the channel axis of `[C,H,W]` logits against
    /// one class id per cell (row-major over `H x W`).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        target: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let d = self.dims(logits);
        if d.len() != 3 || d[1] * d[2] != target.len() {
            return Err(dim_err!(
                "cross_entropy expects [C,H,W] logits and H*W targets, got {d:?} and {}",
                target.len()
            ));
        }
        let (c, cells) = (d[0], d[1] * d[2]);
        if let Some(&bad) = target.iter().find(|&&t| t >= c) {
            return Err(Error::Domain(format!(
                "class id {bad} out of range for {c} classes"
            )));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; c * cells];
        let mut total = 0.0;
        let mut col = vec![0.0; c];
        for cell in 0..cells {
            for k in 0..c {
                col[k] = z[k * cells + cell];
            }
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(col.iter().map(|&v| math::exp(v - max)).sum::<f64>());
            total += lse - col[target[cell]];
            for k in 0..c {
                probs[k * cells + cell] = math::exp(col[k] - lse);
            }
        }
        let loss = match reduction {
            Reduction::Mean => total / cells as f64,
            Reduction::Sum => total,
        };
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                target: target.to_vec(),
                reduction,
            },
            &[logits],
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a one-element output. Gradients of every node
    /// that depends on a trainable leaf are available through [`Graph::grad`]
    /// afterwards.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(dim_err!(
                "backward needs a one-element output, got {:?}",
                self.nodes[output.0].dims
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let kind = node.op.kind();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient flowing into {kind} (node {i})"
                )));
            }
            if self.fault == Some(kind) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            backward_node(&self.nodes, node, &g, &mut grads);
            if self.fault == Some(kind) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Allocates (zeroed) and returns the gradient buffer of `v`, or `None` when
/// `v` does not require a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::Conv2d {
            input,
            kernel,
            bias,
            padding,
        } => conv2d_backward(nodes, node, g, grads, input, kernel, bias, padding),
        &Op::Relu(x) => {
            let xv = &nodes[x.0].value;
            if let Some(gx) = slot(nodes, grads, x) {
                for ((acc, &xi), &gi) in gx.iter_mut().zip(xv).zip(g) {
                    if xi > 0.0 {
                        *acc += gi;
                    }
                }
            }
        }
        &Op::Sigmoid(x) => {
            let y = &node.value;
            if let Some(gx) = slot(nodes, grads, x) {
                for ((acc, &yi), &gi) in gx.iter_mut().zip(y).zip(g) {
                    *acc += gi * yi * (1.0 - yi);
                }
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for (&idx, &gi) in argmax.iter().zip(g) {
                    gx[idx as usize] += gi;
                }
            }
        }
        &Op::BilinearResize(x) => {
            let d = &nodes[x.0].dims;
            let (c, h, w) = (d[0], d[1], d[2]);
            let (ht, wt) = (node.dims[1], node.dims[2]);
            let ys = resize_axis(h, ht);
            let xs = resize_axis(w, wt);
            if let Some(gx) = slot(nodes, grads, x) {
                let mut k = 0;
                for ch in 0..c {
                    let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for &(y0, y1, wy) in &ys {
                        for &(x0, x1, wx) in &xs {
                            let gi = g[k];
                            k += 1;
                            plane[y0 * w + x0] += gi * (1.0 - wy) * (1.0 - wx);
                            plane[y0 * w + x1] += gi * (1.0 - wy) * wx;
                            plane[y1 * w + x0] += gi * wy * (1.0 - wx);
                            plane[y1 * w + x1] += gi * wy * wx;
                        }
                    }
                }
            }
        }
        &Op::MatMul(a, b) => {
            let (n, k) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
            let m = nodes[b.0].dims[1];
            if nodes[a.0].requires_grad {
                // dA = dC * B^T
                let bv = &nodes[b.0].value;
                let ga = slot(nodes, grads, a).expect("requires grad");
                for i in 0..n {
                    for p in 0..k {
                        let brow = &bv[p * m..(p + 1) * m];
                        let grow = &g[i * m..(i + 1) * m];
                        ga[i * k + p] += dot(grow, brow);
                    }
                }
            }
            if nodes[b.0].requires_grad {
                // dB = A^T * dC
                let av = &nodes[a.0].value;
                let gb = slot(nodes, grads, b).expect("requires grad");
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        for (acc, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *acc += aip * gv;
                        }
                    }
                }
            }
        }
        &Op::Add { a, b, broadcast } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (acc, &gi) in ga.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                accumulate_broadcast(gb, g, broadcast, |gi, _| gi);
            }
        }
        &Op::Mul { a, b, broadcast } => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = slot(nodes, grads, a) {
                let plane = bv.len();
                for (j, (acc, &gi)) in ga.iter_mut().zip(g).enumerate() {
                    let bj = if broadcast { bv[j % plane] } else { bv[j] };
                    *acc += gi * bj;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                accumulate_broadcast(gb, g, broadcast, |gi, j| gi * av[j]);
            }
        }
        &Op::GlobalAvgPool(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                let c = node.value.len();
                let plane = gx.len() / c;
                let inv = 1.0 / plane as f64;
                for (chunk, &gi) in gx.chunks_mut(plane).zip(g) {
                    chunk.iter_mut().for_each(|v| *v += gi * inv);
                }
            }
        }
        &Op::SoftmaxRows(x) => {
            let m = node.dims[1];
            if let Some(gx) = slot(nodes, grads, x) {
                for ((grow, yrow), gout) in
                    gx.chunks_mut(m).zip(node.value.chunks(m)).zip(g.chunks(m))
                {
                    let s = dot(yrow, gout);
                    for ((acc, &y), &gi) in grow.iter_mut().zip(yrow).zip(gout) {
                        *acc += y * (gi - s);
                    }
                }
            }
        }
        &Op::Slice0 { input, index } => {
            if let Some(gx) = slot(nodes, grads, input) {
                let stride = g.len();
                for (acc, &gi) in gx[index * stride..(index + 1) * stride].iter_mut().zip(g) {
                    *acc += gi;
                }
            }
        }
        Op::StackRows(rows) => {
            let d = node.dims[1];
            for (r, &row) in rows.iter().enumerate() {
                if let Some(gr) = slot(nodes, grads, row) {
                    for (acc, &gi) in gr.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += gi;
                    }
                }
            }
        }
        &Op::BroadcastSpatial(x) => {
            let plane = node.dims[1] * node.dims[2];
            if let Some(gx) = slot(nodes, grads, x) {
                for (acc, chunk) in gx.iter_mut().zip(g.chunks(plane)) {
                    *acc += chunk.iter().sum::<f64>();
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (acc, &gi) in gx.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        &Op::Scale(x, factor) => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (acc, &gi) in gx.iter_mut().zip(g) {
                    *acc += gi * factor;
                }
            }
        }
        Op::MseLoss {
            pred,
            target,
            reduction,
        } => {
            let pv = &nodes[pred.0].value;
            let norm = match reduction {
                Reduction::Mean => 2.0 / target.len() as f64,
                Reduction::Sum => 2.0,
            };
            if let Some(gp) = slot(nodes, grads, *pred) {
                for ((acc, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                    *acc += g[0] * norm * (p - t);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            target,
            reduction,
        } => {
            let cells = target.len();
            let norm = match reduction {
                Reduction::Mean => 1.0 / cells as f64,
                Reduction::Sum => 1.0,
            };
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (j, (acc, &p)) in gl.iter_mut().zip(probs).enumerate() {
                    let (k, cell) = (j / cells, j % cells);
                    let y = if target[cell] == k { 1.0 } else { 0.0 };
                    *acc += g[0] * norm * (p - y);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    input: Var,
    kernel: Var,
    bias: Var,
    padding: usize,
) {
    let id = &nodes[input.0].dims;
    let (cin, h, w) = (id[0], id[1], id[2]);
    let k = nodes[kernel.0].dims[2];
    let (cout, ho, wo) = (node.dims[0], node.dims[1], node.dims[2]);
    let plane_out = ho * wo;

    if let Some(gb) = slot(nodes, grads, bias) {
        for (acc, chunk) in gb.iter_mut().zip(g.chunks(plane_out)) {
            *acc += chunk.iter().sum::<f64>();
        }
    }
    let kk = cin * k * k;
    if nodes[kernel.0].requires_grad {
        let cols = im2col(&nodes[input.0].value, cin, h, w, k, padding, ho, wo);
        let gk = slot(nodes, grads, kernel).expect("requires grad");
        // dK = dY * cols^T
        for co in 0..cout {
            let grow = &g[co * plane_out..(co + 1) * plane_out];
            for (r, acc) in gk[co * kk..(co + 1) * kk].iter_mut().enumerate() {
                *acc += dot(grow, &cols[r * plane_out..(r + 1) * plane_out]);
            }
        }
    }
    if nodes[input.0].requires_grad {
        // dcols = K^T * dY, then scatter back onto the input grid.
        let kw = &nodes[kernel.0].value;
        let mut dcols = vec![0.0; kk * plane_out];
        for co in 0..cout {
            let grow = &g[co * plane_out..(co + 1) * plane_out];
            for r in 0..kk {
                let wv = kw[co * kk + r];
                for (a, &gv) in dcols[r * plane_out..(r + 1) * plane_out]
                    .iter_mut()
                    .zip(grow)
                {
                    *a += wv * gv;
                }
            }
        }
        let gx = slot(nodes, grads, input).expect("requires grad");
        col2im_acc(&dcols, gx, cin, h, w, k, padding, ho, wo);
    }
}

/// Unfolds `[Cin,H,W]` into a `[Cin*k*k, Ho*Wo]` matrix of zero-padded patches.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    if k == 1 && padding == 0 {
        return x.to_vec();
    }
    let plane = ho * wo;
    let mut cols = vec![0.0; cin * k * k * plane];
    for ci in 0..cin {
        let iplane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, padding, h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, padding, w, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                let ix_lo = ox_lo + kx - padding;
                let len = ox_hi - ox_lo;
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - padding;
                    row[oy * wo + ox_lo..oy * wo + ox_lo + len]
                        .copy_from_slice(&iplane[iy * w + ix_lo..iy * w + ix_lo + len]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: adds each patch entry back to its input pixel.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    gx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let plane = ho * wo;
    for ci in 0..cin {
        let iplane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, padding, h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, padding, w, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                let ix_lo = ox_lo + kx - padding;
                let len = ox_hi - ox_lo;
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - padding;
                    let dst = &mut iplane[iy * w + ix_lo..iy * w + ix_lo + len];
                    for (d, &v) in dst
                        .iter_mut()
                        .zip(&row[oy * wo + ox_lo..oy * wo + ox_lo + len])
                    {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `c[n x m] += a[n x k] * b[k x m]`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in crow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
}

fn accumulate_broadcast(gb: &mut [f64], g: &[f64], broadcast: bool, f: impl Fn(f64, usize) -> f64) {
    if broadcast {
        let plane = gb.len();
        for (j, &gi) in g.iter().enumerate() {
            gb[j % plane] += f(gi, j);
        }
    } else {
        for (j, (acc, &gi)) in gb.iter_mut().zip(g).enumerate() {
            *acc += f(gi, j);
        }
    }
}

/// Output positions `o` along one axis for which `o + tap - padding` lands
/// inside `[0, extent)`.
#[inline]
fn valid_range(tap: usize, padding: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(tap);
    let hi = (extent + padding).saturating_sub(tap).min(out);
    (lo, hi.max(lo))
}

/// Per-target (lower index, upper index, upper weight) for one resized axis.
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let u = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = math::floor(u) as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, u - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        (1.0 - t) * a + t * b
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + math::exp(-v))
    } else {
        let e = math::exp(v);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler keep independent FMA chains.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}
