//! Dense f64 tensors and a reverse-mode tape.
//!
//! A [`Graph`] is an arena of nodes. Every op evaluates eagerly and appends
//! a node holding its value plus whatever the backward rule needs, so the
//! arena order is already a topological order and [`Graph::backward`] just
//! walks it in reverse.
//!
//! ```
//! use ltcl::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = g.dot(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Graphs are single-threaded. Independent graphs may live on different
//! threads; nothing here is shared.

use crate::error::{Error, Result};

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters of a 2D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<f64>,
        spec: Conv2dSpec,
        kernel: (usize, usize),
        out_hw: (usize, usize),
    },
    Relu(Var),
    MeanPool(Var),
    RoiPool {
        input: Var,
        cells: Vec<usize>,
    },
    L2Normalize {
        input: Var,
        norm: f64,
    },
    Dot(Var, Var),
    Log(Var),
    Exp(Var),
    Softmax {
        input: Var,
        temperature: f64,
    },
    LogSoftmax {
        input: Var,
        temperature: f64,
    },
    LogSumExp(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    Concat(Vec<Var>),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when some path from a gradient-requiring leaf reaches this node.
    tracked: bool,
    /// Accumulated gradient, only for leaves created with `param`.
    grad: Option<Vec<f64>>,
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        let n = value.numel();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].grad = Some(vec![0.0; n]);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        let tr = self.t(a) || self.t(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        let tr = self.t(a) || self.t(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b), tr))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        let tr = self.t(a) || self.t(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), tr))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * c).collect();
        let shape = x.shape().to_vec();
        let tr = self.t(a);
        self.push(Tensor { shape, data }, Op::Scale(a, c), tr)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let tr = self.t(a) || self.t(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            tr,
        ))
    }

    /// `[m, k] × [k] → [m]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.value(a).shape(), self.value(x).shape());
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: sa.to_vec(),
                right: sx.to_vec(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let ad = self.value(a).data();
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..m).map(|i| dot(&ad[i * k..(i + 1) * k], xd)).collect();
        let tr = self.t(a) || self.t(x);
        Ok(self.push(Tensor::vector(out), Op::MatVec(a, x), tr))
    }

    /// 2D convolution. `input` is `[C, H, W]`, `weight` is
    /// `[C_out, C, kh, kw]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: si,
                right: sw,
            });
        }
        if sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: sb,
                right: vec![sw[0]],
            });
        }
        if spec.stride == 0 {
            return Err(Error::Contract("conv2d stride must be ≥ 1".into()));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel",
                left: si,
                right: sw,
            });
        }
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
        let cols = im2col(self.value(input).data(), c, h, w, kh, kw, spec, ho, wo);
        let r = c * kh * kw;
        let p = ho * wo;
        let mut out = vec![0.0; co * p];
        gemm(self.value(weight).data(), &cols, co, r, p, &mut out);
        let bd = self.value(bias).data();
        for (o, row) in out.chunks_mut(p).enumerate() {
            let b = bd[o];
            row.iter_mut().for_each(|v| *v += b);
        }
        let tr = self.t(input) || self.t(weight) || self.t(bias);
        Ok(self.push(
            Tensor {
                shape: vec![co, ho, wo],
                data: out,
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                spec,
                kernel: (kh, kw),
                out_hw: (ho, wo),
            },
            tr,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = x.shape().to_vec();
        let tr = self.t(a);
        self.push(Tensor { shape, data }, Op::Relu(a), tr)
    }

    /// Mean over the spatial dims of a `[C, H, W]` map → `[C]`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "mean_pool",
                left: x.shape().to_vec(),
                right: vec![0, 0, 0],
            });
        }
        let hw = x.shape()[1] * x.shape()[2];
        let out = x
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let tr = self.t(a);
        Ok(self.push(Tensor::vector(out), Op::MeanPool(a), tr))
    }

    /// Mean of a `[C, H, W]` map over an explicit set of flat spatial cell
    /// indices (`row * W + col`) → `[C]`.
    pub fn roi_pool(&mut self, a: Var, cells: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "roi_pool",
                left: x.shape().to_vec(),
                right: vec![0, 0, 0],
            });
        }
        let hw = x.shape()[1] * x.shape()[2];
        if cells.is_empty() {
            return Err(Error::DegenerateBox("region covers no feature cells".into()));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c >= hw) {
            return Err(Error::Contract(format!("roi cell {bad} outside map of {hw} cells")));
        }
        let inv = 1.0 / cells.len() as f64;
        let out = x
            .data()
            .chunks(hw)
            .map(|ch| cells.iter().map(|&c| ch[c]).sum::<f64>() * inv)
            .collect();
        let tr = self.t(a);
        Ok(self.push(Tensor::vector(out), Op::RoiPool { input: a, cells }, tr))
    }

    /// `v / ‖v‖` for a 1-D `v`. Fails instead of dividing by a near-zero norm.
    pub fn l2_normalize(&mut self, a: Var, epsilon: f64) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 1 {
            return Err(Error::Contract(format!(
                "l2_normalize expects a vector, got shape {:?}",
                x.shape()
            )));
        }
        let norm = dot(x.data(), x.data()).sqrt();
        if !(norm >= epsilon) {
            return Err(Error::DegenerateInput { norm, epsilon });
        }
        let data = x.data().iter().map(|v| v / norm).collect();
        let tr = self.t(a);
        Ok(self.push(Tensor::vector(data), Op::L2Normalize { input: a, norm }, tr))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let v = dot(self.value(a).data(), self.value(b).data());
        let tr = self.t(a) || self.t(b);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), tr))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::NonFinite(format!("log of non-positive value {bad}")));
        }
        let data = x.data().iter().map(|v| v.ln()).collect();
        let shape = x.shape().to_vec();
        let tr = self.t(a);
        Ok(self.push(Tensor { shape, data }, Op::Log(a), tr))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("exp overflow".into()));
        }
        let shape = x.shape().to_vec();
        let tr = self.t(a);
        Ok(self.push(Tensor { shape, data }, Op::Exp(a), tr))
    }

    /// `softmax(x / temperature)` over a vector.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let x = self.value(a);
        if x.shape().len() != 1 || x.numel() == 0 {
            return Err(Error::Contract(format!(
                "softmax expects a non-empty vector, got {:?}",
                x.shape()
            )));
        }
        let data = softmax(x.data(), temperature);
        let tr = self.t(a);
        Ok(self.push(Tensor::vector(data), Op::Softmax { input: a, temperature }, tr))
    }

    /// `log softmax(x / temperature)` over a vector.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let x = self.value(a);
        if x.shape().len() != 1 || x.numel() == 0 {
            return Err(Error::Contract(format!(
                "log_softmax expects a non-empty vector, got {:?}",
                x.shape()
            )));
        }
        let lse = logsumexp_scaled(x.data(), temperature);
        let data = x.data().iter().map(|v| v / temperature - lse).collect();
        let tr = self.t(a);
        Ok(self.push(
            Tensor::vector(data),
            Op::LogSoftmax {
                input: a,
                temperature,
            },
            tr,
        ))
    }

    /// Stabilised `log Σ exp(x)` → scalar.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::Contract("logsumexp of empty tensor".into()));
        }
        let v = logsumexp_scaled(x.data(), 1.0);
        let tr = self.t(a);
        Ok(self.push(Tensor::scalar(v), Op::LogSumExp(a), tr))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        let tr = self.t(a);
        self.push(Tensor::scalar(v), Op::Sum(a), tr)
    }

    /// `Σ cᵢ·xᵢ` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Contract("weighted_sum of no terms".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        let mut tr = false;
        for &(v, c) in terms {
            self.same_shape("weighted_sum", first, v)?;
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
            tr |= self.t(v);
        }
        Ok(self.push(Tensor { shape, data: out }, Op::WeightedSum(terms.to_vec()), tr))
    }

    /// Flatten and join `parts` into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of no parts".into()));
        }
        let mut data = Vec::new();
        let mut tr = false;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            tr |= self.t(p);
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), tr))
    }

    /// Copy of `a` that no gradient flows through.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        // Reshape is a view over the same row-major data; a weighted sum with
        // one term gives it a backward rule for free.
        let value = self.value(a).clone().reshape(shape)?;
        let tr = self.t(a);
        Ok(self.push(value, Op::WeightedSum(vec![(a, 1.0)]), tr))
    }

    /// Propagate d`root` back to every `param` leaf, adding into its grad
    /// buffer.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                rv.shape()
            )));
        }
        if !self.nodes[root.0].tracked {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(buf) = self.nodes[i].grad.as_mut() {
                    for (b, x) in buf.iter_mut().zip(&g) {
                        *b += x;
                    }
                }
                continue;
            }
            let contribs = self.local_backward(i, &g);
            for (p, pg) in contribs {
                if !self.nodes[p.0].tracked {
                    continue;
                }
                match adj[p.0].as_mut() {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&pg) {
                            *a += x;
                        }
                    }
                    None => adj[p.0] = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let tr = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf | Op::Detach => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let mut out = vec![];
                if tr(*a) {
                    out.push((*a, zip_map(g, val(*b), |x, y| x * y)));
                }
                if tr(*b) {
                    out.push((*b, zip_map(g, val(*a), |x, y| x * y)));
                }
                out
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![];
                if tr(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm_a_bt(g, val(*b), m, n, k, &mut da);
                    out.push((*a, da));
                }
                if tr(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm_at_b(val(*a), g, m, k, n, &mut db);
                    out.push((*b, db));
                }
                out
            }
            Op::MatVec(a, x) => {
                let sa = self.nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let mut out = vec![];
                if tr(*a) {
                    let xd = val(*x);
                    let mut da = vec![0.0; m * k];
                    for (row, &gi) in da.chunks_mut(k).zip(g) {
                        axpy(gi, xd, row);
                    }
                    out.push((*a, da));
                }
                if tr(*x) {
                    let ad = val(*a);
                    let mut dx = vec![0.0; k];
                    for (row, &gi) in ad.chunks(k).zip(g) {
                        axpy(gi, row, &mut dx);
                    }
                    out.push((*x, dx));
                }
                out
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                spec,
                kernel,
                out_hw,
            } => {
                let si = self.nodes[input.0].value.shape();
                let sw = self.nodes[weight.0].value.shape();
                let (c, h, w) = (si[0], si[1], si[2]);
                let co = sw[0];
                let r = c * kernel.0 * kernel.1;
                let p = out_hw.0 * out_hw.1;
                let mut out = vec![];
                if tr(*weight) {
                    let mut dw = vec![0.0; co * r];
                    gemm_a_bt(g, cols, co, p, r, &mut dw);
                    out.push((*weight, dw));
                }
                if tr(*bias) {
                    out.push((*bias, g.chunks(p).map(|ch| ch.iter().sum()).collect()));
                }
                if tr(*input) {
                    let mut dcols = vec![0.0; r * p];
                    gemm_at_b(val(*weight), g, co, r, p, &mut dcols);
                    let dx = col2im(&dcols, c, h, w, kernel.0, kernel.1, *spec, out_hw.0, out_hw.1);
                    out.push((*input, dx));
                }
                out
            }
            Op::Relu(a) => {
                let x = val(*a);
                vec![(*a, zip_map(g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }))]
            }
            Op::MeanPool(a) => {
                let s = self.nodes[a.0].value.shape();
                let hw = s[1] * s[2];
                let inv = 1.0 / hw as f64;
                let mut dx = vec![0.0; s[0] * hw];
                for (ch, &gi) in dx.chunks_mut(hw).zip(g) {
                    ch.iter_mut().for_each(|v| *v = gi * inv);
                }
                vec![(*a, dx)]
            }
            Op::RoiPool { input, cells } => {
                let s = self.nodes[input.0].value.shape();
                let hw = s[1] * s[2];
                let inv = 1.0 / cells.len() as f64;
                let mut dx = vec![0.0; s[0] * hw];
                for (ch, &gi) in dx.chunks_mut(hw).zip(g) {
                    for &cidx in cells {
                        ch[cidx] += gi * inv;
                    }
                }
                vec![(*input, dx)]
            }
            Op::L2Normalize { input, norm } => {
                let y = node.value.data();
                let yg = dot(y, g);
                vec![(*input, zip_map(g, y, |gi, yi| (gi - yi * yg) / norm))]
            }
            Op::Dot(a, b) => {
                let gi = g[0];
                let mut out = vec![];
                if tr(*a) {
                    out.push((*a, val(*b).iter().map(|x| gi * x).collect()));
                }
                if tr(*b) {
                    out.push((*b, val(*a).iter().map(|x| gi * x).collect()));
                }
                out
            }
            Op::Log(a) => vec![(*a, zip_map(g, val(*a), |gi, xi| gi / xi))],
            Op::Exp(a) => vec![(*a, zip_map(g, node.value.data(), |gi, yi| gi * yi))],
            Op::Softmax { input, temperature } => {
                let y = node.value.data();
                let s = dot(y, g);
                vec![(*input, zip_map(g, y, |gi, yi| yi * (gi - s) / temperature))]
            }
            Op::LogSoftmax { input, temperature } => {
                let gs: f64 = g.iter().sum();
                let y = node.value.data();
                vec![(
                    *input,
                    zip_map(g, y, |gi, yi| (gi - yi.exp() * gs) / temperature),
                )]
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let lse = node.value.data()[0];
                vec![(*a, x.iter().map(|xi| g[0] * (xi - lse).exp()).collect())]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.numel()])],
            Op::WeightedSum(terms) => terms
                .iter()
                .filter(|(v, _)| tr(*v))
                .map(|&(v, c)| (v, g.iter().map(|x| x * c).collect()))
                .collect(),
            Op::Concat(parts) => {
                let mut off = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if tr(p) {
                        out.push((p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
                out
            }
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Dot product with a fixed four-lane accumulation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n4 = a.len() / 4 * 4;
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a[..n4].chunks_exact(4).zip(b[..n4].chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in n4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out[m×n] += A[m×k] · B[k×n]`.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                axpy(av, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
}

/// `out[m×r] += A[m×n] · B[r×n]ᵀ`.
fn gemm_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, r: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..r {
            out[i * r + j] += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `out[k×n] += A[m×k]ᵀ · B[m×n]`.
fn gemm_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                axpy(av, brow, &mut out[kk * n..(kk + 1) * n]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut cols = vec![0.0; c * kh * kw * p];
    let pad = spec.padding as isize;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut x = vec![0.0; c * h * w];
    let pad = spec.padding as isize;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `log Σ exp(xᵢ / t)` with max subtraction.
pub fn logsumexp_scaled(x: &[f64], t: f64) -> f64 {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
    let s: f64 = x.iter().map(|v| (v / t - m).exp()).sum();
    m + s.ln()
}

/// `softmax(x / t)` with max subtraction.
pub fn softmax(x: &[f64], t: f64) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
    let e: Vec<f64> = x.iter().map(|v| (v / t - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
