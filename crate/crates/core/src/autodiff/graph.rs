use super::conv::{self, ConvGeometry};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    ChannelShuffle {
        x: Var,
        groups: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    ScaleConst {
        x: Var,
        factor: f64,
    },
    PowFloor {
        x: Var,
        exponent: f64,
        floor: f64,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GumbelSoftmax {
        logits: Var,
        tau: f64,
    },
    Mix {
        inputs: Vec<(usize, Var)>,
        mask: Var,
        row: usize,
    },
    DotConst {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in forward order and `backward`
/// walks them in exact reverse. A graph serves one training step; build a
/// fresh one (or call [`Graph::reset`]) for the next.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf carrying a copy of `t`; gradients flow to it iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.data.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient held for `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::resolve(self.shape(x), self.shape(w), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geom.out_channels
                )));
            }
        }
        let y = conv::forward(
            &geom,
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
        );
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            geom.output_shape().to_vec(),
            y,
            rg,
            Op::Conv2d { x, w, bias, geom },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, y, rg, Op::Relu(x))
    }

    /// Reshape channels to `(groups, C/groups)`, transpose, flatten.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "channel_shuffle expects [N,C,H,W], got {shape:?}"
            )));
        }
        let c = shape[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!(
                "channel count {c} not divisible by groups {groups}"
            )));
        }
        let plane = shape[2] * shape[3];
        let src = self.value(x);
        let mut y = vec![0.0; src.len()];
        for n in 0..shape[0] {
            for (dst_c, src_c) in shuffle_permutation(c, groups).into_iter().enumerate() {
                let d = (n * c + dst_c) * plane;
                let s = (n * c + src_c) * plane;
                y[d..d + plane].copy_from_slice(&src[s..s + plane]);
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(shape, y, rg, Op::ChannelShuffle { x, groups }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, y, rg, Op::Add(a, b)))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, y, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, y, rg, Op::ScaleConst { x, factor })
    }

    /// `max(x, floor)^exponent`, elementwise. The gradient is zero where the
    /// floor is active.
    pub fn pow_floor(&mut self, x: Var, exponent: f64, floor: f64) -> Var {
        let y = self
            .value(x)
            .iter()
            .map(|v| v.max(floor).powf(exponent))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(
            shape,
            y,
            rg,
            Op::PowFloor {
                x,
                exponent,
                floor,
            },
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "global_avg_pool expects [N,C,H,W], got {shape:?}"
            )));
        }
        let plane = shape[2] * shape[3];
        let y = self
            .value(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(vec![shape[0], shape[1]], y, rg, Op::GlobalAvgPool(x)))
    }

    /// `x[N,F] @ w[F,O] + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "linear expects x[N,F], w[F,O], b[O]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        if xs[1] != ws[0] {
            return Err(Error::shape(format!(
                "linear feature dim: x has {}, w has {}",
                xs[1], ws[0]
            )));
        }
        if bs[0] != ws[1] {
            return Err(Error::shape(format!(
                "linear output dim: w has {}, b has {}",
                ws[1], bs[0]
            )));
        }
        let (n, f, o) = (xs[0], xs[1], ws[1]);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut y = vec![0.0; n * o];
        for i in 0..n {
            let row = &mut y[i * o..][..o];
            row.copy_from_slice(bv);
            for k in 0..f {
                let a = xv[i * f + k];
                row.iter_mut()
                    .zip(&wv[k * o..][..o])
                    .for_each(|(r, w)| *r += a * w);
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(vec![n, o], y, rg, Op::Linear { x, w, b }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross entropy expects logits [N,K] with N = {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..][..k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_denom = denom.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / denom;
            }
            loss -= row[labels[i]] - m - log_denom;
        }
        loss /= n as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Row-wise `softmax((logits + noise) / tau)` over the finite cells of a
    /// `[L, K]` logit matrix. Non-finite (`-inf`) cells are excluded and come
    /// out as exact zeros.
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &[f64], tau: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "gumbel_softmax expects [L,K] logits, got {shape:?}"
            )));
        }
        if noise.len() != shape[0] * shape[1] {
            return Err(Error::shape(format!(
                "noise has {} entries, logits {shape:?}",
                noise.len()
            )));
        }
        let k = shape[1];
        let z = self.value(logits);
        let mut m = vec![0.0; z.len()];
        for l in 0..shape[0] {
            let row = super::masked_gumbel_softmax(&z[l * k..][..k], &noise[l * k..][..k], tau)
                .map_err(|e| match e {
                    Error::Invalid(msg) => Error::invalid(format!("row {l}: {msg}")),
                    other => other,
                })?;
            m[l * k..][..k].copy_from_slice(&row);
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            shape,
            m,
            rg,
            Op::GumbelSoftmax { logits, tau },
        ))
    }

    /// `sum_c mask[row, c] * x_c` over the given `(column, input)` pairs.
    pub fn mix(&mut self, inputs: &[(usize, Var)], mask: Var, row: usize) -> Result<Var> {
        let (_, first) = *inputs
            .first()
            .ok_or_else(|| Error::invalid("mix needs at least one input"))?;
        let shape = self.shape(first).to_vec();
        let ms = self.shape(mask);
        if ms.len() != 2 || row >= ms[0] {
            return Err(Error::shape(format!(
                "mix row {row} outside mask of shape {ms:?}"
            )));
        }
        let k = ms[1];
        let mut y = vec![0.0; shape.iter().product()];
        let mut rg = self.requires_grad(mask);
        for &(col, v) in inputs {
            same_shape(&shape, self.shape(v), "mix")?;
            if col >= k {
                return Err(Error::shape(format!("mix column {col} outside mask width {k}")));
            }
            let wgt = self.value(mask)[row * k + col];
            y.iter_mut()
                .zip(self.value(v))
                .for_each(|(a, b)| *a += wgt * b);
            rg |= self.requires_grad(v);
        }
        Ok(self.push(
            shape,
            y,
            rg,
            Op::Mix {
                inputs: inputs.to_vec(),
                mask,
                row,
            },
        ))
    }

    /// `sum_i x_i * weights_i`, a scalar.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(Error::shape(format!(
                "dot_const: {} values against {} weights",
                self.value(x).len(),
                weights.len()
            )));
        }
        let s = self.value(x).iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.requires_grad(x);
        Ok(self.push(
            vec![1],
            vec![s],
            rg,
            Op::DotConst {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    fn grad_buf<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        let node = &nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.data.len()]))
    }

    /// Back-propagates from a scalar `loss`. Gradients on the tape add to any
    /// already present, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            Self::propagate(nodes, &mut grads, &nodes[i], &gy);
            grads[i] = Some(gy);
        }
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, gy: &[f64]) {
        let val = |v: Var| nodes[v.0].data.as_slice();
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, bias, geom } => {
                let (dx, dw, db) = conv::backward(
                    geom,
                    val(*x),
                    val(*w),
                    gy,
                    rg(*x),
                    rg(*w),
                    bias.is_some_and(rg),
                );
                for (v, d) in [(Some(*x), dx), (Some(*w), dw), (*bias, db)] {
                    if let (Some(v), Some(d)) = (v, d) {
                        if let Some(buf) = Self::grad_buf(grads, nodes, v) {
                            buf.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(buf) = Self::grad_buf(grads, nodes, *x) {
                    for ((a, g), xi) in buf.iter_mut().zip(gy).zip(xv) {
                        if *xi > 0.0 {
                            *a += g;
                        }
                    }
                }
            }
            Op::ChannelShuffle { x, groups } => {
                let shape = &node.shape;
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                if let Some(buf) = Self::grad_buf(grads, nodes, *x) {
                    let perm = shuffle_permutation(c, *groups);
                    for n in 0..shape[0] {
                        for (dst_c, &src_c) in perm.iter().enumerate() {
                            let d = (n * c + dst_c) * plane;
                            let s = (n * c + src_c) * plane;
                            buf[s..s + plane]
                                .iter_mut()
                                .zip(&gy[d..d + plane])
                                .for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = Self::grad_buf(grads, nodes, v) {
                        buf.iter_mut().zip(gy).for_each(|(a, g)| *a += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(buf) = Self::grad_buf(grads, nodes, *a) {
                    for i in 0..buf.len() {
                        buf[i] += gy[i] * bv[i];
                    }
                }
                if let Some(buf) = Self::grad_buf(grads, nodes, *b) {
                    for i in 0..buf.len() {
                        buf[i] += gy[i] * av[i];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = Self::grad_buf(grads, nodes, *x) {
                    buf.iter_mut().for_each(|a| *a += gy[0]);
                }
            }
            Op::ScaleConst { x, factor } => {
                if let Some(buf) = Self::grad_buf(grads, nodes, *x) {
                    buf.iter_mut().zip(gy).for_each(|(a, g)| *a += g * factor);
                }
            }
            Op::PowFloor {
                x,
                exponent,
                floor,
            } => {
                let xv = val(*x);
                if let Some(buf) = Self::grad_buf(grads, nodes, *x) {
                    for ((a, g), &xi) in buf.iter_mut().zip(gy).zip(xv) {
                        if xi > *floor {
                            *a += g * exponent * xi.powf(exponent - 1.0);
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let plane = {
                    let s = &nodes[x.0].shape;
                    s[2] * s[3]
                };
                if let Some(buf) = Self::grad_buf(grads, nodes, *x) {
                    for (chunk, g) in buf.chunks_mut(plane).zip(gy) {
                        let share = g / plane as f64;
                        chunk.iter_mut().for_each(|a| *a += share);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let o = nodes[w.0].shape[1];
                let (xv, wv) = (val(*x), val(*w));
                if let Some(buf) = Self::grad_buf(grads, nodes, *x) {
                    for i in 0..n {
                        for k in 0..f {
                            buf[i * f + k] += gy[i * o..][..o]
                                .iter()
                                .zip(&wv[k * o..][..o])
                                .map(|(g, w)| g * w)
                                .sum::<f64>();
                        }
                    }
                }
                if let Some(buf) = Self::grad_buf(grads, nodes, *w) {
                    for i in 0..n {
                        for k in 0..f {
                            let a = xv[i * f + k];
                            buf[k * o..][..o]
                                .iter_mut()
                                .zip(&gy[i * o..][..o])
                                .for_each(|(d, g)| *d += a * g);
                        }
                    }
                }
                if let Some(buf) = Self::grad_buf(grads, nodes, *b) {
                    for i in 0..n {
                        buf.iter_mut()
                            .zip(&gy[i * o..][..o])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                if let Some(buf) = Self::grad_buf(grads, nodes, *logits) {
                    let scale = gy[0] / n as f64;
                    for i in 0..n {
                        for j in 0..k {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            buf[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::GumbelSoftmax { logits, tau } => {
                let k = node.shape[1];
                let m = &node.data;
                if let Some(buf) = Self::grad_buf(grads, nodes, *logits) {
                    // dm_i/dz_j = m_i (delta_ij - m_j) / tau, zero off the admissible set.
                    for l in 0..node.shape[0] {
                        let mr = &m[l * k..][..k];
                        let gr = &gy[l * k..][..k];
                        let dot: f64 = mr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            if mr[j] != 0.0 {
                                buf[l * k + j] += mr[j] * (gr[j] - dot) / tau;
                            }
                        }
                    }
                }
            }
            Op::Mix { inputs, mask, row } => {
                let k = nodes[mask.0].shape[1];
                let mv = val(*mask);
                let mut dmask = Vec::with_capacity(inputs.len());
                for &(col, v) in inputs {
                    let wgt = mv[row * k + col];
                    if let Some(buf) = Self::grad_buf(grads, nodes, v) {
                        buf.iter_mut().zip(gy).for_each(|(a, g)| *a += wgt * g);
                    }
                    if rg(*mask) {
                        dmask.push((col, gy.iter().zip(val(v)).map(|(g, x)| g * x).sum::<f64>()));
                    }
                }
                if let Some(buf) = Self::grad_buf(grads, nodes, *mask) {
                    for (col, d) in dmask {
                        buf[row * k + col] += d;
                    }
                }
            }
            Op::DotConst { x, weights } => {
                if let Some(buf) = Self::grad_buf(grads, nodes, *x) {
                    buf.iter_mut()
                        .zip(weights)
                        .for_each(|(a, w)| *a += gy[0] * w);
                }
            }
        }
    }
}

/// `perm[dst] = src` for a channel shuffle of `c` channels in `groups` groups.
pub fn shuffle_permutation(c: usize, groups: usize) -> Vec<usize> {
    let per = c / groups;
    (0..c).map(|dst| (dst % groups) * per + dst / groups).collect()
}
