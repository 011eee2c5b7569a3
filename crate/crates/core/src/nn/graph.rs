//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! reverse topological order. Gradients are accumulated in a fixed order,
//! which keeps backward passes bitwise reproducible.

use rand::Rng;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding policy for 3x3 (or any odd) convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps height and width.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

enum Op<T> {
    Input,
    Variable,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, pad: usize },
    UpConv2 { input: Var, weight: Var, bias: Option<Var> },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Relu { input: Var },
    Concat { parts: Vec<Var> },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Dropout { input: Var, mask: Vec<T> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Reshape { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    External { input: Var, grad: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::UpConv2 { .. } => "upconv2",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batchnorm",
            Op::Dropout { .. } => "dropout",
            Op::Linear { .. } => "linear",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::External { .. } => "external",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        if let Op::Concat { parts } = self {
            return parts.clone();
        }
        match *self {
            Op::Input | Op::Variable | Op::Param(_) => vec![],
            Op::Conv2d { input, weight, bias, .. }
            | Op::UpConv2 { input, weight, bias }
            | Op::Linear { input, weight, bias } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::BatchNormTrain { input, gamma, beta, .. } | Op::BatchNormEval { input, gamma, beta, .. } => {
                vec![input, gamma, beta]
            }
            Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::Concat { .. } => unreachable!(),
            Op::MaxPool2 { input, .. }
            | Op::Relu { input }
            | Op::Dropout { input, .. }
            | Op::Reshape { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::External { input, .. } => vec![input],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Batch statistics produced by a training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over batch and spatial positions.
    pub var: Vec<T>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = match op {
            Op::Input => false,
            Op::Variable | Op::Param(_) => true,
            ref other => other.inputs().iter().any(|v| self.nodes[v.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Operation name of a node, for introspection.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Direct inputs of a node.
    pub fn op_inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Free leaf whose gradient can be read back with [`Graph::grad`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Variable)
    }

    /// Leaf bound to a stored parameter. Buffers enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        if p.trainable {
            self.push(p.value.clone(), Op::Param(id))
        } else {
            self.push(p.value.clone(), Op::Input)
        }
    }

    // ----- forward operations -------------------------------------------

    /// Stride-1 cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!("conv2d: input has {cin} channels, kernel expects {wcin}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!("conv2d: kernel must be square and odd, got {kh}x{kw}")));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape(format!("conv2d: bias shape {:?}, expected [{cout}]", self.shape(bv))));
            }
        }
        let k = kh;
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!("conv2d: {h}x{w} input is smaller than {k}x{k} kernel")));
        }
        let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bs = bias.map(|bv| self.value(bv).data());
        let mut out = vec![T::zero(); b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                let plane = &mut out[(bi * cout + co) * ho * wo..][..ho * wo];
                if let Some(bs) = bs {
                    plane.iter_mut().for_each(|v| *v = bs[co]);
                }
                for ci in 0..cin {
                    let xin = &x[(bi * cin + ci) * h * w..][..h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                            let (ox0, ox1) = valid_range(kx, pad, w, wo);
                            for oy in 0..ho {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                let orow = &mut plane[oy * wo..][..wo];
                                let irow = &xin[iy * w..][..w];
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { input, weight, bias, pad }))
    }

    /// Transposed 2x2 convolution with stride 2 (`[Cin,Cout,2,2]` kernel);
    /// doubles height and width.
    pub fn upconv2(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (wcin, cout, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin || kh != 2 || kw != 2 {
            return Err(Error::shape(format!(
                "upconv2: input has {cin} channels, kernel is {:?}",
                self.shape(weight)
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape(format!("upconv2: bias shape {:?}, expected [{cout}]", self.shape(bv))));
            }
        }
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bs = bias.map(|bv| self.value(bv).data());
        let mut out = vec![T::zero(); b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                let plane = &mut out[(bi * cout + co) * ho * wo..][..ho * wo];
                if let Some(bs) = bs {
                    plane.iter_mut().for_each(|v| *v = bs[co]);
                }
                for ci in 0..cin {
                    let xin = &x[(bi * cin + ci) * h * w..][..h * w];
                    let kbase = (ci * cout + co) * 4;
                    for y in 0..h {
                        for dy in 0..2 {
                            let orow = &mut plane[(2 * y + dy) * wo..][..wo];
                            let (w0, w1) = (wt[kbase + dy * 2], wt[kbase + dy * 2 + 1]);
                            for xx in 0..w {
                                let v = xin[y * w + xx];
                                orow[2 * xx] += w0 * v;
                                orow[2 * xx + 1] += w1 * v;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, cout, ho, wo], out)?;
        Ok(self.push(t, Op::UpConv2 { input, weight, bias }))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first position in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool2: odd spatial size {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(&[b, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2 { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let t = Tensor::new(x.shape(), data).expect("same shape");
        self.push(t, Op::Relu { input })
    }

    /// Concatenates two `[B,C,H,W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat_all(&[a, b])
    }

    /// Concatenates `[B,C_k,H,W]` tensors along channels, left to right, as
    /// a single node whose inputs are `parts` in order.
    pub fn concat_all(&mut self, parts: &[Var]) -> Result<Var> {
        let &first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (bp, cp, hp, wp) = self.value(p).dims4()?;
            if (bp, hp, wp) != (b, h, w) {
                return Err(Error::shape(format!(
                    "concat: {:?} and {:?} differ outside the channel axis",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            channels.push(cp);
        }
        let plane = h * w;
        let ctot: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(b * ctot * plane);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&self.value(p).data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let t = Tensor::new(&[b, ctot, h, w], out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }))
    }

    fn check_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batchnorm: {c} channels but gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((b, c, h * w))
    }

    fn normalize(&mut self, input: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T, train: bool) -> Var {
        let (b, c, hw) = self.check_affine(input, gamma, beta).expect("checked by caller");
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for k in off..off + hw {
                    xhat[k] = (x[k] - mean[ci]) * inv_std[ci];
                    out[k] = g[ci] * xhat[k] + bt[ci];
                }
            }
        }
        let t = Tensor::new(self.shape(input), out).expect("same shape");
        let op = if train {
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std }
        } else {
            Op::BatchNormEval { input, gamma, beta, xhat, inv_std }
        };
        self.push(t, op)
    }

    /// Batchnorm with statistics of the current batch. Returns the batch
    /// mean and biased variance so the caller can update running averages.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (b, c, hw) = self.check_affine(input, gamma, beta)?;
        let count = b * hw;
        let x = self.value(input).data();
        let inv_n = T::one() / T::from_f64(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s += x[(bi * c + ci) * hw..][..hw].iter().copied().sum::<T>();
            }
            mean[ci] = s * inv_n;
            let mut sq = T::zero();
            for bi in 0..b {
                sq += x[(bi * c + ci) * hw..][..hw].iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
            }
            var[ci] = sq * inv_n;
        }
        let out = self.normalize(input, gamma, beta, &mean, &var, eps, true);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batchnorm with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (_, c, _) = self.check_affine(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm: running statistics length mismatch"));
        }
        Ok(self.normalize(input, gamma, beta, mean, var, eps, false))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    /// Identity (the same node) when not training or when `rate == 0`.
    pub fn dropout(&mut self, input: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} is outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::Dropout { input, mask }))
    }

    /// `[B,F] x [O,F]^T + [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (b, f) = match self.shape(input) {
            &[b, f] => (b, f),
            s => return Err(Error::shape(format!("linear: expected [B,F] input, got {s:?}"))),
        };
        let o = match self.shape(weight) {
            &[o, wf] if wf == f => o,
            s => return Err(Error::shape(format!("linear: weight {s:?} incompatible with {f} features"))),
        };
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::shape("linear: bias shape mismatch"));
            }
        }
        let (x, wt) = (self.value(input).data(), self.value(weight).data());
        let bs = bias.map(|bv| self.value(bv).data());
        let mut out = vec![T::zero(); b * o];
        for bi in 0..b {
            for oi in 0..o {
                let mut s = bs.map_or(T::zero(), |bs| bs[oi]);
                for fi in 0..f {
                    s += x[bi * f + fi] * wt[oi * f + fi];
                }
                out[bi * o + oi] = s;
            }
        }
        let t = Tensor::new(&[b, o], out)?;
        Ok(self.push(t, Op::Linear { input, weight, bias }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(input).data().to_vec();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Reshape { input }))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let b = *shape.first().ok_or_else(|| Error::shape("flatten of a scalar"))?;
        let rest = shape[1..].iter().product();
        self.reshape(input, &[b, rest])
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let t = Tensor::new(x.shape(), x.data().iter().map(|&v| v * factor).collect()).expect("same shape");
        self.push(t, Op::Scale { input, factor })
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    /// A scalar node whose value and gradient with respect to `input` were
    /// computed outside the graph (used for the loss functions, which carry
    /// their own analytic gradients).
    pub fn external_loss(&mut self, input: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::shape("external loss gradient does not match its input"));
        }
        Ok(self.push(Tensor::scalar(value), Op::External { input, grad }))
    }

    // ----- backward -------------------------------------------------------

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Propagates gradients from a scalar root. Parameter gradients are
    /// added into `store`; a graph can only be differentiated once.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.backward_done {
            return Err(Error::AlreadyBackpropagated);
        }
        if self.value(root).numel() != 1 || !self.shape(root).is_empty() {
            return Err(Error::invalid(format!("backward root must be a scalar, got shape {:?}", self.shape(root))));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            if let Op::Param(id) = node.op {
                store.accumulate_grad(id, &gout);
            }
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].tracked;
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Input | Op::Variable | Op::Param(_) => {}
            &Op::Conv2d { input, weight, bias, pad } => {
                let (b, cin, h, w) = val(input).dims4().expect("rank 4");
                let (cout, _, k, _) = val(weight).dims4().expect("rank 4");
                let (_, _, ho, wo) = node.value.dims4().expect("rank 4");
                let x = val(input).data();
                let wt = val(weight).data();
                if let Some(bv) = bias.filter(|&v| tracked(v)) {
                    let gb = acc(grads, bv, cout);
                    for bi in 0..b {
                        for co in 0..cout {
                            gb[co] += gout[(bi * cout + co) * ho * wo..][..ho * wo].iter().copied().sum::<T>();
                        }
                    }
                }
                if tracked(weight) {
                    let gw = acc(grads, weight, cout * cin * k * k);
                    for co in 0..cout {
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (ox0, ox1) = valid_range(kx, pad, w, wo);
                                    let mut s = T::zero();
                                    for bi in 0..b {
                                        let go = &gout[(bi * cout + co) * ho * wo..][..ho * wo];
                                        let xin = &x[(bi * cin + ci) * h * w..][..h * w];
                                        for oy in 0..ho {
                                            let iy = oy + ky;
                                            if iy < pad || iy - pad >= h {
                                                continue;
                                            }
                                            let irow = &xin[(iy - pad) * w..][..w];
                                            let grow = &go[oy * wo..][..wo];
                                            for ox in ox0..ox1 {
                                                s += grow[ox] * irow[ox + kx - pad];
                                            }
                                        }
                                    }
                                    gw[((co * cin + ci) * k + ky) * k + kx] += s;
                                }
                            }
                        }
                    }
                }
                if tracked(input) {
                    let gx = acc(grads, input, b * cin * h * w);
                    for bi in 0..b {
                        for ci in 0..cin {
                            let gplane = &mut gx[(bi * cin + ci) * h * w..][..h * w];
                            for co in 0..cout {
                                let go = &gout[(bi * cout + co) * ho * wo..][..ho * wo];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                                        let (ox0, ox1) = valid_range(kx, pad, w, wo);
                                        for oy in 0..ho {
                                            let iy = oy + ky;
                                            if iy < pad || iy - pad >= h {
                                                continue;
                                            }
                                            let grow = &mut gplane[(iy - pad) * w..][..w];
                                            let orow = &go[oy * wo..][..wo];
                                            for ox in ox0..ox1 {
                                                grow[ox + kx - pad] += wv * orow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::UpConv2 { input, weight, bias } => {
                let (b, cin, h, w) = val(input).dims4().expect("rank 4");
                let cout = val(weight).shape()[1];
                let (ho, wo) = (2 * h, 2 * w);
                let x = val(input).data();
                let wt = val(weight).data();
                if let Some(bv) = bias.filter(|&v| tracked(v)) {
                    let gb = acc(grads, bv, cout);
                    for bi in 0..b {
                        for co in 0..cout {
                            gb[co] += gout[(bi * cout + co) * ho * wo..][..ho * wo].iter().copied().sum::<T>();
                        }
                    }
                }
                if tracked(weight) {
                    let gw = acc(grads, weight, cin * cout * 4);
                    for ci in 0..cin {
                        for co in 0..cout {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let mut s = T::zero();
                                    for bi in 0..b {
                                        let go = &gout[(bi * cout + co) * ho * wo..][..ho * wo];
                                        let xin = &x[(bi * cin + ci) * h * w..][..h * w];
                                        for y in 0..h {
                                            let grow = &go[(2 * y + dy) * wo..][..wo];
                                            for xx in 0..w {
                                                s += xin[y * w + xx] * grow[2 * xx + dx];
                                            }
                                        }
                                    }
                                    gw[((ci * cout + co) * 2 + dy) * 2 + dx] += s;
                                }
                            }
                        }
                    }
                }
                if tracked(input) {
                    let gx = acc(grads, input, b * cin * h * w);
                    for bi in 0..b {
                        for ci in 0..cin {
                            let gplane = &mut gx[(bi * cin + ci) * h * w..][..h * w];
                            for co in 0..cout {
                                let go = &gout[(bi * cout + co) * ho * wo..][..ho * wo];
                                let kb = (ci * cout + co) * 4;
                                for y in 0..h {
                                    for xx in 0..w {
                                        let mut s = T::zero();
                                        for dy in 0..2 {
                                            for dx in 0..2 {
                                                s += wt[kb + dy * 2 + dx] * go[(2 * y + dy) * wo + 2 * xx + dx];
                                            }
                                        }
                                        gplane[y * w + xx] += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if tracked(*input) {
                    let gx = acc(grads, *input, val(*input).numel());
                    for (&src, &g) in argmax.iter().zip(gout) {
                        gx[src] += g;
                    }
                }
            }
            &Op::Relu { input } => {
                if tracked(input) {
                    let x = val(input).data();
                    let gx = acc(grads, input, x.len());
                    for ((gxi, &xi), &g) in gx.iter_mut().zip(x).zip(gout) {
                        if xi > T::zero() {
                            *gxi += g;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let (bsz, _, h, w) = val(parts[0]).dims4().expect("rank 4");
                let plane = h * w;
                let channels: Vec<usize> = parts.iter().map(|&p| val(p).shape()[1]).collect();
                let ctot: usize = channels.iter().sum();
                let mut c0 = 0;
                for (&p, &c) in parts.iter().zip(&channels) {
                    if tracked(p) {
                        let gp = acc(grads, p, bsz * c * plane);
                        for bi in 0..bsz {
                            add_into(&mut gp[bi * c * plane..][..c * plane], &gout[(bi * ctot + c0) * plane..][..c * plane]);
                        }
                    }
                    c0 += c;
                }
            }
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std } => {
                let (b, c, h, w) = val(*input).dims4().expect("rank 4");
                let hw = h * w;
                let m = T::from_f64((b * hw) as f64);
                let g = val(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for k in off..off + hw {
                            sum_dy[ci] += gout[k];
                            sum_dy_xhat[ci] += gout[k] * xhat[k];
                        }
                    }
                }
                if tracked(*gamma) {
                    add_into(acc(grads, *gamma, c), &sum_dy_xhat);
                }
                if tracked(*beta) {
                    add_into(acc(grads, *beta, c), &sum_dy);
                }
                if tracked(*input) {
                    let gx = acc(grads, *input, b * c * hw);
                    for bi in 0..b {
                        for ci in 0..c {
                            let scale = g[ci] * inv_std[ci] / m;
                            let off = (bi * c + ci) * hw;
                            for k in off..off + hw {
                                gx[k] += scale * (m * gout[k] - sum_dy[ci] - xhat[k] * sum_dy_xhat[ci]);
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval { input, gamma, beta, xhat, inv_std } => {
                let (b, c, h, w) = val(*input).dims4().expect("rank 4");
                let hw = h * w;
                let g = val(*gamma).data();
                if tracked(*gamma) || tracked(*beta) {
                    let mut sum_dy = vec![T::zero(); c];
                    let mut sum_dy_xhat = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            for k in off..off + hw {
                                sum_dy[ci] += gout[k];
                                sum_dy_xhat[ci] += gout[k] * xhat[k];
                            }
                        }
                    }
                    if tracked(*gamma) {
                        add_into(acc(grads, *gamma, c), &sum_dy_xhat);
                    }
                    if tracked(*beta) {
                        add_into(acc(grads, *beta, c), &sum_dy);
                    }
                }
                if tracked(*input) {
                    let gx = acc(grads, *input, b * c * hw);
                    for bi in 0..b {
                        for ci in 0..c {
                            let s = g[ci] * inv_std[ci];
                            let off = (bi * c + ci) * hw;
                            for k in off..off + hw {
                                gx[k] += s * gout[k];
                            }
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if tracked(*input) {
                    let gx = acc(grads, *input, mask.len());
                    for ((gxi, &mk), &g) in gx.iter_mut().zip(mask).zip(gout) {
                        *gxi += mk * g;
                    }
                }
            }
            &Op::Linear { input, weight, bias } => {
                let (b, f) = (val(input).shape()[0], val(input).shape()[1]);
                let o = val(weight).shape()[0];
                let (x, wt) = (val(input).data(), val(weight).data());
                if let Some(bv) = bias.filter(|&v| tracked(v)) {
                    let gb = acc(grads, bv, o);
                    for bi in 0..b {
                        add_into(gb, &gout[bi * o..][..o]);
                    }
                }
                if tracked(weight) {
                    let gw = acc(grads, weight, o * f);
                    for oi in 0..o {
                        for fi in 0..f {
                            let mut s = T::zero();
                            for bi in 0..b {
                                s += gout[bi * o + oi] * x[bi * f + fi];
                            }
                            gw[oi * f + fi] += s;
                        }
                    }
                }
                if tracked(input) {
                    let gx = acc(grads, input, b * f);
                    for bi in 0..b {
                        for fi in 0..f {
                            let mut s = T::zero();
                            for oi in 0..o {
                                s += gout[bi * o + oi] * wt[oi * f + fi];
                            }
                            gx[bi * f + fi] += s;
                        }
                    }
                }
            }
            &Op::Reshape { input } => {
                if tracked(input) {
                    add_into(acc(grads, input, gout.len()), gout);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if tracked(v) {
                        add_into(acc(grads, v, gout.len()), gout);
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if tracked(v) {
                        let o = val(other).data();
                        let gv = acc(grads, v, gout.len());
                        for ((gi, &oi), &g) in gv.iter_mut().zip(o).zip(gout) {
                            *gi += oi * g;
                        }
                    }
                }
            }
            &Op::Scale { input, factor } => {
                if tracked(input) {
                    let gx = acc(grads, input, gout.len());
                    for (gi, &g) in gx.iter_mut().zip(gout) {
                        *gi += factor * g;
                    }
                }
            }
            &Op::Sum { input } => {
                if tracked(input) {
                    let n = val(input).numel();
                    let gx = acc(grads, input, n);
                    for gi in gx.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
            Op::External { input, grad } => {
                if tracked(*input) {
                    let gx = acc(grads, *input, grad.len());
                    for (gi, &g) in gx.iter_mut().zip(grad) {
                        *gi += gout[0] * g;
                    }
                }
            }
        }
    }
}

/// Output columns `ox` for which input column `ox + kx - pad` is in bounds.
#[inline]
fn valid_range(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
