//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable call appends one node holding its forward value.
//! `Graph::backward` walks the tape from the loss node down to node 0,
//! taking each node's incoming gradient exactly once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, LayerNormCache};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Test hook: perturbs one backward rule so the gradient audit can be shown to
/// catch it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the gamma/beta gradients of every layer norm.
    LayerNormAffine,
    /// Scales the weight gradient of every convolution.
    ConvWeight,
    /// Scales the scatter-add into embedding tables.
    EmbeddingScatter,
}

impl BackwardFault {
    const FACTOR: f64 = 1.25;

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layer-norm-affine" => Some(Self::LayerNormAffine),
            "conv-weight" => Some(Self::ConvWeight),
            "embedding-scatter" => Some(Self::EmbeddingScatter),
            _ => None,
        }
    }
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<T>,
    },
    Relu {
        x: Var,
        /// Replayed gate pattern; `None` gates on `x > 0`.
        gate: Option<Vec<bool>>,
    },
    SoftmaxChannel(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatChannels(Vec<Var>),
    BroadcastSpatial(Var),
    SelectChannel {
        x: Var,
        channel: usize,
    },
    Dice {
        prob: Var,
        gt: Vec<T>,
        eps: T,
    },
    WeightedSum(Vec<Var>, Vec<T>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Real> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
    visit_order: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to an input leaf or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Tape indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in &self.params {
            store.get_mut(*id).grad.add_assign(g)?;
        }
        Ok(())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
    relu_pins: Option<Vec<Vec<bool>>>,
    relus: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn slot<T: Real>(dst: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    dst.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            fault: None,
            relu_pins: None,
            relus: 0,
        }
    }

    /// Replays recorded ReLU gate patterns, in call order, instead of gating
    /// on the sign of the input. Together with pinned masks this keeps a
    /// finite difference on one smooth branch of the network.
    pub fn with_relu_pins(mut self, gates: Vec<Vec<bool>>) -> Self {
        self.relu_pins = Some(gates);
        self
    }

    /// Gate pattern of every ReLU on the tape, in call order.
    pub fn relu_gates(&self) -> Vec<Vec<bool>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Relu { x, gate } => Some(match gate {
                    Some(g) => g.clone(),
                    None => self
                        .value(*x)
                        .data()
                        .iter()
                        .map(|&v| v > T::zero())
                        .collect(),
                }),
                _ => None,
            })
            .collect()
    }

    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Self {
            fault,
            ..Self::new()
        }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Number of distinct parameter nodes on this tape.
    pub fn param_count(&self) -> usize {
        self.param_vars.len()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("mul", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|&x| x * factor).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        self.conv2d_geom(x, w, b, geom)
    }

    /// Strided convolution that floors the output extent, as in the usual
    /// `k=3, stride=2, pad=1` halving stage.
    pub fn conv2d_floor(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new_floor(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        self.conv2d_geom(x, w, b, geom)
    }

    fn conv2d_geom(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let cols = ops::im2col(self.value(x).data(), &geom);
        let out = ops::conv2d_with_cols(self.value(w).data(), self.value(b).data(), &cols, &geom);
        let out = Tensor::from_parts(vec![geom.cout, geom.oh, geom.ow], out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("layer_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (y, cache) = ops::layer_norm_raw(
            self.value(x).data(),
            c,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let pinned = self
            .relu_pins
            .as_ref()
            .and_then(|p| p.get(self.relus))
            .filter(|gate| gate.len() == self.value(x).numel())
            .cloned();
        self.relus += 1;
        let rg = self.rg(&[x]);
        match pinned {
            None => {
                let out = ops::relu(self.value(x));
                self.push(out, Op::Relu { x, gate: None }, rg)
            }
            Some(gate) => {
                let v = self.value(x);
                let data = v
                    .data()
                    .iter()
                    .zip(&gate)
                    .map(|(&a, &on)| if on { a } else { T::zero() })
                    .collect();
                let out = Tensor::from_parts(v.shape().to_vec(), data);
                self.push(
                    out,
                    Op::Relu {
                        x,
                        gate: Some(gate),
                    },
                    rg,
                )
            }
        }
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_channel(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxChannel(x), rg))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(x), factor)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::embedding_lookup(self.value(table), ids)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks rank-3 tensors with equal spatial extents along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_channels needs at least one input".into()))?;
        let (_, h, w) = self.value(*first).dims3("concat_channels")?;
        let mut total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3("concat_channels")?;
            if (ph, pw) != (h, w) {
                return Err(Error::dim(
                    "concat_channels",
                    self.shape(*first),
                    self.shape(p),
                ));
            }
            total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![total, h, w], data),
            Op::ConcatChannels(parts.to_vec()),
            rg,
        ))
    }

    /// Repeats a length-C vector at every location of an `h×w` grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let v = self.value(x);
        let c = v.numel();
        if h == 0 || w == 0 {
            return Err(Error::dim("broadcast_spatial", v.shape(), &[c, h, w]));
        }
        let mut data = Vec::with_capacity(c * h * w);
        for &val in v.data() {
            data.extend(std::iter::repeat_n(val, h * w));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], data),
            Op::BroadcastSpatial(x),
            rg,
        ))
    }

    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("select_channel")?;
        if channel >= c {
            return Err(Error::Index {
                what: "channel",
                index: channel,
                bound: c,
            });
        }
        let data = self.value(x).data()[channel * h * w..(channel + 1) * h * w].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![h, w], data),
            Op::SelectChannel { x, channel },
            rg,
        ))
    }

    /// Smoothed soft Dice loss `1 − (2Σpg + eps) / (Σp + Σg + eps)` against a
    /// constant 0/1 target.
    pub fn dice_loss(&mut self, prob: Var, gt: &[T], eps: T) -> Result<Var> {
        let p = self.value(prob);
        if p.numel() != gt.len() {
            return Err(Error::dim("dice_loss", p.shape(), &[gt.len()]));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("dice eps must be positive".into()));
        }
        let (inter, psum, gsum) = dice_sums(p.data(), gt);
        let loss = T::one() - (T::of(2.0) * inter + eps) / (psum + gsum + eps);
        let rg = self.rg(&[prob]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                prob,
                gt: gt.to_vec(),
                eps,
            },
            rg,
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[T]) -> Result<Var> {
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(Error::Contract(format!(
                "weighted_sum: {} terms vs {} weights",
                terms.len(),
                weights.len()
            )));
        }
        let mut total = T::zero();
        for (&t, &w) in terms.iter().zip(weights) {
            let v = self.value(t);
            if !v.is_scalar() {
                return Err(Error::dim("weighted_sum", v.shape(), &[1]));
            }
            total += w * v.item();
        }
        let rg = self.rg(terms);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec(), weights.to_vec()),
            rg,
        ))
    }

    fn fault_factor(&self, site: BackwardFault) -> T {
        if self.fault == Some(site) {
            T::of(BackwardFault::FACTOR)
        } else {
            T::one()
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out_nodes: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        let mut visit_order = Vec::new();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            visit_order.push(i);
            let shape = node.value.shape().to_vec();
            match &node.op {
                Op::Leaf => {
                    out_nodes[i] = Some(Tensor::from_parts(shape, g));
                }
                Op::Param(id) => {
                    let t = Tensor::from_parts(shape, g);
                    out_nodes[i] = Some(t.clone());
                    params.push((*id, t));
                }
                op => self.backward_op(i, op, &g, &mut grads)?,
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            nodes: out_nodes,
            params,
            visit_order,
        })
    }

    fn backward_op(
        &self,
        out: usize,
        op: &Op<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let (_, n) = self.value(*b).dims2("matmul")?;
                if needs(a) {
                    let d = slot(&mut grads[a.0], m * k);
                    ops::gemm_abt_acc(g, self.value(*b).data(), d, m, n, k);
                }
                if needs(b) {
                    let d = slot(&mut grads[b.0], k * n);
                    ops::gemm_atb_acc(self.value(*a).data(), g, d, m, k, n);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let vb = self.value(*b).data();
                    let d = slot(&mut grads[a.0], g.len());
                    for ((d, &gi), &bi) in d.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                }
                if needs(b) {
                    let va = self.value(*a).data();
                    let d = slot(&mut grads[b.0], g.len());
                    for ((d, &gi), &ai) in d.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, f) => {
                if needs(a) {
                    let d = slot(&mut grads[a.0], g.len());
                    for (d, &gi) in d.iter_mut().zip(g) {
                        *d += gi * *f;
                    }
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    let len = self.value(*a).numel();
                    let d = slot(&mut grads[a.0], len);
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(a) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g);
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    let (m, n) = self.value(*a).dims2("transpose")?;
                    let d = slot(&mut grads[a.0], m * n);
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let p = geom.out_len();
                let kk = geom.patch_len();
                if needs(b) {
                    let d = slot(&mut grads[b.0], geom.cout);
                    for (co, row) in g.chunks(p).enumerate() {
                        d[co] += row.iter().copied().sum::<T>();
                    }
                }
                if needs(w) {
                    let mut dw = vec![T::zero(); geom.cout * kk];
                    ops::gemm_abt_acc(g, cols, &mut dw, geom.cout, p, kk);
                    let f = self.fault_factor(BackwardFault::ConvWeight);
                    dw.iter_mut().for_each(|v| *v *= f);
                    add_into(&mut grads[w.0], &dw);
                }
                if needs(x) {
                    let mut dcols = vec![T::zero(); kk * p];
                    ops::gemm_atb_acc(self.value(*w).data(), g, &mut dcols, geom.cout, kk, p);
                    let d = slot(&mut grads[x.0], geom.cin * geom.h * geom.w);
                    ops::col2im_acc(&dcols, geom, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (c, h, wd) = self.value(*x).dims3("layer_norm")?;
                let p = h * wd;
                let gam = self.value(*gamma).data();
                let f = self.fault_factor(BackwardFault::LayerNormAffine);
                if needs(gamma) {
                    let d = slot(&mut grads[gamma.0], c);
                    for ch in 0..c {
                        let s: T = (0..p).map(|i| g[ch * p + i] * cache.xhat[ch * p + i]).sum();
                        d[ch] += s * f;
                    }
                }
                if needs(beta) {
                    let d = slot(&mut grads[beta.0], c);
                    for ch in 0..c {
                        let s: T = g[ch * p..(ch + 1) * p].iter().copied().sum();
                        d[ch] += s * f;
                    }
                }
                if needs(x) {
                    let inv_c = T::one() / T::of(c as f64);
                    let mut mean_dxh = vec![T::zero(); p];
                    let mut mean_dxh_xh = vec![T::zero(); p];
                    for ch in 0..c {
                        for i in 0..p {
                            let dxh = g[ch * p + i] * gam[ch];
                            mean_dxh[i] += dxh;
                            mean_dxh_xh[i] += dxh * cache.xhat[ch * p + i];
                        }
                    }
                    let d = slot(&mut grads[x.0], c * p);
                    for ch in 0..c {
                        for i in 0..p {
                            let dxh = g[ch * p + i] * gam[ch];
                            d[ch * p + i] += cache.inv_std[i]
                                * (dxh
                                    - mean_dxh[i] * inv_c
                                    - cache.xhat[ch * p + i] * mean_dxh_xh[i] * inv_c);
                        }
                    }
                }
            }
            Op::Relu { x: a, gate } => {
                if needs(a) {
                    let va = self.value(*a).data();
                    let d = slot(&mut grads[a.0], g.len());
                    for (i, (d, &gi)) in d.iter_mut().zip(g).enumerate() {
                        let on = match gate {
                            Some(p) => p[i],
                            None => va[i] > T::zero(),
                        };
                        if on {
                            *d += gi;
                        }
                    }
                }
            }
            Op::SoftmaxChannel(a) => {
                if needs(a) {
                    let y = self.nodes[out].value.data();
                    let p = y.len() / 2;
                    let d = slot(&mut grads[a.0], 2 * p);
                    for i in 0..p {
                        let (p0, p1) = (y[i], y[p + i]);
                        let dot = p0 * g[i] + p1 * g[p + i];
                        d[i] += p0 * (g[i] - dot);
                        d[p + i] += p1 * (g[p + i] - dot);
                    }
                }
            }
            Op::Upsample { x, factor } => {
                if needs(x) {
                    let (c, h, w) = self.value(*x).dims3("bilinear_upsample")?;
                    let d = slot(&mut grads[x.0], c * h * w);
                    ops::upsample_backward_acc(g, c, h, w, *factor, d);
                }
            }
            Op::Embedding { table, ids } => {
                if needs(table) {
                    let (v, cl) = self.value(*table).dims2("embedding_lookup")?;
                    let n = ids.len();
                    let f = self.fault_factor(BackwardFault::EmbeddingScatter);
                    let d = slot(&mut grads[table.0], v * cl);
                    for (t, &id) in ids.iter().enumerate() {
                        for c in 0..cl {
                            d[id * cl + c] += g[c * n + t] * f;
                        }
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if needs(p) {
                        add_into(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::BroadcastSpatial(a) => {
                if needs(a) {
                    let c = self.value(*a).numel();
                    let hw = g.len() / c;
                    let d = slot(&mut grads[a.0], c);
                    for (ch, row) in g.chunks(hw).enumerate() {
                        d[ch] += row.iter().copied().sum::<T>();
                    }
                }
            }
            Op::SelectChannel { x, channel } => {
                if needs(x) {
                    let len = self.value(*x).numel();
                    let hw = g.len();
                    let d = slot(&mut grads[x.0], len);
                    for (d, &gi) in d[channel * hw..(channel + 1) * hw].iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Dice { prob, gt, eps } => {
                if needs(prob) {
                    let p = self.value(*prob).data();
                    let (inter, psum, gsum) = dice_sums(p, gt);
                    let den = psum + gsum + *eps;
                    let num = T::of(2.0) * inter + *eps;
                    let inv = g[0] / (den * den);
                    let d = slot(&mut grads[prob.0], p.len());
                    for (d, &gj) in d.iter_mut().zip(gt) {
                        *d -= (T::of(2.0) * gj * den - num) * inv;
                    }
                }
            }
            Op::WeightedSum(terms, weights) => {
                for (t, &w) in terms.iter().zip(weights) {
                    if needs(t) {
                        let d = slot(&mut grads[t.0], 1);
                        d[0] += g[0] * w;
                    }
                }
            }
        }
        Ok(())
    }
}

fn dice_sums<T: Real>(p: &[T], gt: &[T]) -> (T, T, T) {
    let mut inter = T::zero();
    let mut psum = T::zero();
    let mut gsum = T::zero();
    for (&pi, &gi) in p.iter().zip(gt) {
        inter += pi * gi;
        psum += pi;
        gsum += gi;
    }
    (inter, psum, gsum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gives_unit_grads() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.0, 5.0, 6.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gives_two_x() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient_at_kink_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", t(&[1], &[2.0])).unwrap();
        let b = store.add("b", t(&[1], &[5.0])).unwrap();
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let _vb = g.param(&store, b);
        let s = g.sum(va);
        let grads = g.backward(s).unwrap();
        grads.accumulate_into(&mut store).unwrap();
        assert_eq!(store.get(a).grad.data(), &[1.0]);
        assert_eq!(store.get(b).grad.data(), &[0.0]);
    }

    #[test]
    fn repeated_embedding_id_accumulates_twice() {
        let mut store = ParamStore::new();
        let tab = store
            .add("table", Tensor::from_fn(&[3, 2], |i| i as f64).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let tv = g.param(&store, tab);
        let l = g.embedding_lookup(tv, &[1, 1]).unwrap();
        let s = g.sum(l);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.param(tab).unwrap().data(),
            &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]
        );
    }

    #[test]
    fn backward_visits_in_reverse_tape_order() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 3.0);
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        let order = grads.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]), "{order:?}");
        assert_eq!(order.len(), 4);
    }

    #[test]
    fn param_registered_once_per_tape() {
        let mut store = ParamStore::new();
        let a = store.add("a", t(&[1], &[2.0])).unwrap();
        let mut g = Graph::new();
        let v1 = g.param(&store, a);
        let v2 = g.param(&store, a);
        assert_eq!(v1, v2);
        assert_eq!(g.param_count(), 1);
    }

    #[test]
    fn dice_node_matches_closed_form() {
        let mut g = Graph::new();
        let p = g.input(t(&[2, 2], &[0.5; 4]));
        let l = g.dice_loss(p, &[1.0, 1.0, 0.0, 0.0], 1.0).unwrap();
        assert!((g.value(l).item() - 0.4).abs() < 1e-15);
    }
}
