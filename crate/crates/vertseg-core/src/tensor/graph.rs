use std::marker::PhantomData;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Clamp bound keeping probabilities strictly inside (0, 1): sigmoid outputs
/// saturate to it instead of hitting 0/1 in low precision, and BCE clamps at
/// the same bound before taking logarithms.
pub const PROB_EPSILON: f64 = 1e-7;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    UpConv2x2 {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        input: NodeId,
    },
    /// Scalar `1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth)`.
    /// The three sums are saved at forward time for the backward pass.
    SoftDiceLoss {
        pred: NodeId,
        truth: Vec<T>,
        smooth: T,
        sums: [T; 3],
    },
    /// Scalar mean of `-[t*ln(p) + (1-t)*ln(1-p)]` with `p` clamped to
    /// `[PROB_EPSILON, 1 - PROB_EPSILON]`.
    Bce {
        pred: NodeId,
        truth: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn label(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2x2 { .. } => "maxpool2x2",
            Op::UpConv2x2 { .. } => "upconv2x2",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Mul { .. } => "mul",
            Op::Add { .. } => "add",
            Op::Sum { .. } => "sum",
            Op::SoftDiceLoss { .. } => "soft_dice_loss",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
///
/// Ops append nodes in execution order, so node ids are topologically
/// ordered and [`Graph::backward`] traverses them in exact reverse. A graph
/// records one forward pass and supports one backward pass; build a fresh
/// graph per iteration. Graphs are confined to the thread that built them
/// (the `!Send` marker enforces this); op kernels may still parallelize
/// internally over disjoint output slices, which keeps results independent
/// of thread count.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    _confined: PhantomData<*mut ()>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            _confined: PhantomData,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor. Gradient tracking follows the tensor's own
    /// `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<NodeId> {
        if !tensor.all_finite() {
            return Err(Error::non_finite("leaf tensor"));
        }
        let requires_grad = tensor.requires_grad();
        Ok(self.push(tensor, Op::Leaf, requires_grad))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node, populated by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        let mut value = value;
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node id {} does not belong to this graph",
                id.0
            )));
        }
        Ok(())
    }

    fn finish_op(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Result<NodeId> {
        let requires = match &op {
            Op::Leaf => false,
            Op::Conv2d { input, weight, bias } | Op::UpConv2x2 { input, weight, bias } => {
                self.nodes[input.0].requires_grad
                    || self.nodes[weight.0].requires_grad
                    || self.nodes[bias.0].requires_grad
            }
            Op::MaxPool2x2 { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Sum { input } => self.nodes[input.0].requires_grad,
            Op::ConcatChannels { a, b } | Op::Mul { a, b } | Op::Add { a, b } => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::SoftDiceLoss { pred, .. } | Op::Bce { pred, .. } => {
                self.nodes[pred.0].requires_grad
            }
        };
        let tensor = Tensor::new(shape, data)?;
        if !tensor.all_finite() {
            return Err(Error::non_finite(format!("output of {}", op.label())));
        }
        Ok(self.push(tensor, op, requires))
    }

    /// Same-padding stride-1 convolution. `input` is `[N, Cin, H, W]`,
    /// `weight` is `[Cout, Cin, k, k]` with odd `k`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_id(input)?;
        self.check_id(weight)?;
        self.check_id(bias)?;
        let [n, cin, h, w] = self.nodes[input.0].value.dims4()?;
        let [cout, wcin, k, k2] = self.nodes[weight.0].value.dims4()?;
        if k != k2 || k % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d input has {cin} channels but weight expects {wcin}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension("conv2d input has empty spatial dims".into()));
        }
        if self.nodes[bias.0].value.shape() != [cout] {
            return Err(Error::Dimension(format!(
                "conv2d bias must have shape [{cout}], got {:?}",
                self.nodes[bias.0].value.shape()
            )));
        }
        let mut out = vec![T::zero(); n * cout * h * w];
        kernels::conv2d_forward(
            self.nodes[input.0].value.data(),
            n,
            cin,
            h,
            w,
            self.nodes[weight.0].value.data(),
            cout,
            k,
            self.nodes[bias.0].value.data(),
            &mut out,
        );
        self.finish_op(
            out,
            vec![n, cout, h, w],
            Op::Conv2d {
                input,
                weight,
                bias,
            },
        )
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        self.check_id(input)?;
        let [n, c, h, w] = self.nodes[input.0].value.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool2x2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let mut out = vec![T::zero(); n * c * (h / 2) * (w / 2)];
        let mut argmax = Vec::new();
        kernels::maxpool2x2_forward(
            self.nodes[input.0].value.data(),
            n,
            c,
            h,
            w,
            &mut out,
            &mut argmax,
        );
        self.finish_op(
            out,
            vec![n, c, h / 2, w / 2],
            Op::MaxPool2x2 { input, argmax },
        )
    }

    /// Transposed convolution, kernel 2x2, stride 2: doubles both spatial
    /// dims. `weight` is `[Cin, Cout, 2, 2]`.
    pub fn upconv2x2(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_id(input)?;
        self.check_id(weight)?;
        self.check_id(bias)?;
        let [n, cin, h, w] = self.nodes[input.0].value.dims4()?;
        let [wcin, cout, k1, k2] = self.nodes[weight.0].value.dims4()?;
        if k1 != 2 || k2 != 2 {
            return Err(Error::Dimension(format!(
                "upconv2x2 weight kernel must be 2x2, got {k1}x{k2}"
            )));
        }
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "upconv2x2 input has {cin} channels but weight expects {wcin}"
            )));
        }
        if self.nodes[bias.0].value.shape() != [cout] {
            return Err(Error::Dimension(format!(
                "upconv2x2 bias must have shape [{cout}], got {:?}",
                self.nodes[bias.0].value.shape()
            )));
        }
        let mut out = vec![T::zero(); n * cout * 2 * h * 2 * w];
        kernels::upconv2x2_forward(
            self.nodes[input.0].value.data(),
            n,
            cin,
            h,
            w,
            self.nodes[weight.0].value.data(),
            cout,
            self.nodes[bias.0].value.data(),
            &mut out,
        );
        self.finish_op(
            out,
            vec![n, cout, 2 * h, 2 * w],
            Op::UpConv2x2 {
                input,
                weight,
                bias,
            },
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check_id(input)?;
        let src = &self.nodes[input.0].value;
        let out: Vec<T> = src.data().iter().map(|&v| v.max(T::zero())).collect();
        self.finish_op(out, src.shape().to_vec(), Op::Relu { input })
    }

    /// Numerically stable logistic function, saturating at
    /// [`PROB_EPSILON`] so outputs stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        self.check_id(input)?;
        let lo = T::from_f64(PROB_EPSILON);
        let hi = T::one() - lo;
        let src = &self.nodes[input.0].value;
        let out: Vec<T> = src
            .data()
            .iter()
            .map(|&v| {
                let y = if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                };
                y.max(lo).min(hi)
            })
            .collect();
        self.finish_op(out, src.shape().to_vec(), Op::Sigmoid { input })
    }

    /// Concatenates along the channel axis; channels of `a` precede `b`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let [na, ca, ha, wa] = self.nodes[a.0].value.dims4()?;
        let [nb, cb, hb, wb] = self.nodes[b.0].value.dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::Dimension(format!(
                "concat_channels requires matching batch and spatial dims, got \
                 [{na},{ca},{ha},{wa}] and [{nb},{cb},{hb},{wb}]"
            )));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        for batch in 0..na {
            out.extend_from_slice(&da[batch * ca * plane..][..ca * plane]);
            out.extend_from_slice(&db[batch * cb * plane..][..cb * plane]);
        }
        self.finish_op(out, vec![na, ca + cb, ha, wa], Op::ConcatChannels { a, b })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::Dimension(format!(
                "mul requires matching shapes, got {:?} and {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let out: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.finish_op(out, shape, Op::Mul { a, b })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::Dimension(format!(
                "add requires matching shapes, got {:?} and {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let out: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.finish_op(out, shape, Op::Add { a, b })
    }

    /// Sum of all elements, producing a scalar node.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check_id(input)?;
        let mut acc = T::zero();
        for v in self.nodes[input.0].value.data() {
            acc += *v;
        }
        self.finish_op(vec![acc], vec![1], Op::Sum { input })
    }

    /// Soft dice loss `1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)` as a
    /// scalar node. `truth` must be 0/1 values matching `pred`'s length.
    pub fn soft_dice_loss(&mut self, pred: NodeId, truth: &[T], smooth: f64) -> Result<NodeId> {
        self.check_id(pred)?;
        if smooth < 0.0 {
            return Err(Error::Parameter(format!(
                "smoothing constant must be non-negative, got {smooth}"
            )));
        }
        let p = self.nodes[pred.0].value.data();
        if p.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "soft_dice_loss prediction has {} elements, truth has {}",
                p.len(),
                truth.len()
            )));
        }
        let s = T::from_f64(smooth);
        let mut sum_pt = T::zero();
        let mut sum_p = T::zero();
        let mut sum_t = T::zero();
        for (&pv, &tv) in p.iter().zip(truth) {
            sum_pt += pv * tv;
            sum_p += pv;
            sum_t += tv;
        }
        let denom = sum_p + sum_t + s;
        // Empty prediction and truth with no smoothing: perfect agreement
        // on absence, dice 1, loss 0.
        let loss = if denom == T::zero() {
            T::zero()
        } else {
            T::one() - (T::from_f64(2.0) * sum_pt + s) / denom
        };
        self.finish_op(
            vec![loss],
            vec![1],
            Op::SoftDiceLoss {
                pred,
                truth: truth.to_vec(),
                smooth: s,
                sums: [sum_pt, sum_p, sum_t],
            },
        )
    }

    /// Mean binary cross-entropy against 0/1 targets as a scalar node.
    pub fn bce(&mut self, pred: NodeId, truth: &[T]) -> Result<NodeId> {
        self.check_id(pred)?;
        let p = self.nodes[pred.0].value.data();
        if p.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "bce prediction has {} elements, truth has {}",
                p.len(),
                truth.len()
            )));
        }
        let lo = T::from_f64(PROB_EPSILON);
        let hi = T::one() - lo;
        let mut acc = T::zero();
        for (&pv, &tv) in p.iter().zip(truth) {
            let pc = pv.max(lo).min(hi);
            acc += -(tv * pc.ln() + (T::one() - tv) * (T::one() - pc).ln());
        }
        let mean = acc / T::from_f64(p.len() as f64);
        self.finish_op(
            vec![mean],
            vec![1],
            Op::Bce {
                pred,
                truth: truth.to_vec(),
            },
        )
    }

    /// Populates gradients of every `requires_grad` node reachable from
    /// `loss`, which must be scalar. A graph supports exactly one backward
    /// pass; record a new forward pass (in a fresh graph) for the next
    /// iteration.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_id(loss)?;
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            // Nothing upstream tracks gradients; trivially done.
            return Ok(());
        }
        *self.nodes[loss.0].value.grad_storage_mut() = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].value.grad().is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let gout = node.value.grad().expect("grad present");
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let [n, cin, h, w] = before[input.0].value.dims4()?;
                    let [cout, _, k, _] = before[weight.0].value.dims4()?;
                    let din = before[input.0].requires_grad.then(|| {
                        let mut t = vec![T::zero(); before[input.0].value.numel()];
                        kernels::conv2d_backward_input(
                            gout,
                            n,
                            cout,
                            h,
                            w,
                            before[weight.0].value.data(),
                            cin,
                            k,
                            &mut t,
                        );
                        t
                    });
                    let dw = before[weight.0].requires_grad.then(|| {
                        let mut t = vec![T::zero(); before[weight.0].value.numel()];
                        kernels::conv2d_backward_weight(
                            gout,
                            before[input.0].value.data(),
                            n,
                            cin,
                            h,
                            w,
                            cout,
                            k,
                            &mut t,
                        );
                        t
                    });
                    let db = before[bias.0].requires_grad.then(|| {
                        let mut t = vec![T::zero(); cout];
                        kernels::conv2d_backward_bias(gout, n, cout, h * w, &mut t);
                        t
                    });
                    if let Some(t) = din {
                        accumulate(&mut before[input.0], &t);
                    }
                    if let Some(t) = dw {
                        accumulate(&mut before[weight.0], &t);
                    }
                    if let Some(t) = db {
                        accumulate(&mut before[bias.0], &t);
                    }
                }
                Op::UpConv2x2 {
                    input,
                    weight,
                    bias,
                } => {
                    let [n, cin, h, w] = before[input.0].value.dims4()?;
                    let [_, cout, _, _] = before[weight.0].value.dims4()?;
                    let din = before[input.0].requires_grad.then(|| {
                        let mut t = vec![T::zero(); before[input.0].value.numel()];
                        kernels::upconv2x2_backward_input(
                            gout,
                            n,
                            cout,
                            h,
                            w,
                            before[weight.0].value.data(),
                            cin,
                            &mut t,
                        );
                        t
                    });
                    let dw = before[weight.0].requires_grad.then(|| {
                        let mut t = vec![T::zero(); before[weight.0].value.numel()];
                        kernels::upconv2x2_backward_weight(
                            gout,
                            before[input.0].value.data(),
                            n,
                            cin,
                            h,
                            w,
                            cout,
                            &mut t,
                        );
                        t
                    });
                    let db = before[bias.0].requires_grad.then(|| {
                        let mut t = vec![T::zero(); cout];
                        kernels::upconv2x2_backward_bias(gout, n, cout, 4 * h * w, &mut t);
                        t
                    });
                    if let Some(t) = din {
                        accumulate(&mut before[input.0], &t);
                    }
                    if let Some(t) = dw {
                        accumulate(&mut before[weight.0], &t);
                    }
                    if let Some(t) = db {
                        accumulate(&mut before[bias.0], &t);
                    }
                }
                Op::MaxPool2x2 { input, argmax } => {
                    if before[input.0].requires_grad {
                        let mut t = vec![T::zero(); before[input.0].value.numel()];
                        kernels::maxpool2x2_backward(gout, argmax, &mut t);
                        accumulate(&mut before[input.0], &t);
                    }
                }
                Op::Relu { input } => {
                    if before[input.0].requires_grad {
                        let t: Vec<T> = node
                            .value
                            .data()
                            .iter()
                            .zip(gout)
                            .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                            .collect();
                        accumulate(&mut before[input.0], &t);
                    }
                }
                Op::Sigmoid { input } => {
                    if before[input.0].requires_grad {
                        let t: Vec<T> = node
                            .value
                            .data()
                            .iter()
                            .zip(gout)
                            .map(|(&y, &g)| g * y * (T::one() - y))
                            .collect();
                        accumulate(&mut before[input.0], &t);
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let [n, ca, h, w] = before[a.0].value.dims4()?;
                    let cb = before[b.0].value.dims4()?[1];
                    let plane = h * w;
                    let stride = (ca + cb) * plane;
                    if before[a.0].requires_grad {
                        let mut t = Vec::with_capacity(n * ca * plane);
                        for batch in 0..n {
                            t.extend_from_slice(&gout[batch * stride..][..ca * plane]);
                        }
                        accumulate(&mut before[a.0], &t);
                    }
                    if before[b.0].requires_grad {
                        let mut t = Vec::with_capacity(n * cb * plane);
                        for batch in 0..n {
                            t.extend_from_slice(
                                &gout[batch * stride + ca * plane..][..cb * plane],
                            );
                        }
                        accumulate(&mut before[b.0], &t);
                    }
                }
                Op::Mul { a, b } => {
                    let da = before[a.0].requires_grad.then(|| {
                        before[b.0]
                            .value
                            .data()
                            .iter()
                            .zip(gout)
                            .map(|(&y, &g)| g * y)
                            .collect::<Vec<T>>()
                    });
                    let db = before[b.0].requires_grad.then(|| {
                        before[a.0]
                            .value
                            .data()
                            .iter()
                            .zip(gout)
                            .map(|(&x, &g)| g * x)
                            .collect::<Vec<T>>()
                    });
                    if let Some(t) = da {
                        accumulate(&mut before[a.0], &t);
                    }
                    if let Some(t) = db {
                        accumulate(&mut before[b.0], &t);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    let g = gout.to_vec();
                    if before[a.0].requires_grad {
                        accumulate(&mut before[a.0], &g);
                    }
                    if before[b.0].requires_grad {
                        accumulate(&mut before[b.0], &g);
                    }
                }
                Op::Sum { input } => {
                    if before[input.0].requires_grad {
                        let g = gout[0];
                        let t = vec![g; before[input.0].value.numel()];
                        accumulate(&mut before[input.0], &t);
                    }
                }
                Op::SoftDiceLoss {
                    pred,
                    truth,
                    smooth,
                    sums,
                } => {
                    if before[pred.0].requires_grad {
                        let g = gout[0];
                        let [sum_pt, sum_p, sum_t] = *sums;
                        let denom = sum_p + sum_t + *smooth;
                        let t: Vec<T> = if denom == T::zero() {
                            vec![T::zero(); truth.len()]
                        } else {
                            let two = T::from_f64(2.0);
                            let numer = two * sum_pt + *smooth;
                            let d2 = denom * denom;
                            truth
                                .iter()
                                .map(|&tv| -g * (two * tv * denom - numer) / d2)
                                .collect()
                        };
                        accumulate(&mut before[pred.0], &t);
                    }
                }
                Op::Bce { pred, truth } => {
                    if before[pred.0].requires_grad {
                        let g = gout[0];
                        let lo = T::from_f64(PROB_EPSILON);
                        let hi = T::one() - lo;
                        let inv_n = T::one() / T::from_f64(truth.len() as f64);
                        let t: Vec<T> = before[pred.0]
                            .value
                            .data()
                            .iter()
                            .zip(truth)
                            .map(|(&pv, &tv)| {
                                // Clamped region is locally constant.
                                if pv <= lo || pv >= hi {
                                    T::zero()
                                } else {
                                    g * inv_n * (pv - tv) / (pv * (T::one() - pv))
                                }
                            })
                            .collect();
                        accumulate(&mut before[pred.0], &t);
                    }
                }
            }
        }

        for node in &self.nodes {
            if let Some(g) = node.value.grad() {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::non_finite(format!(
                        "gradient of {} output",
                        node.op.label()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Smallest margin protecting the graph's piecewise-linear kinks:
    /// distance of ReLU inputs to zero and the winner/runner-up gap inside
    /// each pooling window. Finite-difference checks are only trustworthy
    /// when this margin is comfortably larger than the probe step.
    pub fn fd_sensitivity(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.nodes[input.0].value.data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::MaxPool2x2 { input, .. } => {
                    let [n, c, h, w] = self.nodes[input.0].value.dims4().expect("pool input 4d");
                    let data = self.nodes[input.0].value.data();
                    for plane_idx in 0..n * c {
                        let plane = &data[plane_idx * h * w..][..h * w];
                        for oy in 0..h / 2 {
                            for ox in 0..w / 2 {
                                let vals = [
                                    plane[2 * oy * w + 2 * ox],
                                    plane[2 * oy * w + 2 * ox + 1],
                                    plane[(2 * oy + 1) * w + 2 * ox],
                                    plane[(2 * oy + 1) * w + 2 * ox + 1],
                                ];
                                let mut best = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for v in vals {
                                    let v = v.as_f64();
                                    if v > best {
                                        second = best;
                                        best = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                                // Windows whose maximum is a clamped zero are
                                // benign: every tied element carries zero
                                // gradient, and the ReLU margin already
                                // guards the clamp boundary.
                                if best > 0.0 {
                                    margin = margin.min(best - second);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

fn accumulate<T: Scalar>(node: &mut Node<T>, temp: &[T]) {
    let numel = node.value.numel();
    let storage = node.value.grad_storage_mut();
    let grad = storage.get_or_insert_with(|| vec![T::zero(); numel]);
    for (g, t) in grad.iter_mut().zip(temp) {
        *g += *t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: Vec<usize>, data: Vec<f64>, grad: bool) -> NodeId {
        g.leaf(
            Tensor::new(shape, data)
                .unwrap()
                .with_requires_grad(grad),
        )
        .unwrap()
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = leaf(
            &mut g,
            vec![1, 1, 4, 4],
            (0..16).map(|i| i as f64 * 0.37 - 2.0).collect(),
            false,
        );
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = leaf(&mut g, vec![1, 1, 3, 3], k, false);
        let b = leaf(&mut g, vec![1], vec![0.0], false);
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_zero_weight_annihilates() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![1, 2, 4, 4], vec![1.3; 32], false);
        let w = leaf(&mut g, vec![3, 2, 3, 3], vec![0.0; 54], false);
        let b = leaf(&mut g, vec![3], vec![0.0; 3], false);
        let y = g.conv2d(x, w, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_is_bilinear_in_input_and_weight() {
        // conv(a*x + b*y, w) = a*conv(x, w) + b*conv(y, w), and the same in
        // the weight argument, to within 1e-10 relative in f64.
        let data = |seed: u64, len: usize| -> Vec<f64> {
            let mut state = seed;
            (0..len)
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
                })
                .collect()
        };
        let run = |input: Vec<f64>, weight: Vec<f64>| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let x = g
                .leaf(Tensor::new(vec![1, 2, 5, 5], input).unwrap())
                .unwrap();
            let w = g
                .leaf(Tensor::new(vec![3, 2, 3, 3], weight).unwrap())
                .unwrap();
            let b = g.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap();
            let y = g.conv2d(x, w, b).unwrap();
            g.value(y).data().to_vec()
        };

        let x = data(1, 50);
        let y = data(2, 50);
        let w = data(3, 54);
        let w2 = data(4, 54);
        let (a, b) = (0.7, -1.3);

        let combo_in: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = run(combo_in, w.clone());
        let out_x = run(x.clone(), w.clone());
        let out_y = run(y, w.clone());
        for ((l, ox), oy) in lhs.iter().zip(&out_x).zip(&out_y) {
            let rhs = a * ox + b * oy;
            let rel = (l - rhs).abs() / l.abs().max(rhs.abs()).max(1e-30);
            assert!(rel < 1e-10, "input linearity: {l} vs {rhs}");
        }

        let combo_w: Vec<f64> = w.iter().zip(&w2).map(|(p, q)| a * p + b * q).collect();
        let lhs = run(x.clone(), combo_w);
        let out_w = run(x.clone(), w);
        let out_w2 = run(x, w2);
        for ((l, ow), ow2) in lhs.iter().zip(&out_w).zip(&out_w2) {
            let rhs = a * ow + b * ow2;
            let rel = (l - rhs).abs() / l.abs().max(rhs.abs()).max(1e-30);
            assert!(rel < 1e-10, "weight linearity: {l} vs {rhs}");
        }
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![1, 2, 4, 4], vec![0.0; 32], false);
        let w = leaf(&mut g, vec![3, 5, 3, 3], vec![0.0; 135], false);
        let b = leaf(&mut g, vec![3], vec![0.0; 3], false);
        assert!(matches!(g.conv2d(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![1, 1, 3, 4], vec![0.0; 12], false);
        assert!(matches!(g.maxpool2x2(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_constant_input_stays_constant() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![1, 1, 4, 4], vec![2.5; 16], false);
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn upconv_zero_input_gives_zero_output() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![1, 2, 3, 3], vec![0.0; 18], false);
        let w = leaf(&mut g, vec![2, 1, 2, 2], vec![0.7; 8], false);
        let b = leaf(&mut g, vec![1], vec![0.0], false);
        let y = g.upconv2x2(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 6, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![3], vec![-1.0, 0.0, 2.0], false);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![1], vec![0.0], false);
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![1], vec![0.0], true);
        let y = g.sigmoid(x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!((g.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn concat_shapes_and_slicing_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a_data: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let b_data: Vec<f64> = (0..48).map(|i| 100.0 + i as f64).collect();
        let a = leaf(&mut g, vec![1, 2, 4, 4], a_data.clone(), true);
        let b = leaf(&mut g, vec![1, 3, 4, 4], b_data.clone(), true);
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 5, 4, 4]);
        assert_eq!(&g.value(y).data()[..32], a_data.as_slice());
        assert_eq!(&g.value(y).data()[32..], b_data.as_slice());

        // Backward of sum routes ones into both inputs.
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_spatial_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, vec![1, 2, 4, 4], vec![0.0; 32], false);
        let b = leaf(&mut g, vec![1, 2, 2, 2], vec![0.0; 8], false);
        assert!(matches!(
            g.concat_channels(a, b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_linear_case_grad_is_other_factor() {
        // loss = sum(w * x) for fixed x => d(loss)/dw = x.
        let mut g = Graph::<f64>::new();
        let x_data = vec![0.5, -1.5, 2.0, 3.25];
        let x = leaf(&mut g, vec![4], x_data.clone(), false);
        let w = leaf(&mut g, vec![4], vec![1.0, 2.0, 3.0, 4.0], true);
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), x_data.as_slice());
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let w = leaf(&mut g, vec![2], vec![1.0, 2.0], true);
        let loss = g.sum(w).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let w = leaf(&mut g, vec![2], vec![1.0, 2.0], true);
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        let mut g = Graph::<f64>::new();
        let x = leaf(
            &mut g,
            vec![1, 1, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0],
            true,
        );
        let y = g.maxpool2x2(x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn upconv_grad_of_sum_is_weight_total() {
        // d(sum(upconv(x)))/dx[i] = sum of all kernel weights, everywhere.
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![1, 1, 2, 2], vec![0.3, 0.7, -0.2, 1.1], true);
        let w = leaf(&mut g, vec![1, 1, 2, 2], vec![0.25, -0.5, 1.5, 2.0], false);
        let b = leaf(&mut g, vec![1], vec![0.1], false);
        let y = g.upconv2x2(x, w, b).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let total = 0.25 - 0.5 + 1.5 + 2.0;
        for v in g.grad(x).unwrap() {
            assert!((v - total).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(g.leaf(t), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sigmoid_saturation_stays_inside_unit_interval() {
        let mut g = Graph::<f32>::new();
        let x = g
            .leaf(Tensor::new(vec![2], vec![-80.0f32, 80.0]).unwrap())
            .unwrap();
        let y = g.sigmoid(x).unwrap();
        for &v in g.value(y).data() {
            assert!(v > 0.0 && v < 1.0, "saturated sigmoid left (0,1): {v}");
        }
    }
}
