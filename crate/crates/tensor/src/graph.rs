//! Define-by-run computation tape.
//!
//! Every operation appends a node holding its output value and what its
//! backward rule needs. Node ids increase in creation order, so iterating ids
//! in reverse is a valid topological order for [`Graph::backward`].

use crate::error::{Result, TensorError};
use crate::ops::activation::{relu_backward, relu_forward, sigmoid, sigmoid_backward};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::ops::dense::{dense_backward, dense_forward};
use crate::ops::loss;
use crate::ops::norm::{batchnorm_backward, batchnorm_eval, batchnorm_train, ChannelLayout};
use crate::ops::pool::{
    global_avg_pool_backward, global_avg_pool_forward, max_pool2d_backward, max_pool2d_forward, PoolGeometry,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch norm, for updating
/// running averages outside the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub enum BatchNormMode<'a, T> {
    Train { eps: f64 },
    Eval { running_mean: &'a [T], running_var: &'a [T], eps: f64 },
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        spatial: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    CosineLoss {
        input: Var,
        target: Vec<T>,
        rows: usize,
        dim: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Reverse-mode autodiff tape over tensors of `T`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    track_branches: bool,
    branch_hash: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_branches: false,
            branch_hash: FNV_OFFSET,
        }
    }

    /// Records a hash of every piecewise decision (ReLU masks, max-pool
    /// winners) so callers can detect when a perturbation crosses a kink.
    pub fn with_branch_tracking() -> Self {
        Self {
            track_branches: true,
            ..Self::new()
        }
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    fn mix(&mut self, v: u64) {
        self.branch_hash = (self.branch_hash ^ v).wrapping_mul(FNV_PRIME);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        let value = Tensor::new(shape, data)
            .expect("kernel output length matches shape")
            .with_requires_grad(requires_grad);
        self.push(value, op)
    }

    /// Adds a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != geom.out_channels {
                return Err(TensorError::dim("conv2d.bias", "length", geom.out_channels, bs.iter().product()));
            }
        }
        let out = conv2d_forward(
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
            &geom,
        );
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.derived(
            geom.output_shape(),
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    fn channel_layout(&self, op: &'static str, input: Var) -> Result<ChannelLayout> {
        let s = self.shape(input);
        match s.len() {
            2 => Ok(ChannelLayout {
                batch: s[0],
                channels: s[1],
                spatial: 1,
            }),
            4 => Ok(ChannelLayout {
                batch: s[0],
                channels: s[1],
                spatial: s[2] * s[3],
            }),
            _ => Err(TensorError::Rank {
                op,
                expected: 4,
                shape: s.to_vec(),
            }),
        }
    }

    /// Batch normalization over `N x C x H x W` (or `N x C`) input.
    /// Training mode also returns the observed batch statistics.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let layout = self.channel_layout("batchnorm2d", input)?;
        for (name, v) in [("batchnorm2d.gamma", gamma), ("batchnorm2d.beta", beta)] {
            let n = self.value(v).numel();
            if n != layout.channels {
                return Err(TensorError::dim(name, "channel count", layout.channels, n));
            }
        }
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(input).to_vec();
        match mode {
            BatchNormMode::Train { eps } => {
                if layout.count() == 0 {
                    return Err(TensorError::invalid("batchnorm2d", "empty batch in training mode"));
                }
                let f = batchnorm_train(self.data(input), self.data(gamma), self.data(beta), layout, eps);
                let stats = BatchStats {
                    mean: f.batch_mean,
                    var: f.batch_var,
                };
                let (xhat, inv_std) = if rg { (f.xhat, f.inv_std) } else { (Vec::new(), Vec::new()) };
                let v = self.derived(
                    shape,
                    f.output,
                    rg,
                    Op::BatchNorm {
                        input,
                        gamma,
                        beta,
                        layout,
                        xhat,
                        inv_std,
                        train: true,
                    },
                );
                Ok((v, Some(stats)))
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.len() != layout.channels || running_var.len() != layout.channels {
                    return Err(TensorError::dim(
                        "batchnorm2d.running_stats",
                        "channel count",
                        layout.channels,
                        running_mean.len().min(running_var.len()),
                    ));
                }
                let (out, xhat, inv_std) = batchnorm_eval(
                    self.data(input),
                    self.data(gamma),
                    self.data(beta),
                    running_mean,
                    running_var,
                    layout,
                    eps,
                );
                let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
                let v = self.derived(
                    shape,
                    out,
                    rg,
                    Op::BatchNorm {
                        input,
                        gamma,
                        beta,
                        layout,
                        xhat,
                        inv_std,
                        train: false,
                    },
                );
                Ok((v, None))
            }
        }
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = PoolGeometry::new(self.shape(input), kernel, stride, padding)?;
        let (out, argmax) = max_pool2d_forward(self.data(input), &geom);
        if self.track_branches {
            for &a in &argmax {
                self.mix(a as u64);
            }
        }
        let rg = self.needs(input);
        let argmax = if rg { argmax } else { Vec::new() };
        Ok(self.derived(geom.output_shape(), out, rg, Op::MaxPool2d { input, argmax }))
    }

    /// `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(TensorError::Rank {
                op: "global_avg_pool",
                expected: 4,
                shape: s.to_vec(),
            });
        }
        let (n, c, spatial) = (s[0], s[1], s[2] * s[3]);
        if spatial == 0 {
            return Err(TensorError::invalid("global_avg_pool", "empty spatial extent"));
        }
        let out = global_avg_pool_forward(self.data(input), n * c, spatial);
        let rg = self.needs(input);
        Ok(self.derived(vec![n, c], out, rg, Op::GlobalAvgPool { input, spatial }))
    }

    /// `N x In` times `Out x In` weight, plus optional `Out` bias.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 {
            return Err(TensorError::Rank {
                op: "dense",
                expected: 2,
                shape: xs.to_vec(),
            });
        }
        if ws.len() != 2 {
            return Err(TensorError::Rank {
                op: "dense.weight",
                expected: 2,
                shape: ws.to_vec(),
            });
        }
        if xs[1] != ws[1] {
            return Err(TensorError::dim("dense", "input features (dim 1)", ws[1], xs[1]));
        }
        let (n, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            let bn = self.value(b).numel();
            if bn != fan_out {
                return Err(TensorError::dim("dense.bias", "length", fan_out, bn));
            }
        }
        let out = dense_forward(
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
            n,
            fan_in,
            fan_out,
        );
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.derived(vec![n, fan_out], out, rg, Op::Dense { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = relu_forward(self.data(input));
        if self.track_branches {
            let mut h = 0u64;
            for (i, v) in self.data(input).iter().enumerate() {
                if *v > T::zero() {
                    h = h.wrapping_mul(31).wrapping_add(i as u64 + 1);
                }
            }
            self.mix(h);
        }
        let shape = self.shape(input).to_vec();
        let rg = self.needs(input);
        self.derived(shape, out, rg, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out: Vec<T> = self.data(input).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.needs(input);
        self.derived(shape, out, rg, Op::Sigmoid { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::invalid(
                "add",
                format!("shape {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.derived(shape, out, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out: Vec<T> = self.data(input).iter().map(|&v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.needs(input);
        self.derived(shape, out, rg, Op::Scale { input, factor })
    }

    /// `sum_i w_i x_i`, a scalar probe used for gradient checks.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let n = self.value(input).numel();
        if weights.len() != n {
            return Err(TensorError::dim("weighted_sum", "weight length", n, weights.len()));
        }
        let s: f64 = self
            .data(input)
            .iter()
            .zip(weights)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let rg = self.needs(input);
        Ok(self.derived(
            vec![],
            vec![T::lit(s)],
            rg,
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let l = loss::bce_with_logits(self.data(logits), targets)?;
        let rg = self.needs(logits);
        Ok(self.derived(
            vec![],
            vec![T::lit(l)],
            rg,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over rows of `2 - 2 cos(p_i, target_i)` for `N x D` predictions;
    /// the target is a constant.
    pub fn cosine_loss(&mut self, input: Var, target: &[T]) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 2 {
            return Err(TensorError::Rank {
                op: "cosine_loss",
                expected: 2,
                shape: s.to_vec(),
            });
        }
        let (rows, dim) = (s[0], s[1]);
        if target.len() != rows * dim {
            return Err(TensorError::dim("cosine_loss", "target length", rows * dim, target.len()));
        }
        if rows == 0 {
            return Err(TensorError::invalid("cosine_loss", "empty batch"));
        }
        let l = loss::cosine_loss(self.data(input), target, rows, dim)?;
        let rg = self.needs(input);
        Ok(self.derived(
            vec![],
            vec![T::lit(l)],
            rg,
            Op::CosineLoss {
                input,
                target: target.to_vec(),
                rows,
                dim,
            },
        ))
    }

    /// Back-propagates from a one-element `loss`, leaving gradients on every
    /// leaf that requires them. Intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.shape().to_vec()));
        }
        let live = ls.requires_grad();
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !live {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].value.requires_grad() {
                continue;
            }
            let contributions = self.local_grads(id, &dy);
            match &self.nodes[id].op {
                Op::Leaf => grads[id] = Some(dy),
                _ => {
                    for (v, g) in contributions {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
        }
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[id].value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let g = conv2d_backward(
                    self.data(*input),
                    self.data(*weight),
                    dy,
                    geom,
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                push_some(&mut out, *input, g.input);
                push_some(&mut out, *weight, g.weight);
                if let Some(b) = bias {
                    push_some(&mut out, *b, g.bias);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            } => {
                let g = batchnorm_backward(
                    dy,
                    xhat,
                    inv_std,
                    self.data(*gamma),
                    *layout,
                    *train,
                    self.needs(*input),
                );
                push_some(&mut out, *input, g.input);
                if self.needs(*gamma) {
                    out.push((*gamma, g.gamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, g.beta));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let n = self.value(*input).numel();
                out.push((*input, max_pool2d_backward(dy, argmax, n)));
            }
            Op::GlobalAvgPool { input, spatial } => {
                out.push((*input, global_avg_pool_backward(dy, *spatial)));
            }
            Op::Dense { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, fan_in, fan_out) = (xs[0], xs[1], self.shape(*weight)[0]);
                let g = dense_backward(
                    self.data(*input),
                    self.data(*weight),
                    dy,
                    n,
                    fan_in,
                    fan_out,
                    [
                        self.needs(*input),
                        self.needs(*weight),
                        bias.is_some_and(|b| self.needs(b)),
                    ],
                );
                push_some(&mut out, *input, g.input);
                push_some(&mut out, *weight, g.weight);
                if let Some(b) = bias {
                    push_some(&mut out, *b, g.bias);
                }
            }
            Op::Relu { input } => out.push((*input, relu_backward(self.data(*input), dy))),
            Op::Sigmoid { input } => out.push((*input, sigmoid_backward(node.value.data(), dy))),
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, dy.to_vec()));
                }
            }
            Op::Scale { input, factor } => out.push((*input, dy.iter().map(|&d| d * *factor).collect())),
            Op::WeightedSum { input, weights } => {
                out.push((*input, weights.iter().map(|&w| w * dy[0]).collect()));
            }
            Op::BceWithLogits { logits, targets } => {
                out.push((
                    *logits,
                    loss::bce_with_logits_backward(self.data(*logits), targets, dy[0]),
                ));
            }
            Op::CosineLoss {
                input,
                target,
                rows,
                dim,
            } => {
                out.push((
                    *input,
                    loss::cosine_loss_backward(self.data(*input), target, *rows, *dim, dy[0]),
                ));
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        out
    }
}

fn push_some<T>(out: &mut Vec<(Var, Vec<T>)>, v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        out.push((v, g));
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
