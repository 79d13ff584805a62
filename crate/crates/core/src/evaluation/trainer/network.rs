//! Reverse-mode differentiation over a compiled genome graph.
//!
//! Activations are dense NHWC buffers; convolutions run as im2col plus a
//! matrix product. Every convolution node is convolution + per-channel
//! batch normalization + rectifier, matching the parameter accounting in
//! the genome module. All arithmetic is f64 and sequential, so a fixed
//! (genome, seed, batch sequence) reproduces bit-identical weights.

use crate::evaluation::EvaluatorFailure;
use crate::genome::{Genome, LayerKind, NodeId, TensorShape};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// A dense NHWC activation buffer.
#[derive(Debug, Clone)]
pub struct Act {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Act { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    #[inline]
    pub fn index(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.h + h) * self.w + w) * self.c + c
    }
}

/// One executable step of the compiled graph. A `None` input reads the
/// image batch (the node is the graph's input node).
#[derive(Debug, Clone)]
enum OpPlan {
    Conv { input: Option<NodeId>, kernel: usize, stride: usize },
    Pool { input: Option<NodeId> },
    Concat { first: NodeId, second: NodeId },
    GlobalPool { input: Option<NodeId> },
}

#[derive(Debug, Clone)]
struct Plan {
    node: NodeId,
    out_h: usize,
    out_w: usize,
    op: OpPlan,
}

#[derive(Debug, Clone)]
struct ConvParams {
    weight: Array2<f64>, // (c_out, k*k*c_in), column = (kh*k + kw)*c_in + c
    bias: Array1<f64>,
    gamma: Array1<f64>,
    beta: Array1<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
    v_weight: Array2<f64>,
    v_bias: Array1<f64>,
    v_gamma: Array1<f64>,
    v_beta: Array1<f64>,
}

#[derive(Debug, Clone)]
struct HeadParams {
    weight: Array2<f64>, // (classes, c_in)
    bias: Array1<f64>,
    v_weight: Array2<f64>,
    v_bias: Array1<f64>,
}

/// Per-forward intermediate values needed by the backward pass.
pub struct Cache {
    acts: BTreeMap<NodeId, Act>,
    conv: BTreeMap<NodeId, ConvCache>,
    pool_argmax: BTreeMap<NodeId, Vec<usize>>,
    head_input: Array2<f64>, // (n, c_in)
}

struct ConvCache {
    cols: Array2<f64>,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>, // per channel
    relu_mask: Vec<bool>,
    in_dims: (usize, usize, usize, usize),
}

/// Parameter gradients, keyed like the parameters themselves.
pub struct Grads {
    conv: BTreeMap<NodeId, (Array2<f64>, Array1<f64>, Array1<f64>, Array1<f64>)>,
    head_weight: Array2<f64>,
    head_bias: Array1<f64>,
}

/// A genome compiled to a trainable network.
pub struct Network {
    plans: Vec<Plan>,
    convs: BTreeMap<NodeId, ConvParams>,
    head: HeadParams,
    head_input_node: NodeId,
    input_shape: TensorShape,
    classes: usize,
}

impl Network {
    /// Compile and initialize: He fan-in scaled normals for convolution
    /// weights, gamma 1 / beta 0, zero biases.
    pub fn new<R: Rng>(genome: &Genome, rng: &mut R) -> Result<Self, EvaluatorFailure> {
        let violations = genome.validate();
        if !violations.is_empty() {
            return Err(EvaluatorFailure::Internal(format!(
                "genome is invalid: {}",
                violations[0]
            )));
        }
        let shapes = genome
            .infer_shapes()
            .map_err(|e| EvaluatorFailure::ShapeMismatch(e.to_string()))?;
        let order = genome.topological_order().expect("validated genome");

        let mut plans = Vec::new();
        let mut convs = BTreeMap::new();
        let mut head = None;
        let mut head_input_node = NodeId(0);
        let mut classes = 0usize;

        for id in order {
            let kind = genome.kind(id).expect("node exists");
            let preds = genome.preds(id);
            let in_shape = |p: &[NodeId]| -> TensorShape {
                if p.is_empty() {
                    genome.input_shape()
                } else {
                    shapes.get(p[0]).expect("shape inferred")
                }
            };
            let out = shapes.get(id).expect("shape inferred");
            match kind {
                LayerKind::Conv { channels, kernel, stride } => {
                    let input = in_shape(&preds);
                    let c_in = input.depth as usize;
                    let c_out = channels as usize;
                    let k = kernel as usize;
                    let fan_in = (k * k * c_in) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    let weight = Array2::from_shape_fn((c_out, k * k * c_in), |_| {
                        normal.sample(rng)
                    });
                    convs.insert(
                        id,
                        ConvParams {
                            v_weight: Array2::zeros(weight.dim()),
                            weight,
                            bias: Array1::zeros(c_out),
                            gamma: Array1::ones(c_out),
                            beta: Array1::zeros(c_out),
                            running_mean: Array1::zeros(c_out),
                            running_var: Array1::ones(c_out),
                            v_bias: Array1::zeros(c_out),
                            v_gamma: Array1::zeros(c_out),
                            v_beta: Array1::zeros(c_out),
                        },
                    );
                    plans.push(Plan {
                        node: id,
                        out_h: out.height as usize,
                        out_w: out.width as usize,
                        op: OpPlan::Conv {
                            input: preds.first().copied(),
                            kernel: k,
                            stride: stride as usize,
                        },
                    });
                }
                LayerKind::Pool => plans.push(Plan {
                    node: id,
                    out_h: out.height as usize,
                    out_w: out.width as usize,
                    op: OpPlan::Pool { input: preds.first().copied() },
                }),
                LayerKind::Concat => plans.push(Plan {
                    node: id,
                    out_h: out.height as usize,
                    out_w: out.width as usize,
                    op: OpPlan::Concat { first: preds[0], second: preds[1] },
                }),
                LayerKind::GlobalPool => plans.push(Plan {
                    node: id,
                    out_h: 1,
                    out_w: 1,
                    op: OpPlan::GlobalPool { input: preds.first().copied() },
                }),
                LayerKind::Classifier { num_classes } => {
                    let input = in_shape(&preds);
                    let c_in = input.depth as usize;
                    classes = num_classes as usize;
                    let normal = Normal::new(0.0, (1.0 / c_in as f64).sqrt()).expect("finite");
                    let weight =
                        Array2::from_shape_fn((classes, c_in), |_| normal.sample(rng));
                    head = Some(HeadParams {
                        v_weight: Array2::zeros(weight.dim()),
                        weight,
                        bias: Array1::zeros(classes),
                        v_bias: Array1::zeros(classes),
                    });
                    head_input_node = preds[0];
                }
            }
        }

        Ok(Network {
            plans,
            convs,
            head: head.expect("validated genome has a classifier"),
            head_input_node,
            input_shape: genome.input_shape(),
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    /// Trainable parameter count; matches the genome's own accounting.
    pub fn param_count(&self) -> u64 {
        let mut total = self.head.weight.len() as u64 + self.head.bias.len() as u64;
        for p in self.convs.values() {
            total += (p.weight.len() + p.bias.len() + p.gamma.len() + p.beta.len()) as u64;
        }
        total
    }

    /// Forward pass. `training` selects batch statistics (and updates the
    /// running estimates); otherwise the running statistics are used.
    pub fn forward(&mut self, batch: &Act, training: bool) -> (Array2<f64>, Cache) {
        let mut cache = Cache {
            acts: BTreeMap::new(),
            conv: BTreeMap::new(),
            pool_argmax: BTreeMap::new(),
            head_input: Array2::zeros((0, 0)),
        };

        for plan in &self.plans.clone() {
            let out = match &plan.op {
                OpPlan::Conv { input, kernel, stride } => {
                    let x = match input {
                        Some(id) => cache.acts.get(id).expect("upstream activation cached"),
                        None => batch,
                    };
                    let params = self.convs.get_mut(&plan.node).expect("conv params");
                    let (act, conv_cache) = conv_bn_relu_forward(
                        x,
                        params,
                        *kernel,
                        *stride,
                        plan.out_h,
                        plan.out_w,
                        training,
                    );
                    cache.conv.insert(plan.node, conv_cache);
                    act
                }
                OpPlan::Pool { input } => {
                    let x = match input {
                        Some(id) => cache.acts.get(id).expect("upstream activation cached"),
                        None => batch,
                    };
                    let (act, argmax) = maxpool_forward(x, plan.out_h, plan.out_w);
                    cache.pool_argmax.insert(plan.node, argmax);
                    act
                }
                OpPlan::Concat { first, second } => {
                    let a = cache.acts.get(first).expect("concat input cached");
                    let b = cache.acts.get(second).expect("concat input cached");
                    concat_forward(a, b)
                }
                OpPlan::GlobalPool { input } => {
                    let x = match input {
                        Some(id) => cache.acts.get(id).expect("upstream activation cached"),
                        None => batch,
                    };
                    global_pool_forward(x)
                }
            };
            cache.acts.insert(plan.node, out);
        }

        let head_in = cache.acts.get(&self.head_input_node).expect("head input");
        let n = head_in.n;
        let c = head_in.c;
        let input2d =
            Array2::from_shape_vec((n, c), head_in.data.clone()).expect("1x1 spatial input");
        let logits = input2d.dot(&self.head.weight.t())
            + &self.head.bias.view().insert_axis(ndarray::Axis(0));
        cache.head_input = input2d;
        (logits, cache)
    }

    /// Backward pass from logits gradient. Returns parameter gradients.
    pub fn backward(&self, cache: &Cache, dlogits: &Array2<f64>) -> Grads {
        let head_weight_grad = dlogits.t().dot(&cache.head_input);
        let head_bias_grad = dlogits.sum_axis(ndarray::Axis(0));
        let dhead_in = dlogits.dot(&self.head.weight); // (n, c_in)

        // Gradient w.r.t. each node's output activations.
        let mut grads_out: BTreeMap<NodeId, Act> = BTreeMap::new();
        {
            let head_act = cache.acts.get(&self.head_input_node).expect("head input");
            let mut g = Act::zeros(head_act.n, 1, 1, head_act.c);
            g.data.copy_from_slice(dhead_in.as_slice().expect("contiguous"));
            grads_out.insert(self.head_input_node, g);
        }

        let mut conv_grads = BTreeMap::new();

        for plan in self.plans.iter().rev() {
            let Some(dout) = grads_out.remove(&plan.node) else {
                continue; // node without gradient flow (cannot happen on valid genomes)
            };
            match &plan.op {
                OpPlan::Conv { input, kernel, stride } => {
                    let params = self.convs.get(&plan.node).expect("conv params");
                    let conv_cache = cache.conv.get(&plan.node).expect("conv cache");
                    let want_dx = input.is_some();
                    let (dw, db, dgamma, dbeta, dx) = conv_bn_relu_backward(
                        &dout, params, conv_cache, *kernel, *stride, want_dx,
                    );
                    conv_grads.insert(plan.node, (dw, db, dgamma, dbeta));
                    if let (Some(id), Some(dx)) = (input, dx) {
                        accumulate(&mut grads_out, *id, dx);
                    }
                }
                OpPlan::Pool { input } => {
                    if let Some(id) = input {
                        let argmax = cache.pool_argmax.get(&plan.node).expect("pool cache");
                        let dx = maxpool_backward(&dout, argmax, upstream_dims(cache, *id));
                        accumulate(&mut grads_out, *id, dx);
                    }
                }
                OpPlan::Concat { first, second } => {
                    let (da, db) = concat_backward(
                        &dout,
                        upstream_dims(cache, *first),
                        upstream_dims(cache, *second),
                    );
                    accumulate(&mut grads_out, *first, da);
                    accumulate(&mut grads_out, *second, db);
                }
                OpPlan::GlobalPool { input } => {
                    if let Some(id) = input {
                        let dx = global_pool_backward(&dout, upstream_dims(cache, *id));
                        accumulate(&mut grads_out, *id, dx);
                    }
                }
            }
        }

        Grads { conv: conv_grads, head_weight: head_weight_grad, head_bias: head_bias_grad }
    }

    /// One SGD step with momentum and weight decay:
    /// `v = mom*v + (g + wd*w); w -= lr*v`. Normalization parameters and
    /// biases skip weight decay.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64, momentum: f64, weight_decay: f64) {
        for (node, (dw, db, dgamma, dbeta)) in &grads.conv {
            let p = self.convs.get_mut(node).expect("conv params");
            update2(&mut p.weight, &mut p.v_weight, dw, lr, momentum, weight_decay);
            update1(&mut p.bias, &mut p.v_bias, db, lr, momentum, 0.0);
            update1(&mut p.gamma, &mut p.v_gamma, dgamma, lr, momentum, 0.0);
            update1(&mut p.beta, &mut p.v_beta, dbeta, lr, momentum, 0.0);
        }
        update2(
            &mut self.head.weight,
            &mut self.head.v_weight,
            &grads.head_weight,
            lr,
            momentum,
            weight_decay,
        );
        update1(&mut self.head.bias, &mut self.head.v_bias, &grads.head_bias, lr, momentum, 0.0);
    }

    /// Flatten every trainable parameter (convolutions in node order, then
    /// the classifier head). Used for equivalence checks and gradient
    /// verification.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.convs.values() {
            out.extend(p.weight.iter());
            out.extend(p.bias.iter());
            out.extend(p.gamma.iter());
            out.extend(p.beta.iter());
        }
        out.extend(self.head.weight.iter());
        out.extend(self.head.bias.iter());
        out
    }

    pub fn set_param_vector(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        for p in self.convs.values_mut() {
            for v in p.weight.iter_mut() {
                *v = it.next().expect("enough values");
            }
            for v in p.bias.iter_mut() {
                *v = it.next().expect("enough values");
            }
            for v in p.gamma.iter_mut() {
                *v = it.next().expect("enough values");
            }
            for v in p.beta.iter_mut() {
                *v = it.next().expect("enough values");
            }
        }
        for v in self.head.weight.iter_mut() {
            *v = it.next().expect("enough values");
        }
        for v in self.head.bias.iter_mut() {
            *v = it.next().expect("enough values");
        }
        assert!(it.next().is_none(), "too many values");
    }

    /// Gradients flattened in the same order as [`Network::param_vector`].
    pub fn grad_vector(&self, grads: &Grads) -> Vec<f64> {
        let mut out = Vec::new();
        for node in self.convs.keys() {
            let (dw, db, dgamma, dbeta) = grads.conv.get(node).expect("grads for conv");
            out.extend(dw.iter());
            out.extend(db.iter());
            out.extend(dgamma.iter());
            out.extend(dbeta.iter());
        }
        out.extend(grads.head_weight.iter());
        out.extend(grads.head_bias.iter());
        out
    }

    /// Copy running batch-norm statistics (they are state, not trainable
    /// parameters, but segment-resume equivalence covers them too).
    pub fn bn_state_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.convs.values() {
            out.extend(p.running_mean.iter());
            out.extend(p.running_var.iter());
        }
        out
    }
}

fn upstream_dims(cache: &Cache, input: NodeId) -> (usize, usize, usize, usize) {
    let act = cache.acts.get(&input).expect("input activation cached");
    (act.n, act.h, act.w, act.c)
}

/// Add `dx` into the gradient accumulator for `input` (outputs consumed by
/// several nodes sum their incoming gradients).
fn accumulate(grads_out: &mut BTreeMap<NodeId, Act>, input: NodeId, dx: Act) {
    match grads_out.get_mut(&input) {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&dx.data) {
                *a += b;
            }
        }
        None => {
            grads_out.insert(input, dx);
        }
    }
}

/// Same-padding amounts for `out = ceil(in / stride)`.
fn same_padding(in_size: usize, out_size: usize, kernel: usize, stride: usize) -> usize {
    let needed = (out_size - 1) * stride + kernel;
    (needed.saturating_sub(in_size)) / 2
}

fn im2col(x: &Act, kernel: usize, stride: usize, oh: usize, ow: usize) -> Array2<f64> {
    let pad_top = same_padding(x.h, oh, kernel, stride);
    let pad_left = same_padding(x.w, ow, kernel, stride);
    let row_len = kernel * kernel * x.c;
    let mut cols = vec![0.0; x.n * oh * ow * row_len];
    let mut row = 0usize;
    for n in 0..x.n {
        for oy in 0..oh {
            let ih0 = (oy * stride) as isize - pad_top as isize;
            for ox in 0..ow {
                let iw0 = (ox * stride) as isize - pad_left as isize;
                let base = row * row_len;
                for kh in 0..kernel {
                    let ih = ih0 + kh as isize;
                    if ih < 0 || ih >= x.h as isize {
                        continue; // stays zero
                    }
                    for kw in 0..kernel {
                        let iw = iw0 + kw as isize;
                        if iw < 0 || iw >= x.w as isize {
                            continue;
                        }
                        let src = x.index(n, ih as usize, iw as usize, 0);
                        let dst = base + (kh * kernel + kw) * x.c;
                        cols[dst..dst + x.c].copy_from_slice(&x.data[src..src + x.c]);
                    }
                }
                row += 1;
            }
        }
    }
    Array2::from_shape_vec((x.n * oh * ow, row_len), cols).expect("cols dims")
}

fn col2im(dcols: &Array2<f64>, kernel: usize, stride: usize, oh: usize, ow: usize, dims: (usize, usize, usize, usize)) -> Act {
    let (n_total, h, w, c) = dims;
    let mut dx = Act::zeros(n_total, h, w, c);
    let pad_top = same_padding(h, oh, kernel, stride);
    let pad_left = same_padding(w, ow, kernel, stride);
    let row_len = kernel * kernel * c;
    let data = dcols.as_slice().expect("contiguous dcols");
    let mut row = 0usize;
    for n in 0..n_total {
        for oy in 0..oh {
            let ih0 = (oy * stride) as isize - pad_top as isize;
            for ox in 0..ow {
                let iw0 = (ox * stride) as isize - pad_left as isize;
                let base = row * row_len;
                for kh in 0..kernel {
                    let ih = ih0 + kh as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..kernel {
                        let iw = iw0 + kw as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let dst = dx.index(n, ih as usize, iw as usize, 0);
                        let src = base + (kh * kernel + kw) * c;
                        for cc in 0..c {
                            dx.data[dst + cc] += data[src + cc];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

fn conv_bn_relu_forward(
    x: &Act,
    params: &mut ConvParams,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    training: bool,
) -> (Act, ConvCache) {
    let cols = im2col(x, kernel, stride, oh, ow);
    let mut z = cols.dot(&params.weight.t()); // (n*oh*ow, c_out)
    let c_out = params.bias.len();
    for mut row in z.rows_mut() {
        for (v, b) in row.iter_mut().zip(params.bias.iter()) {
            *v += b;
        }
    }

    let rows = z.nrows();
    let zs = z.as_slice_mut().expect("contiguous");
    let count = rows as f64;

    // Per-channel statistics over (batch, spatial).
    let mut mean = vec![0.0; c_out];
    let mut var = vec![0.0; c_out];
    if training {
        for r in 0..rows {
            for c in 0..c_out {
                mean[c] += zs[r * c_out + c];
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for r in 0..rows {
            for c in 0..c_out {
                let d = zs[r * c_out + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= count;
        }
        for c in 0..c_out {
            params.running_mean[c] =
                BN_MOMENTUM * params.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
            params.running_var[c] =
                BN_MOMENTUM * params.running_var[c] + (1.0 - BN_MOMENTUM) * var[c];
        }
    } else {
        for c in 0..c_out {
            mean[c] = params.running_mean[c];
            var[c] = params.running_var[c];
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = vec![0.0; rows * c_out];
    let mut out = Act::zeros(x.n, oh, ow, c_out);
    let mut relu_mask = vec![false; rows * c_out];
    for r in 0..rows {
        for c in 0..c_out {
            let i = r * c_out + c;
            let xh = (zs[i] - mean[c]) * inv_std[c];
            x_hat[i] = xh;
            let y = params.gamma[c] * xh + params.beta[c];
            if y > 0.0 {
                out.data[i] = y;
                relu_mask[i] = true;
            }
        }
    }

    (
        out,
        ConvCache {
            cols,
            x_hat,
            inv_std,
            relu_mask,
            in_dims: (x.n, x.h, x.w, x.c),
        },
    )
}

fn conv_bn_relu_backward(
    dout: &Act,
    params: &ConvParams,
    cache: &ConvCache,
    kernel: usize,
    stride: usize,
    want_dx: bool,
) -> (Array2<f64>, Array1<f64>, Array1<f64>, Array1<f64>, Option<Act>) {
    let c_out = params.bias.len();
    let rows = dout.data.len() / c_out;
    let count = rows as f64;

    // Through the rectifier.
    let mut dy = vec![0.0; rows * c_out];
    for i in 0..dy.len() {
        if cache.relu_mask[i] {
            dy[i] = dout.data[i];
        }
    }

    // Batch-norm backward (training-mode statistics).
    let mut dgamma = Array1::zeros(c_out);
    let mut dbeta = Array1::zeros(c_out);
    let mut sum_dxhat = vec![0.0; c_out];
    let mut sum_dxhat_xhat = vec![0.0; c_out];
    for r in 0..rows {
        for c in 0..c_out {
            let i = r * c_out + c;
            let d = dy[i];
            dgamma[c] += d * cache.x_hat[i];
            dbeta[c] += d;
            let dxh = d * params.gamma[c];
            sum_dxhat[c] += dxh;
            sum_dxhat_xhat[c] += dxh * cache.x_hat[i];
        }
    }
    let mut dz = Array2::zeros((rows, c_out));
    {
        let dzs = dz.as_slice_mut().expect("contiguous");
        for r in 0..rows {
            for c in 0..c_out {
                let i = r * c_out + c;
                let dxh = dy[i] * params.gamma[c];
                dzs[i] = cache.inv_std[c] / count
                    * (count * dxh - sum_dxhat[c] - cache.x_hat[i] * sum_dxhat_xhat[c]);
            }
        }
    }

    let dw = dz.t().dot(&cache.cols);
    let db = dz.sum_axis(ndarray::Axis(0));
    let dx = want_dx.then(|| {
        let dcols = dz.dot(&params.weight);
        col2im(&dcols, kernel, stride, dout.h, dout.w, cache.in_dims)
    });
    (dw, db, dgamma, dbeta, dx)
}

/// 2x2 stride-2 max pooling with ceil-mode windows (partial windows at the
/// edges take the max of the cells that exist). Ties resolve to the first
/// cell in scan order.
fn maxpool_forward(x: &Act, oh: usize, ow: usize) -> (Act, Vec<usize>) {
    let mut out = Act::zeros(x.n, oh, ow, x.c);
    let mut argmax = vec![0usize; out.data.len()];
    for n in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..x.c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kh in 0..2 {
                        let ih = oy * 2 + kh;
                        if ih >= x.h {
                            continue;
                        }
                        for kw in 0..2 {
                            let iw = ox * 2 + kw;
                            if iw >= x.w {
                                continue;
                            }
                            let idx = x.index(n, ih, iw, c);
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = out.index(n, oy, ox, c);
                    out.data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

fn maxpool_backward(dout: &Act, argmax: &[usize], dims: (usize, usize, usize, usize)) -> Act {
    let mut dx = Act::zeros(dims.0, dims.1, dims.2, dims.3);
    for (o, &src) in argmax.iter().enumerate() {
        dx.data[src] += dout.data[o];
    }
    dx
}

/// Channel concatenation; the first input's channels come first.
fn concat_forward(a: &Act, b: &Act) -> Act {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut out = Act::zeros(a.n, a.h, a.w, a.c + b.c);
    let pixels = a.n * a.h * a.w;
    for p in 0..pixels {
        let dst = p * out.c;
        out.data[dst..dst + a.c].copy_from_slice(&a.data[p * a.c..(p + 1) * a.c]);
        out.data[dst + a.c..dst + a.c + b.c].copy_from_slice(&b.data[p * b.c..(p + 1) * b.c]);
    }
    out
}

fn concat_backward(
    dout: &Act,
    a_dims: (usize, usize, usize, usize),
    b_dims: (usize, usize, usize, usize),
) -> (Act, Act) {
    let mut da = Act::zeros(a_dims.0, a_dims.1, a_dims.2, a_dims.3);
    let mut db = Act::zeros(b_dims.0, b_dims.1, b_dims.2, b_dims.3);
    let (ac, bc) = (a_dims.3, b_dims.3);
    let pixels = dout.n * dout.h * dout.w;
    for p in 0..pixels {
        let src = p * dout.c;
        da.data[p * ac..(p + 1) * ac].copy_from_slice(&dout.data[src..src + ac]);
        db.data[p * bc..(p + 1) * bc].copy_from_slice(&dout.data[src + ac..src + ac + bc]);
    }
    (da, db)
}

/// Global average pooling to (n, 1, 1, c).
fn global_pool_forward(x: &Act) -> Act {
    let mut out = Act::zeros(x.n, 1, 1, x.c);
    let area = (x.h * x.w) as f64;
    for n in 0..x.n {
        for h in 0..x.h {
            for w in 0..x.w {
                let src = x.index(n, h, w, 0);
                let dst = n * x.c;
                for c in 0..x.c {
                    out.data[dst + c] += x.data[src + c];
                }
            }
        }
    }
    for v in out.data.iter_mut() {
        *v /= area;
    }
    out
}

fn global_pool_backward(dout: &Act, dims: (usize, usize, usize, usize)) -> Act {
    let (n_total, h, w, c) = dims;
    let mut dx = Act::zeros(n_total, h, w, c);
    let scale = 1.0 / (h * w) as f64;
    for n in 0..n_total {
        let src = n * c;
        for hh in 0..h {
            for ww in 0..w {
                let dst = dx.index(n, hh, ww, 0);
                for cc in 0..c {
                    dx.data[dst + cc] = dout.data[src + cc] * scale;
                }
            }
        }
    }
    dx
}

fn update2(
    w: &mut Array2<f64>,
    v: &mut Array2<f64>,
    g: &Array2<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    ndarray::Zip::from(w).and(v).and(g).for_each(|w, v, g| {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    });
}

fn update1(
    w: &mut Array1<f64>,
    v: &mut Array1<f64>,
    g: &Array1<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    ndarray::Zip::from(w).and(v).and(g).for_each(|w, v, g| {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    });
}
