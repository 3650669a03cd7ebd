use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn, Zip};

use crate::conv::{self, ConvDims, ConvGeom};
use crate::store::{ParamId, ParamStore};

pub type Tensor = ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Escape hatch for fused operations with a hand-written adjoint.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// Returns one gradient per input; entries whose `needs` flag is false
    /// may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    ScaledTanh(Var, f64),
    Mean(Var),
    Sum(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        batch_stats: bool,
    },
    Concat(Vec<Var>),
    GatherTime {
        x: Var,
        index: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    FlattenTimeMajor(Var),
    NarrowTime {
        x: Var,
        start: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Rc<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for the backward sweep.
pub struct Graph {
    nodes: Vec<Node>,
    trainable: HashSet<u32>,
    params: HashMap<ParamId, Var>,
    training: bool,
    updates: Vec<(ParamId, Tensor)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [batch, channels, time], got {s:?}");
    (s[0], s[1], s[2])
}

fn slice(t: &Tensor) -> &[f64] {
    t.as_slice().expect("tensors are kept in standard layout")
}

fn slice_mut(t: &mut Tensor) -> &mut [f64] {
    t.as_slice_mut().expect("tensors are kept in standard layout")
}

impl Graph {
    /// Inference graph: batch statistics off, nothing trainable.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            trainable: HashSet::new(),
            params: HashMap::new(),
            training: false,
            updates: Vec::new(),
        }
    }

    /// Graph in training mode (batch-norm uses batch statistics and records
    /// running-statistic updates).
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Parameters of `store` will receive gradients.
    pub fn train_store(&mut self, store: &ParamStore) {
        self.trainable.insert(store.store_id());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar");
        t.iter().copied().next().unwrap()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that always receives a gradient; used by tests and probes.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored tensor. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.trainable.contains(&store.store_id())
            && store.kind(id) == crate::store::Kind::Trainable;
        let v = self.push(store.get(id).clone(), Op::Param, rg);
        self.params.insert(id, v);
        v
    }

    /// Running-statistic updates recorded by batch-norm in training mode.
    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) + s;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// `scale * tanh(x)`, kept strictly inside the open interval
    /// `(-scale, scale)` even where `tanh` rounds to ±1.
    pub fn scaled_tanh(&mut self, a: Var, scale: f64) -> Var {
        assert!(scale > 0.0);
        let edge = scale.next_down();
        let v = self
            .value(a)
            .mapv(|x| (scale * x.tanh()).clamp(-edge, edge));
        let rg = self.rg(a);
        self.push(v, Op::ScaledTanh(a, scale), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a), rg)
    }

    /// 1-D convolution on `[B, C_in, T]` with weight `[C_out, C_in/groups, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (batch, c_in, len_in) = dims3(self.value(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[2], geom.kernel, "kernel mismatch");
        assert_eq!(c_in % geom.groups, 0);
        assert_eq!(ws[0] % geom.groups, 0);
        assert_eq!(ws[1] * geom.groups, c_in, "conv input channel mismatch");
        let dims = ConvDims {
            batch,
            c_in,
            c_out: ws[0],
            len_in,
            len_out: geom.out_len(len_in),
        };
        assert!(dims.len_out > 0, "input too short for convolution");
        let mut out = Tensor::zeros(IxDyn(&[batch, dims.c_out, dims.len_out]));
        conv::conv1d_forward(
            slice(self.value(x)),
            slice(self.value(w)),
            b.map(|b| slice(self.value(b))),
            dims,
            &geom,
            slice_mut(&mut out),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv1d { x, w, b, geom }, rg)
    }

    /// Transposed convolution with weight `[C_in, C_out/groups, K]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (batch, c_in, len_in) = dims3(self.value(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[0], c_in, "transposed conv input channel mismatch");
        assert_eq!(ws[2], geom.kernel);
        let dims = ConvDims {
            batch,
            c_in,
            c_out: ws[1] * geom.groups,
            len_in,
            len_out: geom.transposed_out_len(len_in),
        };
        let mut out = Tensor::zeros(IxDyn(&[batch, dims.c_out, dims.len_out]));
        conv::conv_transpose1d_forward(
            slice(self.value(x)),
            slice(self.value(w)),
            b.map(|b| slice(self.value(b))),
            dims,
            &geom,
            slice_mut(&mut out),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::ConvTranspose1d { x, w, b, geom }, rg)
    }

    /// Batch normalization over the batch and time axes of `[B, C, T]`.
    ///
    /// In training mode batch statistics are used and the running-statistic
    /// update is queued (see [`Graph::take_updates`]); otherwise the stored
    /// running statistics are applied.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> Var {
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let (batch, ch, len) = dims3(self.value(x));
        let n = (batch * len) as f64;
        let xs = slice(self.value(x));
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for b in 0..batch {
                for c in 0..ch {
                    mean[c] += xs[(b * ch + c) * len..][..len].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for b in 0..batch {
                for c in 0..ch {
                    var[c] += xs[(b * ch + c) * len..][..len]
                        .iter()
                        .map(|v| (v - mean[c]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            let rm = store.get(running_mean);
            let rv = store.get(running_var);
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let new_rm: Tensor = rm
                .iter()
                .zip(&mean)
                .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
                .collect::<ndarray::Array1<f64>>()
                .into_dyn();
            let new_rv: Tensor = rv
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - momentum) * r + momentum * v * unbias)
                .collect::<ndarray::Array1<f64>>()
                .into_dyn();
            self.updates.push((running_mean, new_rm));
            self.updates.push((running_var, new_rv));
            (mean, var)
        } else {
            (
                store.get(running_mean).iter().copied().collect(),
                store.get(running_var).iter().copied().collect(),
            )
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = slice(self.value(gv)).to_vec();
        let be = slice(self.value(bv)).to_vec();
        let mut out = Tensor::zeros(IxDyn(&[batch, ch, len]));
        let os = slice_mut(&mut out);
        let xs = slice(self.value(x));
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * len;
                for t in 0..len {
                    os[off + t] = g[c] * (xs[off + t] - mean[c]) * invstd[c] + be[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gv) || self.rg(bv);
        let batch_stats = self.training;
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma: gv,
                beta: bv,
                mean,
                invstd,
                batch_stats,
            },
            rg,
        )
    }

    /// Concatenates `[B, C_i, T]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (batch, _, len) = dims3(self.value(parts[0]));
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(IxDyn(&[batch, total, len]));
        let os = slice_mut(&mut out);
        let mut c0 = 0;
        for &p in parts {
            let (pb, pc, pl) = dims3(self.value(p));
            assert_eq!((pb, pl), (batch, len), "concat batch/time mismatch");
            let ps = slice(self.value(p));
            for b in 0..batch {
                os[(b * total + c0) * len..][..pc * len]
                    .copy_from_slice(&ps[b * pc * len..(b + 1) * pc * len]);
            }
            c0 += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// `out[.., t] = x[.., index[t]]` along the time axis of `[B, C, T]`.
    pub fn gather_time(&mut self, x: Var, index: Vec<usize>) -> Var {
        let (batch, ch, len) = dims3(self.value(x));
        assert!(index.iter().all(|&i| i < len), "gather index out of range");
        let out_len = index.len();
        let mut out = Tensor::zeros(IxDyn(&[batch, ch, out_len]));
        let os = slice_mut(&mut out);
        let xs = slice(self.value(x));
        for row in 0..batch * ch {
            for (t, &i) in index.iter().enumerate() {
                os[row * out_len + t] = xs[row * len + i];
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::GatherTime { x, index }, rg)
    }

    /// Average pooling along time with zero padding excluded from the count.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (batch, ch, len) = dims3(self.value(x));
        assert!(len + 2 * pad >= kernel, "input too short for pooling");
        let out_len = (len + 2 * pad - kernel) / stride + 1;
        let mut out = Tensor::zeros(IxDyn(&[batch, ch, out_len]));
        let os = slice_mut(&mut out);
        let xs = slice(self.value(x));
        for row in 0..batch * ch {
            for t in 0..out_len {
                let (lo, hi) = pool_window(t, kernel, stride, pad, len);
                let s: f64 = xs[row * len + lo..row * len + hi].iter().sum();
                os[row * out_len + t] = s / (hi - lo) as f64;
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::AvgPool {
                x,
                kernel,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `[B, C, T] -> [B, 1, C*T]`, position `C*t + c` holding `x[c, t]`.
    pub fn flatten_time_major(&mut self, x: Var) -> Var {
        let (batch, ch, len) = dims3(self.value(x));
        let mut out = Tensor::zeros(IxDyn(&[batch, 1, ch * len]));
        let os = slice_mut(&mut out);
        let xs = slice(self.value(x));
        for b in 0..batch {
            for c in 0..ch {
                for t in 0..len {
                    os[b * ch * len + t * ch + c] = xs[(b * ch + c) * len + t];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::FlattenTimeMajor(x), rg)
    }

    /// Contiguous time window `[start, start + len)` of `[B, C, T]`.
    pub fn narrow_time(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (batch, ch, full) = dims3(self.value(x));
        assert!(start + len <= full, "narrow out of range");
        let mut out = Tensor::zeros(IxDyn(&[batch, ch, len]));
        let os = slice_mut(&mut out);
        let xs = slice(self.value(x));
        for row in 0..batch * ch {
            os[row * len..(row + 1) * len].copy_from_slice(&xs[row * full + start..][..len]);
        }
        let rg = self.rg(x);
        self.push(out, Op::NarrowTime { x, start }, rg)
    }

    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var]) -> Var {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals);
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_elem(self.value(loss).raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        Grads { grads, params }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    *d *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(*a, d);
            }
            Op::Square(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= 2.0 * x);
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::ScaledTanh(a, s) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let t = x.tanh();
                    *d *= s * (1.0 - t * t)
                });
                acc(*a, d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gs = g.iter().next().copied().unwrap();
                acc(*a, Tensor::from_elem(self.value(*a).raw_dim(), gs / n));
            }
            Op::Sum(a) => {
                let gs = g.iter().next().copied().unwrap();
                acc(*a, Tensor::from_elem(self.value(*a).raw_dim(), gs));
            }
            Op::Conv1d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, c_in, len_in) = dims3(xv);
                let dims = ConvDims {
                    batch,
                    c_in,
                    c_out: wv.shape()[0],
                    len_in,
                    len_out: g.shape()[2],
                };
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.raw_dim()));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(wv.raw_dim()));
                let mut db = b
                    .filter(|b| self.rg(*b))
                    .map(|b| Tensor::zeros(self.value(b).raw_dim()));
                conv::conv1d_backward(
                    slice(xv),
                    slice(wv),
                    slice(g),
                    dims,
                    geom,
                    dx.as_mut().map(slice_mut),
                    dw.as_mut().map(slice_mut),
                    db.as_mut().map(slice_mut),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose1d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, c_in, len_in) = dims3(xv);
                let dims = ConvDims {
                    batch,
                    c_in,
                    c_out: g.shape()[1],
                    len_in,
                    len_out: g.shape()[2],
                };
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.raw_dim()));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(wv.raw_dim()));
                let mut db = b
                    .filter(|b| self.rg(*b))
                    .map(|b| Tensor::zeros(self.value(b).raw_dim()));
                conv::conv_transpose1d_backward(
                    slice(xv),
                    slice(wv),
                    slice(g),
                    dims,
                    geom,
                    dx.as_mut().map(slice_mut),
                    dw.as_mut().map(slice_mut),
                    db.as_mut().map(slice_mut),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            } => {
                let xs = slice(self.value(*x));
                let gs = slice(g);
                let gam = slice(self.value(*gamma));
                let (batch, ch, len) = dims3(self.value(*x));
                let n = (batch * len) as f64;
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * len;
                        for t in 0..len {
                            let xhat = (xs[off + t] - mean[c]) * invstd[c];
                            dgamma[c] += gs[off + t] * xhat;
                            dbeta[c] += gs[off + t];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).raw_dim());
                    let ds = slice_mut(&mut dx);
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * len;
                            for t in 0..len {
                                ds[off + t] = if *batch_stats {
                                    let xhat = (xs[off + t] - mean[c]) * invstd[c];
                                    gam[c] * invstd[c] / n
                                        * (n * gs[off + t] - dbeta[c] - xhat * dgamma[c])
                                } else {
                                    gam[c] * invstd[c] * gs[off + t]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, ndarray::Array1::from(dgamma).into_dyn());
                acc(*beta, ndarray::Array1::from(dbeta).into_dyn());
            }
            Op::Concat(parts) => {
                let (batch, total, len) = dims3(g);
                let gs = slice(g);
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Tensor::zeros(IxDyn(&[batch, pc, len]));
                        let ds = slice_mut(&mut d);
                        for b in 0..batch {
                            ds[b * pc * len..(b + 1) * pc * len]
                                .copy_from_slice(&gs[(b * total + c0) * len..][..pc * len]);
                        }
                        acc(p, d);
                    }
                    c0 += pc;
                }
            }
            Op::GatherTime { x, index } => {
                let (batch, ch, len) = dims3(self.value(*x));
                let out_len = index.len();
                let gs = slice(g);
                let mut d = Tensor::zeros(IxDyn(&[batch, ch, len]));
                let ds = slice_mut(&mut d);
                for row in 0..batch * ch {
                    for (t, &i) in index.iter().enumerate() {
                        ds[row * len + i] += gs[row * out_len + t];
                    }
                }
                acc(*x, d);
            }
            Op::AvgPool {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (batch, ch, len) = dims3(self.value(*x));
                let out_len = g.shape()[2];
                let gs = slice(g);
                let mut d = Tensor::zeros(IxDyn(&[batch, ch, len]));
                let ds = slice_mut(&mut d);
                for row in 0..batch * ch {
                    for t in 0..out_len {
                        let (lo, hi) = pool_window(t, *kernel, *stride, *pad, len);
                        let share = gs[row * out_len + t] / (hi - lo) as f64;
                        for v in &mut ds[row * len + lo..row * len + hi] {
                            *v += share;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::FlattenTimeMajor(x) => {
                let (batch, ch, len) = dims3(self.value(*x));
                let gs = slice(g);
                let mut d = Tensor::zeros(IxDyn(&[batch, ch, len]));
                let ds = slice_mut(&mut d);
                for b in 0..batch {
                    for c in 0..ch {
                        for t in 0..len {
                            ds[(b * ch + c) * len + t] = gs[b * ch * len + t * ch + c];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::NarrowTime { x, start } => {
                let (batch, ch, full) = dims3(self.value(*x));
                let len = g.shape()[2];
                let gs = slice(g);
                let mut d = Tensor::zeros(IxDyn(&[batch, ch, full]));
                let ds = slice_mut(&mut d);
                for row in 0..batch * ch {
                    ds[row * full + start..][..len].copy_from_slice(&gs[row * len..(row + 1) * len]);
                }
                acc(*x, d);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let out = op.backward(&vals, &node.value, g, &needs);
                assert_eq!(out.len(), inputs.len(), "{} returned wrong arity", op.name());
                for ((&v, d), need) in inputs.iter().zip(out).zip(needs) {
                    if let (Some(d), true) = (d, need) {
                        acc(v, d);
                    }
                }
            }
        }
    }
}

fn pool_window(t: usize, kernel: usize, stride: usize, pad: usize, len: usize) -> (usize, usize) {
    let start = (t * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + kernel as isize) as usize).min(len);
    debug_assert!(hi > lo, "pooling window entirely in padding");
    (lo, hi)
}

/// Result of a backward sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Gradients for every parameter of `store` that took part in the graph.
    pub fn for_store(&self, store: &ParamStore) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<(ParamId, &Tensor)> = self
            .params
            .iter()
            .filter(|(p, _)| p.store == store.store_id())
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}
