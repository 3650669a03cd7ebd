//! Building blocks shared by the codec and the generator networks.

use d2m_autograd::nn::{BatchNorm1d, Conv1d, Conv1dConfig};
use d2m_autograd::{Builder, Graph, ParamStore, Tensor, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

/// Negative slope of every leaky activation.
pub const LEAK: f64 = 0.2;

/// `x + pointwise(leaky(dilated(leaky(x))))` for each dilation in turn.
#[derive(Debug, Clone)]
pub struct ResidualStack {
    blocks: Vec<(Conv1d, Conv1d)>,
}

impl ResidualStack {
    pub fn new<R: Rng>(vb: &mut Builder<'_, R>, channels: usize, dilations: &[usize]) -> Self {
        let blocks = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut b = vb.pp(&format!("block{i}"));
                let dilated = Conv1d::new(&mut b.pp("dilated"), channels, channels, 3, Conv1dConfig::same(3, 1, d));
                let pointwise = Conv1d::new(&mut b.pp("pointwise"), channels, channels, 1, Conv1dConfig::default());
                (dilated, pointwise)
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, mut x: Var) -> Var {
        for (dilated, pointwise) in &self.blocks {
            let h = g.leaky_relu(x, LEAK);
            let h = dilated.forward(g, p, h);
            let h = g.leaky_relu(h, LEAK);
            let h = pointwise.forward(g, p, h);
            x = g.add(x, h);
        }
        x
    }
}

/// Conv, optional batch norm, leaky activation.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv1d,
    pub norm: Option<BatchNorm1d>,
    pub activate: bool,
}

impl ConvUnit {
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let mut h = self.conv.forward(g, p, x);
        if let Some(bn) = &self.norm {
            h = bn.forward(g, p, h);
        }
        if self.activate {
            h = g.leaky_relu(h, LEAK);
        }
        h
    }
}

/// Stacks `[C, T]` matrices into a `[B, C, T]` tensor.
pub fn batch_tensor(items: &[&Array2<f64>]) -> Tensor {
    let (c, t) = items[0].dim();
    let mut data = Vec::with_capacity(items.len() * c * t);
    for m in items {
        assert_eq!(m.dim(), (c, t), "batch items differ in shape");
        data.extend(m.iter());
    }
    ArrayD::from_shape_vec(IxDyn(&[items.len(), c, t]), data).unwrap()
}

/// Stacks equal-length sample vectors into `[B, 1, L]`.
pub fn signal_tensor(items: &[&[f64]]) -> Tensor {
    let len = items[0].len();
    let mut data = Vec::with_capacity(items.len() * len);
    for s in items {
        assert_eq!(s.len(), len, "batch signals differ in length");
        data.extend_from_slice(s);
    }
    ArrayD::from_shape_vec(IxDyn(&[items.len(), 1, len]), data).unwrap()
}

/// Item `b` of a `[B, C, T]` tensor as a `[C, T]` matrix.
pub fn batch_item(t: &Tensor, b: usize) -> Array2<f64> {
    let s = t.shape();
    let (c, len) = (s[1], s[2]);
    let flat = t.as_slice().expect("standard layout");
    Array2::from_shape_vec((c, len), flat[b * c * len..(b + 1) * c * len].to_vec()).unwrap()
}

/// Applies the queued batch-norm running-statistic updates that belong to
/// `store`; updates for other stores are dropped.
pub fn apply_updates(store: &mut ParamStore, g: &mut Graph) {
    for (id, value) in g.take_updates() {
        if store.owns(id) {
            *store.get_mut(id) = value;
        }
    }
}
