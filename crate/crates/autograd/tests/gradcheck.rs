use d2m_autograd::nn::{BatchNorm1d, Conv1d, Conv1dConfig, ConvTranspose1d};
use d2m_autograd::{finite_difference, Builder, ConvGeom, Graph, ParamStore, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `loss = sum(op(x) * probe)` so every output element matters.
fn check(shape: &[usize], seed: u64, op: impl Fn(&mut Graph, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random(shape, &mut rng);
    let probe_shape = {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = op(&mut g, x);
        g.shape(y).to_vec()
    };
    let probe = random(&probe_shape, &mut rng);
    let eval = |x: &Tensor, with_grad: bool| {
        let mut g = Graph::new();
        let xv = if with_grad { g.variable(x.clone()) } else { g.constant(x.clone()) };
        let y = op(&mut g, xv);
        let p = g.constant(probe.clone());
        let m = g.mul(y, p);
        let loss = g.sum(m);
        let value = g.scalar(loss);
        let grad = with_grad.then(|| g.backward(loss).wrt(xv).cloned().unwrap());
        (value, grad)
    };
    let (_, grad) = eval(&x0, true);
    let grad = grad.unwrap();
    let coords: Vec<usize> = (0..x0.len()).step_by(1 + x0.len() / 40).collect();
    let fd = finite_difference(&x0, &coords, 1e-6, |x| eval(x, false).0);
    for (&i, f) in coords.iter().zip(fd) {
        let a = grad.as_slice().unwrap()[i];
        assert!(
            (a - f).abs() <= 1e-6 * (1.0 + a.abs().max(f.abs())),
            "coord {i}: analytic {a} vs numeric {f}"
        );
    }
}

#[test]
fn elementwise_ops() {
    check(&[2, 3, 5], 1, |g, x| g.tanh(x));
    check(&[2, 3, 5], 2, |g, x| g.leaky_relu(x, 0.2));
    check(&[2, 3, 5], 3, |g, x| g.scaled_tanh(x, 7.0));
    check(&[2, 3, 5], 4, |g, x| g.square(x));
    check(&[2, 3, 5], 5, |g, x| {
        let s = g.scale(x, 3.0);
        let t = g.add_scalar(s, 0.5);
        g.abs(t)
    });
    check(&[2, 3, 5], 6, |g, x| {
        let a = g.tanh(x);
        let b = g.mul(a, x);
        let c = g.sub(b, x);
        g.add(c, a)
    });
    check(&[4, 2, 3], 7, |g, x| {
        let r = g.relu(x);
        g.mean(r)
    });
}

#[test]
fn conv_with_groups_dilation_and_asymmetric_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let conv = Conv1d::new(
        &mut Builder::new(&mut store, &mut rng, "c"),
        4,
        6,
        5,
        Conv1dConfig {
            stride: 2,
            dilation: 2,
            pad_left: 5,
            pad_right: 2,
            groups: 2,
            bias: true,
        },
    );
    check(&[2, 4, 17], 12, |g, x| conv.forward(g, &store, x));
}

#[test]
fn conv_weight_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[2, 3, 13], &mut rng);
    let w0 = random(&[4, 3, 3], &mut rng);
    let geom = ConvGeom {
        stride: 3,
        pad_left: 1,
        pad_right: 1,
        ..ConvGeom::new(3)
    };
    let eval = |w: &Tensor, with_grad: bool| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = if with_grad { g.variable(w.clone()) } else { g.constant(w.clone()) };
        let y = g.conv1d(xv, wv, None, geom);
        let t = g.tanh(y);
        let loss = g.sum(t);
        (g.scalar(loss), with_grad.then(|| g.backward(loss).wrt(wv).cloned().unwrap()))
    };
    let grad = eval(&w0, true).1.unwrap();
    let coords: Vec<usize> = (0..w0.len()).collect();
    let fd = finite_difference(&w0, &coords, 1e-6, |w| eval(w, false).0);
    for (&i, f) in coords.iter().zip(fd) {
        let a = grad.as_slice().unwrap()[i];
        assert!((a - f).abs() < 1e-6 * (1.0 + a.abs()), "w[{i}] {a} vs {f}");
    }
}

#[test]
fn transposed_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let conv = ConvTranspose1d::new(
        &mut Builder::new(&mut store, &mut rng, "t"),
        3,
        2,
        8,
        Conv1dConfig {
            stride: 4,
            pad_left: 2,
            pad_right: 2,
            ..Conv1dConfig::default()
        },
    );
    check(&[2, 3, 6], 32, |g, x| conv.forward(g, &store, x));
}

#[test]
fn batch_norm_training_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut store = ParamStore::new();
    let bn = BatchNorm1d::new(&mut Builder::new(&mut store, &mut rng, "bn"), 3);
    // check() builds inference graphs; this probe needs batch statistics.
    let x0 = random(&[2, 3, 7], &mut rng);
    let probe = random(&[2, 3, 7], &mut rng);
    let eval = |x: &Tensor, with_grad: bool| {
        let mut g = Graph::training();
        let xv = if with_grad { g.variable(x.clone()) } else { g.constant(x.clone()) };
        let y = bn.forward(&mut g, &store, xv);
        let p = g.constant(probe.clone());
        let m = g.mul(y, p);
        let t = g.tanh(m);
        let loss = g.sum(t);
        (g.scalar(loss), with_grad.then(|| g.backward(loss).wrt(xv).cloned().unwrap()))
    };
    let grad = eval(&x0, true).1.unwrap();
    let coords: Vec<usize> = (0..x0.len()).collect();
    let fd = finite_difference(&x0, &coords, 1e-6, |x| eval(x, false).0);
    for (&i, f) in coords.iter().zip(fd) {
        let a = grad.as_slice().unwrap()[i];
        assert!((a - f).abs() < 1e-6 * (1.0 + a.abs()), "x[{i}] {a} vs {f}");
    }
}

#[test]
fn structural_ops() {
    check(&[2, 3, 10], 51, |g, x| g.avg_pool1d(x, 4, 2, 1));
    check(&[2, 3, 10], 52, |g, x| g.flatten_time_major(x));
    check(&[2, 3, 10], 53, |g, x| g.narrow_time(x, 2, 5));
    check(&[2, 3, 4], 54, |g, x| g.gather_time(x, vec![0, 0, 1, 3, 3, 3, 2]));
    check(&[2, 3, 4], 55, |g, x| {
        let t = g.tanh(x);
        g.concat_channels(&[x, t, x])
    });
}

#[test]
fn flatten_index_map() {
    let mut g = Graph::new();
    let x = ArrayD::from_shape_fn(IxDyn(&[1, 3, 4]), |ix| (ix[1] * 10 + ix[2]) as f64);
    let xv = g.constant(x);
    let y = g.flatten_time_major(xv);
    let flat: Vec<f64> = g.value(y).iter().copied().collect();
    for t in 0..4 {
        for d in 0..3 {
            assert_eq!(flat[3 * t + d], (d * 10 + t) as f64);
        }
    }
}

#[test]
fn avg_pool_halves_length() {
    for len in [5usize, 7, 8, 22016] {
        let mut g = Graph::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 1, len])));
        let y = g.avg_pool1d(x, 4, 2, 1);
        assert_eq!(g.shape(y)[2], len / 2);
    }
}

#[test]
fn scaled_tanh_is_strictly_bounded() {
    let mut g = Graph::new();
    let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 3]), vec![1e6, -1e6, 0.0]).unwrap());
    let y = g.scaled_tanh(x, 100.0);
    let v: Vec<f64> = g.value(y).iter().copied().collect();
    assert!(v[0] < 100.0 && v[1] > -100.0);
    assert_eq!(v[2], 0.0);
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut frozen = ParamStore::new();
    let mut live = ParamStore::new();
    let a = Conv1d::new(&mut Builder::new(&mut frozen, &mut rng, "a"), 1, 2, 3, Conv1dConfig::same(3, 1, 1));
    let b = Conv1d::new(&mut Builder::new(&mut live, &mut rng, "b"), 2, 1, 3, Conv1dConfig::same(3, 1, 1));
    let mut g = Graph::new();
    g.train_store(&live);
    let x = g.constant(random(&[1, 1, 9], &mut rng));
    let h = a.forward(&mut g, &frozen, x);
    let y = b.forward(&mut g, &live, h);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert!(grads.for_store(&frozen).is_empty());
    assert_eq!(grads.for_store(&live).len(), 2);
}
