use super::*;
use ndarray::Array4;
use rand::Rng;

fn rand_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

/// Central finite differences of `sum(net(x) * probe)` against the analytic
/// gradients, for the input and every trainable parameter.
fn check_grads(specs: Vec<NamedSpec>, shape: (usize, usize, usize, usize), tol: f64) {
    let mut net = Sequential::from_specs(&specs, 11).unwrap();
    let x = rand_tensor(shape, 5);
    let y = net.forward_train(&x);
    let probe = rand_tensor(y.dim(), 6);
    net.zero_grad();
    let dx = net.backward(&probe);

    let objective = |net: &mut Sequential, x: &Tensor| -> f64 {
        let y = net.forward_train(x);
        net.clear_cache();
        (&y * &probe).sum()
    };
    let h = 1e-6;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);

    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[i] += h;
        xm.as_slice_mut().unwrap()[i] -= h;
        let fd = (objective(&mut net, &xp) - objective(&mut net, &xm)) / (2.0 * h);
        let an = dx.as_slice().unwrap()[i];
        assert!(rel(fd, an) < tol, "input grad {i}: fd {fd} vs analytic {an}");
    }

    let analytic: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| p.grad.iter().cloned().collect())
        .collect();
    let n_params = net.params().len();
    for pi in 0..n_params {
        if !net.params()[pi].trainable {
            continue;
        }
        let len = net.params()[pi].len();
        for j in 0..len {
            let orig = net.params()[pi].value.as_slice().unwrap()[j];
            net.params_mut()[pi].value.as_slice_mut().unwrap()[j] = orig + h;
            let fp = objective(&mut net, &x);
            net.params_mut()[pi].value.as_slice_mut().unwrap()[j] = orig - h;
            let fm = objective(&mut net, &x);
            net.params_mut()[pi].value.as_slice_mut().unwrap()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[pi][j];
            assert!(rel(fd, an) < tol, "param {pi}[{j}]: fd {fd} vs analytic {an}");
        }
    }
}

fn conv(name: &str, ci: usize, co: usize, k: usize, s: usize, p: usize, mode: PadMode) -> NamedSpec {
    NamedSpec::new(
        name,
        LayerSpec::Conv2d {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride: s,
            padding: p,
            pad_mode: mode,
            bias: true,
            init: Init::He,
        },
    )
}

#[test]
fn conv_gradients_all_pad_modes() {
    for mode in [PadMode::Zero, PadMode::Reflect, PadMode::Replicate] {
        check_grads(vec![conv("c", 2, 3, 3, 1, 1, mode)], (2, 2, 5, 4), 1e-5);
        check_grads(vec![conv("c", 2, 2, 3, 2, 1, mode)], (1, 2, 6, 7), 1e-5);
    }
}

#[test]
fn linear_and_activation_gradients() {
    check_grads(
        vec![
            NamedSpec::new("f", LayerSpec::Flatten),
            NamedSpec::new(
                "l",
                LayerSpec::Linear {
                    in_features: 12,
                    out_features: 4,
                    init: Init::Xavier,
                },
            ),
            NamedSpec::new("t", LayerSpec::Tanh),
            NamedSpec::new(
                "l2",
                LayerSpec::Linear {
                    in_features: 4,
                    out_features: 3,
                    init: Init::Xavier,
                },
            ),
            NamedSpec::new("s", LayerSpec::Sigmoid),
        ],
        (3, 3, 2, 2),
        1e-5,
    );
}

#[test]
fn norm_pool_upsample_gradients() {
    check_grads(
        vec![
            conv("c", 1, 2, 3, 1, 1, PadMode::Reflect),
            NamedSpec::new("in", LayerSpec::InstanceNorm { eps: 1e-5 }),
            NamedSpec::new("lr", LayerSpec::LeakyRelu { slope: 0.2 }),
            NamedSpec::new("up", LayerSpec::Upsample { factor: 2 }),
            NamedSpec::new("mp", LayerSpec::MaxPool { size: 2 }),
        ],
        (2, 1, 4, 4),
        1e-4,
    );
    check_grads(
        vec![
            conv("c", 2, 3, 3, 1, 1, PadMode::Zero),
            NamedSpec::new(
                "bn",
                LayerSpec::BatchNorm {
                    channels: 3,
                    eps: 1e-5,
                    momentum: 0.1,
                },
            ),
            NamedSpec::new("r", LayerSpec::Relu),
        ],
        (3, 2, 3, 3),
        1e-4,
    );
}

#[test]
fn residual_gradients() {
    check_grads(
        vec![NamedSpec::new(
            "res",
            LayerSpec::Residual {
                body: vec![
                    conv("a", 2, 2, 3, 1, 1, PadMode::Reflect),
                    NamedSpec::new("t", LayerSpec::Tanh),
                    conv("b", 2, 2, 3, 1, 1, PadMode::Reflect),
                ],
                shortcut: vec![],
            },
        )],
        (2, 2, 4, 4),
        1e-5,
    );
    check_grads(
        vec![NamedSpec::new(
            "res",
            LayerSpec::Residual {
                body: vec![conv("a", 2, 3, 3, 2, 1, PadMode::Zero)],
                shortcut: vec![conv("p", 2, 3, 1, 2, 0, PadMode::Zero)],
            },
        )],
        (1, 2, 4, 4),
        1e-5,
    );
}

#[test]
fn identity_init_conv_is_identity() {
    let specs = vec![NamedSpec::new(
        "c",
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
            pad_mode: PadMode::Reflect,
            bias: true,
            init: Init::Identity,
        },
    )];
    let net = Sequential::from_specs(&specs, 0).unwrap();
    let x = rand_tensor((1, 2, 5, 5), 1);
    assert_eq!(net.forward(&x), x);
}

#[test]
fn shapes_and_forward_to() {
    let specs = vec![
        conv("c1", 1, 4, 3, 1, 1, PadMode::Zero),
        NamedSpec::new("p1", LayerSpec::MaxPool { size: 2 }),
        NamedSpec::new(
            "res",
            LayerSpec::Residual {
                body: vec![conv("inner", 4, 4, 3, 1, 1, PadMode::Zero)],
                shortcut: vec![],
            },
        ),
        NamedSpec::new("flat", LayerSpec::Flatten),
    ];
    assert_eq!(specs_output_shape(&specs, [1, 8, 8]).unwrap(), [64, 1, 1]);
    assert_eq!(shape_at(&specs, [1, 8, 8], "res.inner").unwrap(), [4, 4, 4]);
    let net = Sequential::from_specs(&specs, 3).unwrap();
    let x = rand_tensor((2, 1, 8, 8), 2);
    assert_eq!(net.forward_to(&x, "res.inner").unwrap().dim(), (2, 4, 4, 4));
    assert!(net.forward_to(&x, "nope").is_err());
    assert_eq!(specs_param_count(&specs), net.num_trainable());
}

#[test]
fn weights_roundtrip() {
    let specs = vec![
        conv("c1", 1, 2, 3, 1, 1, PadMode::Zero),
        NamedSpec::new(
            "bn",
            LayerSpec::BatchNorm {
                channels: 2,
                eps: 1e-5,
                momentum: 0.1,
            },
        ),
    ];
    let mut a = Sequential::from_specs(&specs, 1).unwrap();
    a.forward_train(&rand_tensor((2, 1, 4, 4), 3));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    a.save_weights(&path).unwrap();
    let mut b = Sequential::from_specs(&specs, 2).unwrap();
    b.load_weights(&path).unwrap();
    let x = rand_tensor((1, 1, 4, 4), 4);
    assert_eq!(a.forward(&x), b.forward(&x));

    let other = vec![conv("c1", 1, 3, 3, 1, 1, PadMode::Zero)];
    let mut c = Sequential::from_specs(&other, 0).unwrap();
    assert!(c.load_weights(&path).is_err());
}

#[test]
fn cross_entropy_gradient() {
    let logits = rand_tensor((3, 4, 1, 1), 8);
    let labels = [0, 3, 1];
    let (_, g) = loss::softmax_cross_entropy(&logits, &labels);
    let h = 1e-6;
    for i in 0..logits.len() {
        let mut p = logits.clone();
        let mut m = logits.clone();
        p.as_slice_mut().unwrap()[i] += h;
        m.as_slice_mut().unwrap()[i] -= h;
        let fd = (loss::softmax_cross_entropy(&p, &labels).0 - loss::softmax_cross_entropy(&m, &labels).0) / (2.0 * h);
        assert!((fd - g.as_slice().unwrap()[i]).abs() < 1e-7);
    }
}

#[test]
fn sgd_and_adam_descend_on_quadratic() {
    for kind in [
        OptimizerKind::Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        },
        OptimizerKind::Adam {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    ] {
        let mut p = Param::new(ndarray::arr1(&[3.0, -2.0]).into_dyn());
        let mut opt = Optimizer::new(kind);
        for _ in 0..300 {
            p.grad = p.value.mapv(|v| 2.0 * v);
            opt.step(vec![&mut p]);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2), "{kind:?}: {:?}", p.value);
    }
}
