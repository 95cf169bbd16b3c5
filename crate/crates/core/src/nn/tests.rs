use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect() }
}

/// Max over parameter tensors (and the input) of ||analytic - numeric|| / max(||analytic||, ||numeric||).
fn grad_check(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut net = Network::new(input_shape, specs, seed).unwrap();
    for p in net.params_mut() {
        for (i, v) in p.value.iter_mut().enumerate() {
            *v += 0.01 * ((i % 7) as f32 - 3.0);
        }
    }
    let mut shape = vec![2];
    shape.extend(input_shape);
    let x = random_tensor(shape, &mut r);
    let out_len = 2 * net.output_shape().iter().product::<usize>();
    let proj: Vec<f64> = (0..out_len).map(|_| r.gen_range(-1.0..1.0)).collect();
    let loss = |net: &mut Network, x: &Tensor| -> f64 {
        let y = net.forward(x, Mode::Train, &mut rng(99)).unwrap();
        y.data.iter().zip(&proj).map(|(a, b)| *a as f64 * b).sum()
    };
    net.zero_grad();
    loss(&mut net, &x);
    let g = Tensor { shape: std::iter::once(2).chain(net.output_shape().iter().copied()).collect(), data: proj.iter().map(|v| *v as f32).collect() };
    let dx = net.backward(&g).unwrap();
    let rel = |a: &[f64], n: &[f64]| {
        let diff: f64 = a.iter().zip(n).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na.max(nn) == 0.0 { 0.0 } else { diff / na.max(nn) }
    };
    let h = 1e-3f32;
    let mut worst = 0.0f64;
    let n_params: Vec<usize> = net.params().map(|p| p.value.len()).collect();
    for (pi, &len) in n_params.iter().enumerate() {
        let analytic: Vec<f64> = net.params().nth(pi).unwrap().grad.iter().map(|v| *v as f64).collect();
        let mut numeric = Vec::with_capacity(len);
        for j in 0..len {
            let orig = net.params().nth(pi).unwrap().value[j];
            let (up, down) = (orig + h, orig - h);
            net.params_mut().nth(pi).unwrap().value[j] = up;
            let lp = loss(&mut net, &x);
            net.params_mut().nth(pi).unwrap().value[j] = down;
            let lm = loss(&mut net, &x);
            net.params_mut().nth(pi).unwrap().value[j] = orig;
            numeric.push((lp - lm) / (up as f64 - down as f64));
        }
        worst = worst.max(rel(&analytic, &numeric));
    }
    let analytic: Vec<f64> = dx.data.iter().map(|v| *v as f64).collect();
    let mut numeric = Vec::new();
    for j in 0..x.data.len() {
        let mut xp = x.clone();
        let (up, down) = (x.data[j] + h, x.data[j] - h);
        xp.data[j] = up;
        let lp = loss(&mut net, &xp);
        xp.data[j] = down;
        let lm = loss(&mut net, &xp);
        numeric.push((lp - lm) / (up as f64 - down as f64));
    }
    worst.max(rel(&analytic, &numeric))
}

#[test]
fn gradient_checks_small_stacks() {
    let conv = LayerSpec::Conv2d { filters: 2, kernel: [3, 3], stride: 1, padding: 1 };
    let stacks: Vec<(Vec<usize>, Vec<LayerSpec>)> = vec![
        (vec![2, 5, 6], vec![conv.clone()]),
        (vec![1, 6, 6], vec![LayerSpec::Conv2d { filters: 3, kernel: [2, 3], stride: 2, padding: 0 }]),
        (vec![1, 6, 6], vec![conv.clone(), LayerSpec::Relu, LayerSpec::Maxpool2d { pool: [2, 2], floor: false }]),
        (vec![1, 5, 5], vec![LayerSpec::Maxpool2d { pool: [2, 2], floor: true }]),
        (vec![6], vec![LayerSpec::Dense { units: 4 }, LayerSpec::Sigmoid]),
        (vec![6], vec![LayerSpec::Dense { units: 2 }, LayerSpec::IntervalHead]),
        (vec![6], vec![LayerSpec::Dropout { p: 0.3 }, LayerSpec::Dense { units: 3 }]),
        (vec![2, 3, 3], vec![LayerSpec::Flatten, LayerSpec::Dense { units: 5 }, LayerSpec::Relu]),
    ];
    for (shape, specs) in stacks {
        for seed in 0..3 {
            let err = grad_check(&shape, &specs, seed);
            assert!(err < 1e-3, "{specs:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn dense_identity() {
    let mut net = Network::new(&[3], &[LayerSpec::Dense { units: 3 }], 0).unwrap();
    net.set_param_values(vec![vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], vec![0.; 3]]).unwrap();
    let x = Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0.25, -8.]).unwrap();
    assert_eq!(net.predict(&x).unwrap(), x);
}

#[test]
fn unit_conv_doubles() {
    let mut net = Network::new(&[1, 4, 5], &[LayerSpec::Conv2d { filters: 1, kernel: [1, 1], stride: 1, padding: 0 }], 0).unwrap();
    net.set_param_values(vec![vec![2.0], vec![0.0]]).unwrap();
    let x = random_tensor(vec![3, 1, 4, 5], &mut rng(1));
    let y = net.predict(&x).unwrap();
    for (a, b) in x.data.iter().zip(&y.data) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn pool_rejects_non_divisible_input() {
    let err = Network::new(&[1, 3, 3], &[LayerSpec::Maxpool2d { pool: [2, 2], floor: false }], 0).unwrap_err();
    assert!(matches!(err, Error::Shape { layer: 0, .. }));
    let err = Network::new(&[4], &[LayerSpec::Dense { units: 2 }, LayerSpec::Conv2d { filters: 1, kernel: [1, 1], stride: 1, padding: 0 }], 0)
        .unwrap_err();
    assert!(matches!(err, Error::Shape { layer: 1, .. }));
    let net = Network::new(&[2], &[LayerSpec::Dense { units: 1 }], 0).unwrap();
    assert!(matches!(net.predict(&Tensor::zeros(vec![1, 3])), Err(Error::Shape { layer: 0, .. })));
}

#[test]
fn single_weight_mse_gradient() {
    let mut net = Network::new(&[1], &[LayerSpec::Dense { units: 1 }], 0).unwrap();
    let (w, x, t) = (0.7f32, 1.5f32, 2.0f32);
    net.set_param_values(vec![vec![w], vec![0.0]]).unwrap();
    let y = net.forward(&Tensor::new(vec![1, 1], vec![x]).unwrap(), Mode::Train, &mut rng(0)).unwrap();
    net.backward(&Tensor::new(vec![1, 1], vec![2.0 * (y.data[0] - t)]).unwrap()).unwrap();
    let gw = net.params().next().unwrap().grad[0];
    assert!((gw - 2.0 * x * (w * x - t)).abs() < 1e-6);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let specs = [
        LayerSpec::Conv2d { filters: 2, kernel: [3, 3], stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 1 },
    ];
    let mut net = Network::new(&[1, 4, 4], &specs, 3).unwrap();
    net.forward(&random_tensor(vec![2, 1, 4, 4], &mut rng(2)), Mode::Train, &mut rng(0)).unwrap();
    net.backward(&Tensor::zeros(vec![2, 1])).unwrap();
    assert!(net.params().all(|p| p.grad.iter().all(|g| *g == 0.0)));
}

#[test]
fn backward_needs_forward() {
    let mut net = Network::new(&[2], &[LayerSpec::Dense { units: 1 }], 0).unwrap();
    assert!(matches!(net.backward(&Tensor::zeros(vec![1, 1])), Err(Error::State(_))));
    net.predict(&Tensor::zeros(vec![1, 2])).unwrap();
    assert!(matches!(net.backward(&Tensor::zeros(vec![1, 1])), Err(Error::State(_))));
}

#[test]
fn dropout_modes() {
    let mut net = Network::new(&[10_000], &[LayerSpec::Dropout { p: 0.3 }], 0).unwrap();
    let x = Tensor::new(vec![1, 10_000], vec![1.0; 10_000]).unwrap();
    assert_eq!(net.predict(&x).unwrap(), x);
    let y = net.forward(&x, Mode::Train, &mut rng(5)).unwrap();
    let mean = y.data.iter().map(|v| *v as f64).sum::<f64>() / 10_000.0;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(y.data.contains(&0.0));
}

#[test]
fn forward_backward_update_is_deterministic() {
    let run = || {
        let specs = [
            LayerSpec::Conv2d { filters: 2, kernel: [3, 3], stride: 1, padding: 0 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dropout { p: 0.5 },
            LayerSpec::Dense { units: 1 },
            LayerSpec::Sigmoid,
        ];
        let mut net = Network::new(&[1, 5, 5], &specs, 11).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() }).unwrap();
        let mut r = rng(4);
        for _ in 0..5 {
            let x = random_tensor(vec![4, 1, 5, 5], &mut r);
            net.zero_grad();
            let y = net.forward(&x, Mode::Train, &mut r).unwrap();
            let (_, g) = weighted_bce(&y.data, &[1.0, 0.0, 1.0, 0.0], 3.0);
            net.backward_params(&Tensor::new(vec![4, 1], g).unwrap()).unwrap();
            adam.step(net.params_mut()).unwrap();
        }
        encode_network(&net, "h", serde_json::Value::Null)
    };
    assert_eq!(run(), run());
}

#[test]
fn bce_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((weighted_bce(&[0.5], &[1.0], 1.0).0 - ln2).abs() < 1e-12);
    assert!((weighted_bce(&[0.5], &[1.0], 3.0).0 - 3.0 * ln2).abs() < 1e-12);
    assert!(weighted_bce(&[1.0, 0.0], &[1.0, 0.0], 3.0).0 <= 1.7e-6 * 3.0);
    assert!(weighted_bce(&[1.0], &[1.0], 1.0).0 <= 1.7e-6);
    assert!(weighted_bce(&[0.0], &[0.0], 1.0).0 <= 1.7e-6);
}

#[test]
fn bce_gradient_matches_finite_difference() {
    let mut r = rng(8);
    for _ in 0..50 {
        let p: Vec<f32> = (0..5).map(|_| r.gen_range(0.05..0.95)).collect();
        let y: Vec<f32> = (0..5).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let (_, g) = weighted_bce(&p, &y, 3.0);
        for j in 0..5 {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[j] += 1e-3;
            lo[j] -= 1e-3;
            let num = (weighted_bce(&hi, &y, 3.0).0 - weighted_bce(&lo, &y, 3.0).0) / (hi[j] as f64 - lo[j] as f64);
            assert!((g[j] as f64 - num).abs() / num.abs().max(1e-3) < 1e-3);
        }
    }
}

#[test]
fn iou_examples() {
    assert_eq!(interval_iou((0.5, 1.0), (0.5, 1.0)), 1.0);
    assert!((interval_iou((0.5, 1.0), (1.0, 1.0)) - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(interval_iou((0.0, 0.2), (5.0, 0.2)), 0.0);
}

#[test]
fn regression_loss_examples() {
    let (l, _) = regression_loss(&[0.1, 0.3], &[0.1, 0.3], 1.0, 1.0);
    assert!(l.abs() < 1e-12);
    let (l, _) = regression_loss(&[0.2, 0.1], &[-0.2, 0.2], 1.0, 1.0);
    assert!((l - 1.5).abs() < 1e-6, "{l}");
    let (p, t) = ([0.05f32, 0.3], [-0.02f32, 0.25]);
    let (l, _) = regression_loss(&p, &t, 0.0, 0.0);
    let iou = interval_iou((p[0] as f64, p[1] as f64), (t[0] as f64, t[1] as f64));
    assert_eq!(l, 1.0 - iou);
}

#[test]
fn adam_rules() {
    let mut p = [Param::new(vec![3], vec![1.0, -2.0, 0.5])];
    let mut adam = Adam::new(AdamConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() }).unwrap();
    adam.step(p.iter_mut()).unwrap();
    assert_eq!(p[0].value, vec![1.0, -2.0, 0.5]);

    let mut p = [Param::new(vec![1], vec![0.0])];
    let mut adam = Adam::new(AdamConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() }).unwrap();
    let mut last = 0.0;
    for _ in 0..500 {
        p[0].grad[0] = 0.37;
        let before = p[0].value[0];
        adam.step(p.iter_mut()).unwrap();
        last = (before - p[0].value[0]).abs();
    }
    assert!((last / 0.01 - 1.0).abs() < 0.05, "{last}");

    let mut p = [Param::new(vec![2], vec![1.0, -1.0])];
    let mut adam = Adam::new(AdamConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() }).unwrap();
    let mut prev = 1.0f32;
    for _ in 0..50 {
        adam.step(p.iter_mut()).unwrap();
        assert!(p[0].value[0].abs() < prev);
        prev = p[0].value[0].abs();
        assert!(p[0].value[1] < 0.0 || p[0].value[1].abs() < 1e-3);
    }
    assert!(matches!(Adam::new(AdamConfig { lr: 0.0, ..Default::default() }), Err(Error::InvalidHyperparameter(_))));
}

#[test]
fn weight_file_roundtrip_and_corruption() {
    let specs = [
        LayerSpec::Conv2d { filters: 2, kernel: [3, 3], stride: 1, padding: 1 },
        LayerSpec::Maxpool2d { pool: [2, 2], floor: true },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 2 },
        LayerSpec::IntervalHead,
    ];
    let net = Network::new(&[1, 7, 6], &specs, 21).unwrap();
    let bytes = encode_network(&net, "abc", serde_json::json!({"head": "regressor"}));
    let (back, header) = decode_network(&bytes).unwrap();
    assert_eq!(header.config_hash, "abc");
    let x = random_tensor(vec![3, 1, 7, 6], &mut rng(0));
    assert_eq!(net.predict(&x).unwrap().data, back.predict(&x).unwrap().data);
    assert!(matches!(decode_network(&bytes[..bytes.len() - 3]), Err(Error::CorruptModel(_))));
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(matches!(decode_network(&flipped), Err(Error::CorruptModel(_))));
    assert!(matches!(decode_network(b"nonsense"), Err(Error::CorruptModel(_))));
}
