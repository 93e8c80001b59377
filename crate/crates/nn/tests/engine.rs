use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xaimi_nn::loss::softmax_cross_entropy;
use xaimi_nn::network::{conv, linear};
use xaimi_nn::train::batch_gradient;
use xaimi_nn::{Adam, AdamConfig, Layer, MaxPool2d, Parallelism, Params, Sequential, Tensor};

fn net<T: xaimi_nn::Real>(seed: u64) -> Sequential<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sequential::new(vec![
        ("conv1".into(), conv(&mut rng, 1, 4, 3, 1, 1)),
        ("relu1".into(), Layer::Relu),
        ("pool1".into(), Layer::Pool(MaxPool2d { kernel: 2 })),
        ("flatten".into(), Layer::Flatten),
        ("fc".into(), linear(&mut rng, 4 * 4 * 4, 3)),
    ])
}

fn data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n).map(|_| (0..64).map(|_| rng.random::<f64>()).collect()).collect();
    let y = (0..n).map(|i| i % 3).collect();
    (x, y)
}

fn loss_and_grad(net: &Sequential<f64>, x: &[Vec<f64>], y: &[usize], mode: Parallelism) -> (f64, Vec<f64>) {
    let batch: Vec<usize> = (0..x.len()).collect();
    batch_gradient::<f64, _>(mode, &batch, 3, net.num_params(), |idx, g| {
        let refs: Vec<&[f64]> = idx.iter().map(|&i| x[i].as_slice()).collect();
        let t = Tensor::stack_samples(&refs, &[1, 8, 8])?;
        let trace = net.forward_trace(&t)?;
        let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let (loss, dl) = softmax_cross_entropy(trace.output(), &labels);
        net.backward(&trace, dl, Some(g), 0, false)?;
        Ok(loss)
    })
    .unwrap()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut m = net::<f64>(1);
    let (x, y) = data(7, 2);
    let (_, g) = loss_and_grad(&m, &x, &y, Parallelism::Sequential);
    let theta = m.flat_params();
    let h = 1e-6;
    for p in (0..theta.len()).step_by(7) {
        let mut t = theta.clone();
        t[p] += h;
        m.set_flat_params(&t).unwrap();
        let up = loss_and_grad(&m, &x, &y, Parallelism::Sequential).0;
        t[p] -= 2.0 * h;
        m.set_flat_params(&t).unwrap();
        let down = loss_and_grad(&m, &x, &y, Parallelism::Sequential).0;
        let fd = (up - down) / (2.0 * h);
        assert!((fd - g[p]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {p}: fd {fd} vs {}", g[p]);
    }
}

#[test]
fn parallel_and_sequential_gradients_are_identical() {
    let m = net::<f64>(3);
    let (x, y) = data(20, 4);
    let a = loss_and_grad(&m, &x, &y, Parallelism::Sequential);
    let b = loss_and_grad(&m, &x, &y, Parallelism::Rayon);
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn adam_fits_a_small_batch() {
    let mut m = net::<f64>(5);
    let (x, y) = data(12, 6);
    let cfg = AdamConfig { learning_rate: 1e-2, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
    let mut opt = Adam::new(cfg, m.num_params());
    let first = loss_and_grad(&m, &x, &y, Parallelism::Rayon).0;
    for _ in 0..300 {
        let (_, g) = loss_and_grad(&m, &x, &y, Parallelism::Rayon);
        opt.step(&mut m, &g);
    }
    let last = loss_and_grad(&m, &x, &y, Parallelism::Rayon).0;
    assert!(last < 0.05 * first, "loss {first} -> {last}");
}
