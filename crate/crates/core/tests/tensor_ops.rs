use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semenet::tensor::{Graph, Tensor};

mod common;
use common::conv_oracle;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let wv = g.input(w);
    let y = g.conv2d(xv, wv, None, (stride, stride), (pad, pad)).unwrap();
    g.tensor(y)
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let y = conv(&x, &w, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn conv_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(&[2, 3, 6, 5], random(&mut rng, 180)).unwrap();
    let y = conv(&x, &Tensor::zeros(&[4, 3, 3, 3]), 2, 1);
    assert_eq!(y.shape(), &[2, 4, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xd = random(&mut rng, 50);
    let wd = random(&mut rng, 54);
    let (want, shape) = conv_oracle(&xd, [1, 2, 5, 5], &wd, [3, 2, 3, 3], 2, 1);
    let y = conv(&Tensor::new(&[1, 2, 5, 5], xd).unwrap(), &Tensor::new(&[3, 2, 3, 3], wd).unwrap(), 2, 1);
    assert_eq!(y.shape(), &shape);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn conv_in_f32_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xd = random(&mut rng, 2 * 3 * 7 * 6);
    let wd = random(&mut rng, 4 * 3 * 3 * 3);
    let (want, _) = conv_oracle(&xd, [2, 3, 7, 6], &wd, [4, 3, 3, 3], 1, 1);
    let mut g = Graph::<f32>::new();
    let xv = g.input(&Tensor::new(&[2, 3, 7, 6], xd.iter().map(|&v| v as f32).collect()).unwrap());
    let wv = g.input(&Tensor::new(&[4, 3, 3, 3], wd.iter().map(|&v| v as f32).collect()).unwrap());
    let y = g.conv2d(xv, wv, None, (1, 1), (1, 1)).unwrap();
    for (a, b) in g.value(y).iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

fn dense(x: Tensor<f64>, w: Tensor<f64>, b: Option<Tensor<f64>>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(&x);
    let wv = g.input(&w);
    let bv = b.map(|b| g.input(&b));
    let y = g.dense(xv, wv, bv).unwrap();
    g.tensor(y)
}

#[test]
fn dense_hand_cases() {
    let y = dense(
        Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(),
        Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        Some(Tensor::zeros(&[2])),
    );
    assert_eq!(y.data(), &[1.0, 2.0]);
    let y = dense(
        Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap(),
        Tensor::new(&[2, 1], vec![2.0, 3.0]).unwrap(),
        Some(Tensor::new(&[1], vec![5.0]).unwrap()),
    );
    assert_eq!(y.data(), &[10.0]);
}

#[test]
fn dense_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random(&mut rng, 32);
    let w = random(&mut rng, 24);
    let mut want = vec![0.0; 12];
    for i in 0..4 {
        for j in 0..3 {
            for k in 0..8 {
                want[i * 3 + j] += x[i * 8 + k] * w[k * 3 + j];
            }
        }
    }
    let y = dense(Tensor::new(&[4, 8], x).unwrap(), Tensor::new(&[8, 3], w).unwrap(), None);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
}

fn bn_train(x: &Tensor<f64>, gamma: f64, beta: f64) -> Tensor<f64> {
    let c = x.shape()[1];
    let mut g = Graph::new();
    let xv = g.input(x);
    let gv = g.leaf(&[c], vec![gamma; c], false);
    let bv = g.leaf(&[c], vec![beta; c], false);
    let y = g.batchnorm2d(xv, gv, bv, None, 1e-5).unwrap();
    g.tensor(y)
}

#[test]
fn batchnorm_degenerate_cases() {
    let constant = Tensor::full(&[2, 2, 3, 3], 4.0);
    assert!(bn_train(&constant, 1.0, 0.0).data().iter().all(|&v| v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(&[2, 2, 3, 3], random(&mut rng, 36)).unwrap();
    assert!(bn_train(&x, 0.0, 1.5).data().iter().all(|&v| v == 1.5));
}

#[test]
fn batchnorm_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, c, hw) = (3, 4, 5 * 5);
    let x = Tensor::new(&[n, c, 5, 5], (0..n * c * hw).map(|_| rng.random_range(-3.0..5.0)).collect()).unwrap();
    let y = bn_train(&x, 1.0, 0.0);
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|s| y.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].to_vec()).collect();
        let xs: Vec<f64> = (0..n).flat_map(|s| x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].to_vec()).collect();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let xm = xs.iter().sum::<f64>() / m;
        let xvar = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / m;
        assert!(mean.abs() < 1e-5);
        assert!((var - xvar / (xvar + 1e-5)).abs() < 1e-9);
    }
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, k) = (5, 4);
    let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-4.0..4.0)).collect();
    let mut targets = Vec::new();
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        targets.extend(row.iter().map(|v| v / s));
    }
    let mut want = 0.0;
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..k {
            want -= targets[i * k + j] * (row[j].exp() / z).ln();
        }
    }
    want /= n as f64;
    let mut g = Graph::new();
    let l = g.leaf(&[n, k], logits, false);
    let loss = g.softmax_cross_entropy(l, &targets).unwrap();
    assert!((g.value(loss)[0] - want).abs() < 1e-6);
}

#[test]
fn gradient_accumulates_across_uses() {
    let mut g = Graph::new();
    let x = g.leaf(&[3], vec![1.0, -2.0, 0.5], true);
    let y = g.add(x, x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_agrees_with_oracle_on_random_geometry(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..9, w in 3usize..9, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xd = random(&mut rng, n * c * h * w);
        let wd = random(&mut rng, o * c * k * k);
        let (want, shape) = conv_oracle(&xd, [n, c, h, w], &wd, [o, c, k, k], stride, pad);
        let y = conv(&Tensor::new(&[n, c, h, w], xd).unwrap(), &Tensor::new(&[o, c, k, k], wd).unwrap(), stride, pad);
        prop_assert_eq!(y.shape(), &shape[..]);
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn relu_and_sigmoid_ranges(xs in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let mut g = Graph::new();
        let x = g.leaf(&[xs.len()], xs.clone(), false);
        let y = g.relu(x);
        for (a, b) in g.value(y).iter().zip(&xs) {
            prop_assert_eq!(*a, b.max(0.0));
        }
        let s = g.sigmoid(x);
        prop_assert!(g.value(s).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
