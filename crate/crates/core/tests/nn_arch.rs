use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semenet::imageproc::GrayImage;
use semenet::nn::receptive::window_chain;
use semenet::nn::segment::{fill_holes, keep_largest_components};
use semenet::nn::{
    build_model, gap, moex_exchange, preset, receptive_field, se_forward, unet_predict_mask, Init, Mode, Model,
    ModelConfig, SeBlockParams, Window,
};
use semenet::imageproc::MaskImage;
use semenet::tensor::{Graph, MoexNorm, Tensor};

mod common;
use common::classic;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn gap_values_and_resolution_independence() {
    let ones = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
    assert_eq!(gap(&ones).unwrap().data(), &[1.0]);
    let t = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(gap(&t).unwrap().data(), &[2.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let big = random_tensor(&mut rng, &[1, 512, 16, 16]);
    let small = random_tensor(&mut rng, &[1, 512, 7, 7]);
    let head = random_tensor(&mut rng, &[512, 3]);
    for f in [big, small] {
        let pooled = gap(&f).unwrap();
        assert_eq!(pooled.shape(), &[1, 512]);
        let mut g = Graph::new();
        let x = g.input(&pooled);
        let w = g.input(&head);
        let y = g.dense(x, w, None).unwrap();
        assert_eq!(g.shape(y), &[1, 3]);
    }
}

#[test]
fn se_with_zero_weights_halves_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[2, 8, 3, 3]);
    let y = se_forward(&x, &SeBlockParams::zeros(8, 4).unwrap()).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn se_single_channel_hand_formula() {
    for (w, v, a) in [(0.7, -1.3, 2.0), (-0.5, 2.0, 1.5), (1.2, 0.4, -0.8)] {
        let x = Tensor::full(&[1, 1, 2, 2], a);
        let p = SeBlockParams::new(1, 1, Tensor::new(&[1, 1], vec![w]).unwrap(), Tensor::new(&[1, 1], vec![v]).unwrap()).unwrap();
        let y = se_forward(&x, &p).unwrap();
        let want = sigmoid(v * f64::max(w * a, 0.0)) * a;
        assert!(y.data().iter().all(|&o| (o - want).abs() < 1e-12));
    }
}

#[test]
fn se_matches_composition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, c, r, hw) = (3, 8, 2, 4 * 5);
    let x = random_tensor(&mut rng, &[n, c, 4, 5]);
    let w1 = random_tensor(&mut rng, &[c, c / r]);
    let w2 = random_tensor(&mut rng, &[c / r, c]);
    let y = se_forward(&x, &SeBlockParams::new(c, r, w1.clone(), w2.clone()).unwrap()).unwrap();
    for s in 0..n {
        let z: Vec<f64> = (0..c).map(|ch| x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let hidden: Vec<f64> = (0..c / r)
            .map(|j| (0..c).map(|i| z[i] * w1.data()[i * (c / r) + j]).sum::<f64>().max(0.0))
            .collect();
        for ch in 0..c {
            let gate = sigmoid((0..c / r).map(|j| hidden[j] * w2.data()[j * c + ch]).sum());
            for p in 0..hw {
                let idx = (s * c + ch) * hw + p;
                assert!((y.data()[idx] - gate * x.data()[idx]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn moex_self_exchange_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for norm in [MoexNorm::Positional, MoexNorm::Instance] {
        let h = random_tensor(&mut rng, &[2, 4, 3, 3]);
        let (out, _) = moex_exchange(&h, &h, norm, 1e-5).unwrap();
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn moex_instance_hand_case() {
    let a = Tensor::<f64>::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
    let b = Tensor::new(&[1, 1, 1, 2], vec![-2.0, 2.0]).unwrap();
    let (out, m) = moex_exchange(&a, &b, MoexNorm::Instance, 1e-12).unwrap();
    assert_eq!(m.mean_a, vec![2.0]);
    assert!((m.std_a[0] - 1.0).abs() < 1e-9 && (m.std_b[0] - 2.0).abs() < 1e-9);
    assert!((out.data()[0] + 2.0).abs() < 1e-9 && (out.data()[1] - 2.0).abs() < 1e-9);
}

#[test]
fn moex_positional_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c, hw) = (2, 4, 9);
    let a = random_tensor(&mut rng, &[n, c, 3, 3]);
    let b = random_tensor(&mut rng, &[n, c, 3, 3]);
    let eps = 1e-5;
    let (out, _) = moex_exchange(&a, &b, MoexNorm::Positional, eps).unwrap();
    let moments = |t: &Tensor<f64>, s: usize, p: usize| {
        let v: Vec<f64> = (0..c).map(|ch| t.data()[(s * c + ch) * hw + p]).collect();
        let m = v.iter().sum::<f64>() / c as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c as f64;
        (m, (var + eps).sqrt())
    };
    for s in 0..n {
        for p in 0..hw {
            let (ma, sa) = moments(&a, s, p);
            let (mb, sb) = moments(&b, s, p);
            for ch in 0..c {
                let i = (s * c + ch) * hw + p;
                assert!((out.data()[i] - ((a.data()[i] - ma) / sa * sb + mb)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn moex_rejects_bad_operands() {
    let a = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
    let b = Tensor::<f64>::zeros(&[1, 2, 2, 3]);
    assert!(moex_exchange(&a, &b, MoexNorm::Positional, 1e-5).is_err());
    assert!(moex_exchange(&a, &a, MoexNorm::Positional, 0.0).is_err());
}

#[test]
fn receptive_field_examples() {
    let ones = [Window::new(1, 2), Window::new(1, 3), Window::new(1, 1)];
    assert_eq!(receptive_field(&ones).unwrap(), vec![1, 1, 1]);
    assert_eq!(receptive_field(&[Window::new(3, 1), Window::new(3, 1)]).unwrap(), vec![3, 5]);
    assert_eq!(receptive_field(&[Window::new(3, 2), Window::new(3, 1)]).unwrap(), vec![3, 7]);
    assert!(receptive_field(&[Window::new(0, 1)]).is_err());
}

#[test]
fn receptive_field_matches_classic_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let len = rng.random_range(1..12);
        let chain: Vec<Window> = (0..len).map(|_| Window::new(rng.random_range(1..8), rng.random_range(1..4))).collect();
        assert_eq!(receptive_field(&chain).unwrap(), classic(&chain));
    }
}

#[test]
fn preset_chain_has_growing_field() {
    let chain: Vec<Window> = window_chain(&preset("mini-seme", 3).unwrap()).into_iter().map(|(_, w)| w).collect();
    let rf = receptive_field(&chain).unwrap();
    assert!(rf.windows(2).all(|p| p[0] <= p[1]));
    assert_eq!(rf, classic(&chain));
}

#[test]
fn preset_output_shapes() {
    let m: Model<f32> = build_model(&preset("mini-seme", 3).unwrap(), Init::HeUniform, 0).unwrap();
    let out = m.infer(&Tensor::zeros(&[2, 1, 64, 64])).unwrap();
    assert_eq!(out.shape(), &[2, 3]);
    let u: Model<f32> = build_model(&preset("unet-toy", 1).unwrap(), Init::HeUniform, 0).unwrap();
    assert_eq!(u.infer(&Tensor::zeros(&[1, 1, 64, 64])).unwrap().shape(), &[1, 1, 64, 64]);
    for name in ["mini-plain", "mini-res", "mini-dense"] {
        let m: Model<f32> = build_model(&preset(name, 4).unwrap(), Init::HeUniform, 0).unwrap();
        assert_eq!(m.infer(&Tensor::zeros(&[1, 1, 64, 64])).unwrap().shape(), &[1, 4], "{name}");
    }
    assert!(preset("mini-unknown", 3).is_err());
}

#[test]
fn zero_gamma_residual_block_is_identity() {
    let cfg = ModelConfig::from_json(
        r#"{"input_shape": [4, 6, 6], "num_classes": 2, "layers": [
            {"name": "res", "kind": "residual_block", "params": {"out_channels": 4, "zero_init_last_bn": true}},
            {"kind": "gap"},
            {"kind": "dense", "params": {"out_features": 2}}
        ]}"#,
    )
    .unwrap();
    let m: Model<f64> = build_model(&cfg, Init::HeUniform, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[2, 4, 6, 6]);
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let xv = g.input(&x);
        let pass = m.forward(&mut g, xv, mode, None).unwrap();
        assert_eq!(g.value(pass.layer_outputs[0]), x.data());
    }
}

fn zero_head_unet() -> Model<f32> {
    let mut u: Model<f32> = build_model(&preset("unet-toy", 1).unwrap(), Init::HeUniform, 0).unwrap();
    for name in ["head.weight", "head.bias"] {
        u.store_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    u
}

#[test]
fn half_probability_ties_go_to_foreground() {
    let u = zero_head_unet();
    let img = GrayImage::filled(64, 64, 90);
    let mask = unet_predict_mask(&u, &img, 0.5, false).unwrap();
    assert_eq!(mask.count(), 64 * 64);
    let empty = unet_predict_mask(&u, &img, 1.0, false).unwrap();
    assert_eq!(empty.count(), 0);
    assert!(unet_predict_mask(&u, &img, 0.0, false).is_err());
    let small = unet_predict_mask(&u, &GrayImage::filled(40, 30, 9), 0.5, false).unwrap();
    assert_eq!((small.width(), small.height()), (40, 30));
}

#[test]
fn mask_cleanup() {
    let m = MaskImage::from_fn(10, 6, |x, y| {
        let big_left = (1..4).contains(&x) && (1..5).contains(&y) && !(x == 2 && y == 2);
        let big_right = (6..9).contains(&x) && (1..5).contains(&y);
        big_left || big_right || (x == 5 && y == 0)
    });
    let kept = keep_largest_components(&m, 2);
    assert!(!kept.get(5, 0));
    assert_eq!(kept.count(), m.count() - 1);
    let filled = fill_holes(&kept);
    assert!(filled.get(2, 2));
    assert_eq!(filled.count(), kept.count() + 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn se_gate_lies_between_zero_and_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.random_range(0.1..2.0));
        let p = SeBlockParams::new(4, 2, random_tensor(&mut rng, &[4, 2]), random_tensor(&mut rng, &[2, 4])).unwrap();
        let y = se_forward(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(*a >= 0.0 && a <= b);
        }
    }

    #[test]
    fn moex_output_carries_partner_moments(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[1, 3, 2, 2], |_| rng.random_range(-2.0..2.0));
        let b = Tensor::from_fn(&[1, 3, 2, 2], |_| rng.random_range(-2.0..2.0));
        let (out, m) = moex_exchange(&a, &b, MoexNorm::Instance, 1e-5).unwrap();
        for ch in 0..3 {
            let v = &out.data()[ch * 4..ch * 4 + 4];
            let mean = v.iter().sum::<f64>() / 4.0;
            prop_assert!((mean - m.mean_b[ch]).abs() < 1e-9);
        }
    }
}
