#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semenet::imageproc::GrayImage;
use semenet::nn::{build_model, preset, ForwardPass, Init, Mode, Model, Window};
use semenet::tensor::gradcheck::relative_error;
use semenet::tensor::{Graph, Tensor, Var};
use semenet::training::moex_loss;

/// Six nested loops over (n, o, y, x, c, ky, kx) with explicit zero padding.
pub fn conv_oracle(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((oi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// HE mapping evaluated directly from the CDF: round((m-1) cdf(v)), halves up.
pub fn he_oracle(img: &GrayImage) -> GrayImage {
    let n = img.samples().len() as f64;
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let v = img.get(x, y);
        let below = img.samples().iter().filter(|&&s| s <= v).count() as f64;
        (255.0 * below / n + 0.5).floor() as u8
    })
}

/// Straight-line CLAHE for a 4x4 image on a 2x2 grid of 2x2 tiles.
pub fn clahe_4x4_oracle(img: &GrayImage, clip_limit: f64) -> GrayImage {
    let ceiling = ((clip_limit * 4.0 / 256.0).floor() as u32).max(1);
    let mut maps = [[0u8; 256]; 4];
    for t in 0..4 {
        let (tx, ty) = ((t % 2) * 2, (t / 2) * 2);
        let mut bins = [0u32; 256];
        for y in ty..ty + 2 {
            for x in tx..tx + 2 {
                bins[img.get(x, y) as usize] += 1;
            }
        }
        let mut excess = 0;
        for b in bins.iter_mut() {
            if *b > ceiling {
                excess += *b - ceiling;
                *b = ceiling;
            }
        }
        for (k, b) in bins.iter_mut().enumerate() {
            *b += excess / 256 + u32::from((k as u32) < excess % 256);
        }
        let total: u32 = bins.iter().sum();
        let mut cum = 0;
        for k in 0..256 {
            cum += bins[k];
            maps[t][k] = (255.0 * cum as f64 / total as f64 + 0.5).floor() as u8;
        }
    }
    // Tile centers sit at 0.5 and 2.5: pixel rows/cols 0 and 3 use one tile,
    // 1 and 2 blend with weights 1/4 and 3/4.
    let weight = [0.0, 0.25, 0.75, 1.0];
    GrayImage::from_fn(4, 4, |x, y| {
        let v = img.get(x, y) as usize;
        let (wx, wy) = (weight[x], weight[y]);
        let top = (1.0 - wx) * maps[0][v] as f64 + wx * maps[1][v] as f64;
        let bottom = (1.0 - wx) * maps[2][v] as f64 + wx * maps[3][v] as f64;
        ((1.0 - wy) * top + wy * bottom + 0.5).floor() as u8
    })
}

/// rf += (k - 1) * jump; jump *= s.
pub fn classic(chain: &[Window]) -> Vec<u64> {
    let (mut rf, mut jump) = (1u64, 1u64);
    chain
        .iter()
        .map(|w| {
            rf += (w.kernel - 1) * jump;
            jump *= w.stride;
            rf
        })
        .collect()
}

/// `P(s+ > s-) + P(s+ = s-) / 2` over all positive/negative pairs.
pub fn pair_auc(scores: &[f64], truths: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if truths[i] && !truths[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

pub fn mini_seme_loss(model: &Model<f64>, input: &Tensor<f64>, partner: &[usize], y: &[usize], y_b: &[usize]) -> (f64, Graph<f64>, ForwardPass, Var) {
    let mut g = Graph::new();
    let x = g.input(input);
    let pass = model.forward(&mut g, x, Mode::Train, Some(partner)).unwrap();
    let loss = moex_loss(&mut g, pass.output, y, y_b, 0.7).unwrap();
    (g.value(loss)[0], g, pass, loss)
}

/// Largest relative error between backprop and central differences over
/// three random coordinates of every trainable parameter of mini-seme, in
/// training mode with moment exchange and a mixed loss.
pub fn mini_seme_gradient_error(seed: u64) -> (f64, usize) {
    let cfg = preset("mini-seme", 3).unwrap();
    let mut model: Model<f64> = build_model(&cfg, Init::HeUniform, seed).unwrap();
    // Non-trivial batch-norm affine parameters and SE weights.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    for i in 0..model.store().len() {
        let name = model.store().entry(i).name.clone();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            for v in model.store_mut().tensor_mut(i).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let [c, h, w] = model.input_shape();
    let input = Tensor::from_fn(&[2, c, h, w], |_| rng.random_range(0.0..1.0));
    let (y_a, y_b, partner) = ([0usize, 2], [2usize, 0], [1usize, 0]);

    let (_, g, pass, loss) = mini_seme_loss(&model, &input, &partner, &y_a, &y_b);
    assert!(pass.moex_applied);
    let grads = g.backward(loss).unwrap();
    model.store_mut().zero_grads();
    model.accumulate_gradients(&pass, &grads);

    let step = 1e-6;
    let mut checked = 0;
    let mut worst = 0.0;
    let trainable: Vec<usize> = model.store().trainable().map(|(i, _)| i).collect();
    for idx in trainable {
        let n = model.store().entry(idx).tensor.numel();
        let analytic = model.store().entry(idx).tensor.grad().expect("gradient buffer").to_vec();
        for _ in 0..3 {
            let c = rng.random_range(0..n);
            let mut plus = model.clone();
            plus.store_mut().tensor_mut(idx).data_mut()[c] += step;
            let mut minus = model.clone();
            minus.store_mut().tensor_mut(idx).data_mut()[c] -= step;
            let lp = mini_seme_loss(&plus, &input, &partner, &y_a, &y_b).0;
            let lm = mini_seme_loss(&minus, &input, &partner, &y_a, &y_b).0;
            let numeric = (lp - lm) / (2.0 * step);
            worst = f64::max(worst, relative_error(analytic[c], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}
