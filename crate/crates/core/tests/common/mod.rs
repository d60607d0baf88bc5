//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use adaconv::adaptive::{direct_adaptive_conv, synthesize_kernel, AdaptiveConfig, AdaptiveConvLayer};
use adaconv::autodiff::{Tape, Var};
use adaconv::evaluation::{self, ConfusionCounts};
use adaconv::fb_basis::{bessel_j, bessel_zero, BasisBank, BesselOrder};
use adaconv::rng::{self, Rng};
use adaconv::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Reduces any output to a scalar through fixed random weights.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `build(inputs)` with respect to every input element.
pub fn gradcheck<F>(inputs: &[Tensor], rng: &mut Rng, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).clone()
    };
    let weights = Tensor::uniform(probe.shape(), 0.5, 1.5, rng);
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = weighted_sum(&mut tape, out, &weights)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = weighted_sum(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zero);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Normal values pushed at least `gap` away from zero (ReLU kink).
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Distinct values with spacing 0.05 in random order (no max-pool ties).
pub fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("shape matches")
}

fn small_nchw(rng: &mut Rng, even: bool) -> [usize; 4] {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let (mut h, mut w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    if even {
        h += h % 2;
        w += w % 2;
    }
    [n, c, h, w]
}

fn labels(rng: &mut Rng, count: usize, k: usize) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..k)).collect()
}

/// Worst gradient error of each differentiable op over `trials` random shapes.
pub fn gradcheck_all_ops(trials: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = rng::seeded(seed);
    let mut report = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut Rng) -> Result<f64>| -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(f(&mut rng)?);
        }
        report.push((name, worst));
        Ok(())
    };
    run("conv2d", &mut |r| {
        let [n, c, h, w] = small_nchw(r, false);
        let o = r.gen_range(1..=3);
        let k = *[1usize, 3].choose(r).unwrap();
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=k / 2);
        let x = Tensor::randn(&[n, c, h + 2, w + 2], 1.0, r);
        let wt = Tensor::randn(&[o, c, k, k], 0.5, r);
        let b = Tensor::randn(&[o], 0.5, r);
        gradcheck(&[x, wt, b], r, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad))
    })?;
    run("relu", &mut |r| {
        let x = away_from_zero(&small_nchw(r, false), 1e-3, r);
        gradcheck(&[x], r, |t, v| t.relu(v[0]))
    })?;
    run("sigmoid", &mut |r| {
        let x = Tensor::randn(&small_nchw(r, false), 2.0, r);
        gradcheck(&[x], r, |t, v| t.sigmoid(v[0]))
    })?;
    run("softmax_channels", &mut |r| {
        let x = Tensor::randn(&small_nchw(r, false), 2.0, r);
        gradcheck(&[x], r, |t, v| t.softmax_channels(v[0]))
    })?;
    run("maxpool2", &mut |r| {
        let x = distinct(&small_nchw(r, true), r);
        gradcheck(&[x], r, |t, v| t.maxpool2(v[0]))
    })?;
    run("upsample_nearest2", &mut |r| {
        let x = Tensor::randn(&small_nchw(r, false), 1.0, r);
        gradcheck(&[x], r, |t, v| t.upsample_nearest2(v[0]))
    })?;
    run("concat_channels", &mut |r| {
        let [n, c, h, w] = small_nchw(r, false);
        let c2 = r.gen_range(1..=3);
        let a = Tensor::randn(&[n, c, h, w], 1.0, r);
        let b = Tensor::randn(&[n, c2, h, w], 1.0, r);
        gradcheck(&[a, b], r, |t, v| t.concat_channels(v[0], v[1]))
    })?;
    run("reshape", &mut |r| {
        let [n, c, h, w] = small_nchw(r, false);
        let x = Tensor::randn(&[n, c, h, w], 1.0, r);
        gradcheck(&[x], r, |t, v| t.reshape(v[0], &[n * c, 1, h, w]))
    })?;
    run("add", &mut |r| {
        let s = small_nchw(r, false);
        let (a, b) = (Tensor::randn(&s, 1.0, r), Tensor::randn(&s, 1.0, r));
        gradcheck(&[a, b], r, |t, v| t.add(v[0], v[1]))
    })?;
    run("mul", &mut |r| {
        let s = small_nchw(r, false);
        let (a, b) = (Tensor::randn(&s, 1.0, r), Tensor::randn(&s, 1.0, r));
        gradcheck(&[a, b], r, |t, v| t.mul(v[0], v[1]))
    })?;
    run("scale", &mut |r| {
        let x = Tensor::randn(&small_nchw(r, false), 1.0, r);
        let alpha = r.gen_range(-2.0..2.0);
        gradcheck(&[x], r, |t, v| t.scale(v[0], alpha))
    })?;
    run("sum", &mut |r| {
        let x = Tensor::randn(&small_nchw(r, false), 1.0, r);
        gradcheck(&[x], r, |t, v| t.sum(v[0]))
    })?;
    run("mean", &mut |r| {
        let x = Tensor::randn(&small_nchw(r, false), 1.0, r);
        gradcheck(&[x], r, |t, v| t.mean(v[0]))
    })?;
    run("pixel_mix", &mut |r| {
        let [n, _, h, w] = small_nchw(r, false);
        let (b, m) = (r.gen_range(1..=4), r.gen_range(1..=3));
        let coeffs = Tensor::randn(&[n, b * m, h, w], 1.0, r);
        let feats = Tensor::randn(&[n, b, h, w], 1.0, r);
        gradcheck(&[coeffs, feats], r, |t, v| t.pixel_mix(v[0], v[1], m))
    })?;
    run("cross_entropy", &mut |r| {
        let [n, _, h, w] = small_nchw(r, false);
        let k = r.gen_range(2..=4);
        let x = Tensor::randn(&[n, k, h, w], 2.0, r);
        let target = labels(r, n * h * w, k);
        gradcheck(&[x], r, |t, v| t.cross_entropy(v[0], &target))
    })?;
    run("soft_dice", &mut |r| {
        let [n, _, h, w] = small_nchw(r, false);
        let k = r.gen_range(2..=4);
        let x = Tensor::randn(&[n, k, h, w], 2.0, r);
        let target = labels(r, n * h * w, k);
        gradcheck(&[x], r, |t, v| t.soft_dice(v[0], &target, evaluation::DICE_EPS))
    })?;
    run("combined_loss", &mut |r| {
        let [n, _, h, w] = small_nchw(r, false);
        let x = Tensor::randn(&[n, 2, h, w], 2.0, r);
        let target = labels(r, n * h * w, 2);
        gradcheck(&[x], r, |t, v| evaluation::combined_loss(t, v[0], &target))
    })?;
    Ok(report)
}

/// Layer whose generator weights are all random (the default init zeroes the
/// final layer, which would make coefficients constant).
pub fn random_layer(config: AdaptiveConfig, in_channels: usize, seed: u64) -> AdaptiveConvLayer {
    let mut r = rng::seeded(seed);
    let mut layer = AdaptiveConvLayer::new(config, in_channels, &mut r).expect("valid config");
    for conv in layer.generator_mut() {
        let fan_in = (conv.in_channels() * 9) as f64;
        let shape = conv.weight.tensor.shape().to_vec();
        conv.weight.tensor = Tensor::randn(&shape, (2.0 / fan_in).sqrt(), &mut r);
        let bshape = conv.bias.tensor.shape().to_vec();
        conv.bias.tensor = Tensor::randn(&bshape, 0.1, &mut r);
    }
    layer
}

/// Relative gradient error of a small adaptive layer through its own
/// forward pass, w.r.t. the input and every generator parameter.
pub fn adaptive_gradcheck(seed: u64) -> Result<f64> {
    let config = AdaptiveConfig {
        sizes: vec![3, 5],
        bases: 2,
        m: 2,
        depth: 4,
        hidden: 4,
        ..AdaptiveConfig::default()
    };
    let layer = random_layer(config, 1, seed);
    let mut r = rng::seeded(seed ^ 0xAB);
    let x = Tensor::uniform(&[1, 1, 12, 12], 0.0, 1.0, &mut r);
    let weights = Tensor::uniform(&[1, 2, 12, 12], 0.5, 1.5, &mut r);
    let objective = |l: &AdaptiveConvLayer, x: &Tensor| -> Result<f64> {
        let out = l.forward_inference(x)?;
        Ok(out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = layer.forward(&mut tape, xv)?;
    let loss = weighted_sum(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let gx = grads.get(xv).expect("input gradient");
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += FD_EPS;
        minus.data_mut()[i] -= FD_EPS;
        let numeric = (objective(&layer, &plus)? - objective(&layer, &minus)?) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(gx.data()[i], numeric));
    }
    let names: Vec<String> = layer.params().map(|p| p.name.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let analytic = grads.named(name).expect("parameter gradient").clone();
        for i in 0..analytic.len() {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut l = layer.clone();
                l.params_mut().nth(k).expect("same order").tensor.data_mut()[i] += delta;
                objective(&l, &x)
            };
            let numeric = (perturbed(FD_EPS)? - perturbed(-FD_EPS)?) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Bias-only generator: compares the layer against plain convolution with
/// the synthesized kernels. Returns the worst absolute difference.
pub fn degeneration_diff(trials: usize, seed: u64) -> Result<f64> {
    let config = AdaptiveConfig::default();
    let c = 3;
    let mut layer = AdaptiveConvLayer::zeroed(config.clone(), c)?;
    let mut r = rng::seeded(seed);
    let last = layer.generator().len() - 1;
    let bias_len = layer.generator()[last].bias.tensor.len();
    layer.generator_mut()[last].bias.tensor = Tensor::randn(&[bias_len], 1.0, &mut r);
    let bias = layer.generator()[last].bias.tensor.data().to_vec();
    let (m, bases) = (config.m, layer.bank().len());
    let s = layer.bank().max_size();
    let mut kernels = Vec::with_capacity(m * s * s);
    for i in 0..m {
        let coeffs: Vec<f64> = (0..bases).map(|b| bias[b * m + i]).collect();
        kernels.extend_from_slice(synthesize_kernel(&coeffs, layer.bank())?.data());
    }
    let weight = Tensor::new(&[m, 1, s, s], kernels)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = Tensor::uniform(&[1, c, 16, 16], 0.0, 1.0, &mut r);
        let got = layer.forward_inference(&x)?;
        for ch in 0..c {
            let plane: Vec<f64> = x.data()[ch * 256..(ch + 1) * 256].to_vec();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(&[1, 1, 16, 16], plane)?);
            let wv = tape.constant(weight.clone());
            let out = tape.conv2d(xv, wv, None, 1, s / 2)?;
            let want = tape.value(out).data();
            let have = &got.data()[ch * m * 256..(ch + 1) * m * 256];
            for (a, b) in have.iter().zip(want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Worst interior difference between `f(shift(x))` and `shift(f(x))`.
pub fn equivariance_diff(seed: u64, dy: isize, dx: isize) -> Result<f64> {
    let config = AdaptiveConfig {
        hidden: 8,
        ..AdaptiveConfig::default()
    };
    let layer = random_layer(config.clone(), 2, seed);
    let mut r = rng::seeded(seed ^ 0x5151);
    let (h, w) = (32usize, 32usize);
    let x = Tensor::uniform(&[1, 2, h, w], 0.0, 1.0, &mut r);
    let shifted_in = layer.forward_inference(&x.translate(dy, dx)?)?;
    let shifted_out = layer.forward_inference(&x)?.translate(dy, dx)?;
    // Generator reach plus kernel radius.
    let reach = (config.depth + layer.bank().max_size() / 2) as isize;
    let mut worst = 0.0f64;
    let (_, ch, _, _) = shifted_in.dims4()?;
    for c in 0..ch {
        for y in (reach + dy.max(0))..(h as isize - reach + dy.min(0)) {
            for xx in (reach + dx.max(0))..(w as isize - reach + dx.min(0)) {
                let a = shifted_in.at4(0, c, y as usize, xx as usize);
                let b = shifted_out.at4(0, c, y as usize, xx as usize);
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Basis-first implementation against explicit per-pixel kernels.
pub fn basis_first_vs_direct(seed: u64) -> Result<f64> {
    let layer = random_layer(AdaptiveConfig { hidden: 8, ..AdaptiveConfig::default() }, 2, seed);
    let mut r = rng::seeded(seed ^ 0x77);
    let x = Tensor::uniform(&[2, 2, 12, 12], 0.0, 1.0, &mut r);
    let field = layer.generate_coefficients(&x)?;
    let fast = layer.apply_field(&x, &field)?;
    let direct = direct_adaptive_conv(&x, &field, layer.bank())?;
    Ok(fast.max_abs_diff(&direct))
}

/// Zeros and residuals of the first three Bessel zeros against bisection values.
pub fn bessel_checks() -> Result<Vec<(String, f64, f64)>> {
    let want = [(0u32, 1u32, 2.404826), (1, 1, 3.831706), (0, 2, 5.520078)];
    want.iter()
        .map(|&(n, k, v)| {
            let order = BesselOrder::new(n)?;
            let z = bessel_zero(order, k)?;
            Ok((format!("j_{n},{k}"), (z - v).abs(), bessel_j(order, z)?.abs()))
        })
        .collect()
}

/// Worst `|decompose(reconstruct(c)) - c|` over random coefficient vectors.
pub fn basis_round_trip(bank: &BasisBank, trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng::seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c: Vec<f64> = (0..bank.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let k = bank.reconstruct_kernel(&c)?;
        let d = bank.decompose_kernel(&k)?;
        for (a, b) in d.coeffs.iter().zip(&c) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn loss_of(f: fn(&mut Tape, Var, &[usize]) -> Result<Var>, logits: &Tensor, target: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let l = f(&mut tape, v, target).expect("valid loss inputs");
    tape.value(l).data()[0]
}

/// Two-class logits with `margin` in favour of `labels` at every pixel.
pub fn confident_logits(labels: &[usize], h: usize, w: usize, margin: f64) -> Tensor {
    let mut d = vec![0.0; 2 * h * w];
    for (p, &l) in labels.iter().enumerate() {
        d[l * h * w + p] = margin;
    }
    Tensor::new(&[1, 2, h, w], d).expect("shape matches")
}

/// Every hand-computed loss and metric example, as `(name, passed)`.
pub fn loss_metric_oracles() -> Vec<(&'static str, bool)> {
    let mut out = Vec::new();
    let target = vec![0, 1, 1, 0];
    out.push((
        "ce confident < 1e-9",
        loss_of(evaluation::ce_loss, &confident_logits(&target, 2, 2, 30.0), &target) < 1e-9,
    ));
    let uniform = Tensor::zeros(&[1, 2, 2, 2]);
    out.push((
        "ce uniform = ln 2",
        (loss_of(evaluation::ce_loss, &uniform, &target) - std::f64::consts::LN_2).abs() < 1e-12,
    ));
    // Per pixel -log softmax computed by hand:
    // logits (class0, class1) = (1,0)->0 : 0.31326168751822286
    //                           (0,2)->1 : 0.12692801104297263
    //                           (0.5,0.5)->1 : ln 2
    //                           (-1,1)->0 : 2.1269280110429727
    let hand = Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, 0.5, -1.0, 0.0, 2.0, 0.5, 1.0]).unwrap();
    let want = (0.31326168751822286 + 0.12692801104297263 + std::f64::consts::LN_2 + 2.1269280110429727) / 4.0;
    out.push((
        "ce hand 2x2",
        (loss_of(evaluation::ce_loss, &hand, &[0, 1, 1, 0]) - want).abs() < 1e-12,
    ));
    out.push((
        "dice perfect < 1e-5",
        loss_of(evaluation::dice_loss, &confident_logits(&target, 2, 2, 30.0), &target) < 1e-5,
    ));
    // Foreground probability ~0 on a non-empty target: 1 - eps/(2 + eps).
    let wrong = confident_logits(&[0, 0, 0, 0], 2, 2, 60.0);
    let disjoint = loss_of(evaluation::dice_loss, &wrong, &target);
    out.push(("dice disjoint -> 1 - eps term", (disjoint - (1.0 - 1e-6 / (2.0 + 1e-6))).abs() < 1e-9));
    // p = 0.5 everywhere, 2 of 4 pixels foreground: (2*1 + eps)/(2 + 2 + eps).
    let half = loss_of(evaluation::dice_loss, &uniform, &target);
    out.push(("dice half", (half - (1.0 - (2.0 + 1e-6) / (4.0 + 1e-6))).abs() < 1e-15));
    out.push((
        "combined perfect < 1e-5",
        loss_of(evaluation::combined_loss, &confident_logits(&target, 2, 2, 30.0), &target) < 1e-5,
    ));
    let mut r = rng::seeded(5);
    let random = Tensor::randn(&[2, 2, 3, 3], 1.5, &mut r);
    let t: Vec<usize> = (0..18).map(|_| r.gen_range(0..2)).collect();
    let comb = loss_of(evaluation::combined_loss, &random, &t);
    let parts = (loss_of(evaluation::ce_loss, &random, &t) + loss_of(evaluation::dice_loss, &random, &t)) / 2.0;
    out.push(("combined = (ce + dice)/2", comb == parts));

    let ident = evaluation::metrics(&target, &target, 2).unwrap();
    let f = ident.foreground;
    out.push((
        "identical masks all 1",
        [f.accuracy, f.precision, f.recall, f.dice, f.iou].iter().all(|&v| v == 1.0),
    ));
    // 4x4 masks, 4 px foreground each, overlap 2.
    let mut pred = vec![0; 16];
    let mut truth = vec![0; 16];
    for p in [0, 1, 2, 3] {
        pred[p] = 1;
    }
    for p in [2, 3, 4, 5] {
        truth[p] = 1;
    }
    let m = evaluation::metrics(&pred, &truth, 2).unwrap().foreground;
    out.push((
        "overlap 2 of 4: dice 0.5 iou 1/3 p 0.5 r 0.5",
        m.dice == 0.5 && (m.iou - 1.0 / 3.0).abs() < 1e-15 && m.precision == 0.5 && m.recall == 0.5,
    ));
    let empty = evaluation::metrics(&[0; 9], &[0; 9], 2).unwrap().foreground;
    out.push((
        "empty class dice = iou = 1",
        empty.dice == 1.0 && empty.iou == 1.0 && empty.precision_undefined && empty.recall_undefined,
    ));
    out
}

/// Worst `|dice - 2 iou / (1 + iou)|` over random confusion counts.
pub fn dice_iou_identity(trials: usize, seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let cc = ConfusionCounts {
            tp: r.gen_range(0..1000),
            fp: r.gen_range(0..1000),
            fn_: r.gen_range(0..1000),
            tn: r.gen_range(0..1000),
        };
        let m = cc.metrics();
        worst = worst.max((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs());
    }
    worst
}
