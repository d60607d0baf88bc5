//! Differentiable operations: forward recording on [`Tape`] and their adjoints.

use super::conv::{conv2d_backward, conv2d_forward};
use super::{Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (out, geom) = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &deps,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x))?;
        self.push(out, Op::SoftmaxChannels(x), &[x])
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        self.push(out, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        self.push(out, Op::Upsample2(x), &[x])
    }

    /// Concatenates two NCHW tensors along the channel axis (`a` first).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (na, ca, ha, wa) = av.dims4()?;
        let (nb, cb, hb, wb) = bv.dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for n in 0..na {
            out.extend_from_slice(av.item(n));
            out.extend_from_slice(bv.item(n));
        }
        let out = Tensor::new(&[na, ca + cb, ha, wa], out)?;
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let out = self.value(x).scaled(alpha);
        self.push(out, Op::Scale(x, alpha), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Per-pixel mixing of basis responses.
    ///
    /// `coeffs` is `N × (B·m) × H × W` with channel `b·m + i`, `features` is
    /// `N × B × H × W`; the output is `N × m × H × W` with
    /// `out[i] = Σ_b coeffs[b·m + i] · features[b]` at every pixel.
    pub fn pixel_mix(&mut self, coeffs: Var, features: Var, m: usize) -> Result<Var> {
        let out = pixel_mix_forward(self.value(coeffs), self.value(features), m)?;
        self.push(
            out,
            Op::PixelMix {
                coeffs,
                features,
                m,
            },
            &[coeffs, features],
        )
    }

    /// Mean over pixels of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_target(lv, target, "cross_entropy")?;
        let (n, k, h, w) = lv.dims4()?;
        let hw = h * w;
        let data = lv.data();
        let mut total = 0.0;
        for b in 0..n {
            for p in 0..hw {
                let at = |c: usize| data[(b * k + c) * hw + p];
                let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
                total += lse - at(target[b * hw + p]);
            }
        }
        let out = Tensor::scalar(total / (n * hw) as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
            },
            &[logits],
        )
    }

    /// `1 − mean_{k ≥ 1} (2·Σp·g + eps) / (Σp + Σg + eps)` with `p = softmax(logits)`
    /// and `g` the one-hot target, summed over every pixel of the batch.
    pub fn soft_dice(&mut self, logits: Var, target: &[usize], eps: f64) -> Result<Var> {
        let lv = self.value(logits);
        check_target(lv, target, "soft_dice")?;
        let (_, k, _, _) = lv.dims4()?;
        if k < 2 {
            return Err(Error::shape("soft_dice", "need at least two classes"));
        }
        let probs = softmax_channels(lv)?;
        let stats = dice_stats(&probs, target, eps);
        let mean: f64 = stats.iter().map(|s| s.ratio()).sum::<f64>() / (k - 1) as f64;
        let out = Tensor::scalar(1.0 - mean);
        self.push(
            out,
            Op::SoftDice {
                logits,
                target: target.to_vec(),
                eps,
            },
            &[logits],
        )
    }

    fn zip_values(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = x.clone();
    let data = out.data_mut();
    for b in 0..n {
        let block = &mut data[b * c * hw..(b + 1) * c * hw];
        for p in 0..hw {
            let max = (0..c).map(|k| block[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (block[k * hw + p] - max).exp();
                block[k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                block[k * hw + p] /= z;
            }
        }
    }
    Ok(out)
}

fn softmax_channels_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let (n, c, h, w) = y.dims4().expect("softmax output is rank 4");
    let hw = h * w;
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), g.data());
    let out = dx.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let dot: f64 = (0..c).map(|k| yd[base + k * hw + p] * gd[base + k * hw + p]).sum();
            for k in 0..c {
                let i = base + k * hw + p;
                out[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    dx
}

fn check_target(logits: &Tensor, target: &[usize], op: &'static str) -> Result<()> {
    let (n, k, h, w) = logits.dims4()?;
    if target.len() != n * h * w {
        return Err(Error::shape(
            op,
            format!("{} target labels for {n}x{h}x{w} pixels", target.len()),
        ));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= k) {
        return Err(Error::Domain(format!("{op}: label {bad} out of range for {k} classes")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct DiceStat {
    inter: f64,
    pred: f64,
    truth: f64,
    eps: f64,
}

impl DiceStat {
    fn denom(&self) -> f64 {
        self.pred + self.truth + self.eps
    }

    fn ratio(&self) -> f64 {
        (2.0 * self.inter + self.eps) / self.denom()
    }
}

/// Per-foreground-class sums over the whole batch.
fn dice_stats(probs: &Tensor, target: &[usize], eps: f64) -> Vec<DiceStat> {
    let (n, k, h, w) = probs.dims4().expect("probabilities are rank 4");
    let hw = h * w;
    let data = probs.data();
    (1..k)
        .map(|c| {
            let mut s = DiceStat {
                inter: 0.0,
                pred: 0.0,
                truth: 0.0,
                eps,
            };
            for b in 0..n {
                let plane = &data[(b * k + c) * hw..(b * k + c + 1) * hw];
                let labels = &target[b * hw..(b + 1) * hw];
                for (&p, &t) in plane.iter().zip(labels) {
                    s.pred += p;
                    if t == c {
                        s.inter += p;
                        s.truth += 1.0;
                    }
                }
            }
            s
        })
        .collect()
}

fn pixel_mix_forward(coeffs: &Tensor, features: &Tensor, m: usize) -> Result<Tensor> {
    let (n, cm, h, w) = coeffs.dims4()?;
    let (nf, nb, hf, wf) = features.dims4()?;
    if (n, h, w) != (nf, hf, wf) || m == 0 || cm != nb * m {
        return Err(Error::shape(
            "pixel_mix",
            format!(
                "coeffs {:?} incompatible with features {:?} for m={m}",
                coeffs.shape(),
                features.shape()
            ),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * m * hw];
    for s in 0..n {
        let cs = coeffs.item(s);
        let fs = features.item(s);
        let os = &mut out[s * m * hw..(s + 1) * m * hw];
        for b in 0..nb {
            let feat = &fs[b * hw..(b + 1) * hw];
            for i in 0..m {
                let coef = &cs[(b * m + i) * hw..(b * m + i + 1) * hw];
                let dst = &mut os[i * hw..(i + 1) * hw];
                for ((d, &c), &f) in dst.iter_mut().zip(coef).zip(feat) {
                    *d += c * f;
                }
            }
        }
    }
    Tensor::new(&[n, m, h, w], out)
}

/// Adjoint of `op` given the node output and its upstream gradient.
pub(super) fn backward(nodes: &[Node], op: &Op, out: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    match op {
        Op::Constant | Op::Input | Op::Param(_) => Vec::new(),
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let want = (wants(*input), wants(*weight), bias.is_some_and(wants));
            let grads = conv2d_backward(val(*input), val(*weight), g, geom, want);
            let mut res = Vec::with_capacity(3);
            if let Some(d) = grads.input {
                res.push((*input, d));
            }
            if let Some(d) = grads.weight {
                res.push((*weight, d));
            }
            if let (Some(b), Some(d)) = (bias, grads.bias) {
                res.push((*b, d));
            }
            res
        }
        Op::Relu(x) => {
            let xv = val(*x);
            let data = xv
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            vec![(*x, Tensor::new(xv.shape(), data).expect("same shape"))]
        }
        Op::Sigmoid(x) => {
            let data = out
                .data()
                .iter()
                .zip(g.data())
                .map(|(&y, &g)| g * y * (1.0 - y))
                .collect();
            vec![(*x, Tensor::new(out.shape(), data).expect("same shape"))]
        }
        Op::SoftmaxChannels(x) => vec![(*x, softmax_channels_backward(out, g))],
        Op::MaxPool2 { input, argmax } => {
            let mut dx = Tensor::zeros(val(*input).shape());
            let d = dx.data_mut();
            for (&idx, &gv) in argmax.iter().zip(g.data()) {
                d[idx] += gv;
            }
            vec![(*input, dx)]
        }
        Op::Upsample2(x) => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4().expect("rank 4");
            let ow = 2 * w;
            let mut dx = Tensor::zeros(xv.shape());
            let d = dx.data_mut();
            for plane in 0..n * c {
                let src = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                for (i, &gv) in src.iter().enumerate() {
                    let (y, x) = (i / ow, i % ow);
                    dst[(y / 2) * w + x / 2] += gv;
                }
            }
            vec![(*x, dx)]
        }
        Op::Concat(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let n = av.shape()[0];
            let (la, lb) = (av.len() / n, bv.len() / n);
            let mut da = Vec::with_capacity(av.len());
            let mut db = Vec::with_capacity(bv.len());
            for s in 0..n {
                let chunk = &g.data()[s * (la + lb)..(s + 1) * (la + lb)];
                da.extend_from_slice(&chunk[..la]);
                db.extend_from_slice(&chunk[la..]);
            }
            vec![
                (*a, Tensor::new(av.shape(), da).expect("same shape")),
                (*b, Tensor::new(bv.shape(), db).expect("same shape")),
            ]
        }
        Op::Reshape(x) => vec![(
            *x,
            g.clone().reshape(val(*x).shape()).expect("reshape preserves length"),
        )],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let da = zip(g, bv, |g, y| g * y);
            let db = zip(g, av, |g, x| g * x);
            vec![(*a, da), (*b, db)]
        }
        Op::Scale(x, alpha) => vec![(*x, g.scaled(*alpha))],
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
        Op::Mean(x) => {
            let xv = val(*x);
            vec![(*x, Tensor::full(xv.shape(), g.data()[0] / xv.len() as f64))]
        }
        Op::PixelMix {
            coeffs,
            features,
            m,
        } => {
            let (cv, fv) = (val(*coeffs), val(*features));
            let (n, _, h, w) = cv.dims4().expect("rank 4");
            let nb = fv.shape()[1];
            let hw = h * w;
            let mut res = Vec::with_capacity(2);
            if wants(*coeffs) {
                let mut dc = Tensor::zeros(cv.shape());
                let stride = dc.len() / n;
                for s in 0..n {
                    let (fs, gs) = (fv.item(s), g.item(s));
                    let ds = &mut dc.data_mut()[s * stride..(s + 1) * stride];
                    for b in 0..nb {
                        let feat = &fs[b * hw..(b + 1) * hw];
                        for i in 0..*m {
                            let dst = &mut ds[(b * m + i) * hw..(b * m + i + 1) * hw];
                            let gi = &gs[i * hw..(i + 1) * hw];
                            for ((d, &f), &gv) in dst.iter_mut().zip(feat).zip(gi) {
                                *d = f * gv;
                            }
                        }
                    }
                }
                res.push((*coeffs, dc));
            }
            if wants(*features) {
                let mut df = Tensor::zeros(fv.shape());
                let stride = df.len() / n;
                for s in 0..n {
                    let (cs, gs) = (cv.item(s), g.item(s));
                    let ds = &mut df.data_mut()[s * stride..(s + 1) * stride];
                    for b in 0..nb {
                        let dst = &mut ds[b * hw..(b + 1) * hw];
                        for i in 0..*m {
                            let coef = &cs[(b * m + i) * hw..(b * m + i + 1) * hw];
                            let gi = &gs[i * hw..(i + 1) * hw];
                            for ((d, &c), &gv) in dst.iter_mut().zip(coef).zip(gi) {
                                *d += c * gv;
                            }
                        }
                    }
                }
                res.push((*features, df));
            }
            res
        }
        Op::CrossEntropy { logits, target } => {
            let lv = val(*logits);
            let (n, k, h, w) = lv.dims4().expect("rank 4");
            let hw = h * w;
            let mut d = softmax_channels(lv).expect("rank 4");
            let scale = g.data()[0] / (n * hw) as f64;
            let dd = d.data_mut();
            for b in 0..n {
                for p in 0..hw {
                    dd[(b * k + target[b * hw + p]) * hw + p] -= 1.0;
                }
            }
            dd.iter_mut().for_each(|v| *v *= scale);
            vec![(*logits, d)]
        }
        Op::SoftDice {
            logits,
            target,
            eps,
        } => {
            let lv = val(*logits);
            let (n, k, h, w) = lv.dims4().expect("rank 4");
            let hw = h * w;
            let probs = softmax_channels(lv).expect("rank 4");
            let stats = dice_stats(&probs, target, *eps);
            let scale = -g.data()[0] / (k - 1) as f64;
            // gradient of the loss with respect to the probabilities
            let mut dp = Tensor::zeros(lv.shape());
            let dpd = dp.data_mut();
            for b in 0..n {
                for c in 1..k {
                    let s = stats[c - 1];
                    let denom = s.denom();
                    let base = (2.0 * s.inter + s.eps) / (denom * denom);
                    for p in 0..hw {
                        let gt = if target[b * hw + p] == c { 1.0 } else { 0.0 };
                        dpd[(b * k + c) * hw + p] = scale * (2.0 * gt / denom - base);
                    }
                }
            }
            vec![(*logits, softmax_channels_backward(&probs, &dp))]
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}
