//! Convolution lowered to matrix products (im2col / col2im).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (batch, in_ch, h, w) = input.dims4()?;
        let (out_ch, wi, kh, kw) = weight.dims4()?;
        if wi != in_ch {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_ch} channels, weight expects {wi}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{w} with padding {pad}"),
            ));
        }
        Ok(Self {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Input column for output column `ox` and kernel column `kx`, if inside the image.
    #[inline]
    fn src_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        (x >= 0 && (x as usize) < self.w).then_some(x as usize)
    }

    /// Range of output columns whose source column lies inside the image (stride 1 only).
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (oh·ow)` patch matrix.
pub(crate) fn im2col(src: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.in_ch {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.h {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kx);
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        if hi > lo {
                            let s0 = lo + kx - g.pad;
                            out_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            *v = g.src_col(ox, kx).map_or(0.0, |x| src_row[x]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into a `C×H×W` image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.in_ch {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    let in_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst_row = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kx);
                        if hi > lo {
                            let s0 = lo + kx - g.pad;
                            for (d, s) in dst_row[s0..s0 + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, v) in in_row.iter().enumerate() {
                            if let Some(x) = g.src_col(ox, kx) {
                                dst_row[x] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvGeom)> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.out_ch {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.len(), g.out_ch),
            ));
        }
    }
    let p = g.out_pixels();
    let k = g.patch_len();
    let mut out = vec![0.0; g.batch * g.out_ch * p];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.batch {
        im2col(input.item(n), &g, &mut cols);
        let dst = &mut out[n * g.out_ch * p..(n + 1) * g.out_ch * p];
        gemm(g.out_ch, k, p, weight.data(), false, &cols, false, 0.0, dst);
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let out = Tensor::new(&[g.batch, g.out_ch, g.oh, g.ow], out)?;
    Ok((out, g))
}

/// Gradients of a convolution. Each requested gradient is `Some`.
pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (want_input, want_weight, want_bias) = want;
    let p = g.out_pixels();
    let k = g.patch_len();
    let mut d_input = want_input.then(|| Tensor::zeros(input.shape()));
    let mut d_weight = want_weight.then(|| Tensor::zeros(weight.shape()));
    let mut d_bias = want_bias.then(|| Tensor::zeros(&[g.out_ch]));
    let mut cols = vec![0.0; k * p];
    for n in 0..g.batch {
        let gy = grad_out.item(n);
        if let Some(dw) = d_weight.as_mut() {
            im2col(input.item(n), g, &mut cols);
            gemm(g.out_ch, p, k, gy, false, &cols, true, 1.0, dw.data_mut());
        }
        if let Some(db) = d_bias.as_mut() {
            for (o, v) in db.data_mut().iter_mut().enumerate() {
                *v += gy[o * p..(o + 1) * p].iter().sum::<f64>();
            }
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(k, g.out_ch, p, weight.data(), true, gy, false, 0.0, &mut cols);
            let stride = dx.len() / g.batch;
            col2im(&cols, g, &mut dx.data_mut()[n * stride..(n + 1) * stride]);
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += x.at4(b, ic, y as usize, xx as usize) * w.at4(oc, ic, ky, kx);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_summation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, kh) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1), (1, 4, 9)] {
            let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, kh, kh], 1.0, &mut rng);
            if 7 + 2 * pad < kh {
                continue;
            }
            let (y, _) = conv2d_forward(&x, &w, None, stride, pad).unwrap();
            let expected = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.shape(), expected.shape());
            assert!(y.max_abs_diff(&expected) < 1e-12, "stride {stride} pad {pad} k {kh}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (3, 2)] {
            let x = Tensor::randn(&[1, 2, 6, 5], 1.0, &mut rng);
            let w = Tensor::zeros(&[1, 2, 3, 3]);
            let g = ConvGeom::new(&x, &w, stride, pad).unwrap();
            let mut cols = vec![0.0; g.patch_len() * g.out_pixels()];
            im2col(x.data(), &g, &mut cols);
            let r = Tensor::randn(&[cols.len()], 1.0, &mut rng);
            let mut back = vec![0.0; x.len()];
            col2im(r.data(), &g, &mut back);
            let lhs: f64 = cols.iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
