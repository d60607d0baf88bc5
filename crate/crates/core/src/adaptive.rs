//! Adaptive convolution with per-pixel Fourier-Bessel kernels.
//!
//! A small convolutional generator looks at the neighbourhood of every
//! pixel and emits `|F|·|S|·m` coefficients. For each of the `m`
//! intermediate features the coefficients weight the fixed basis bank,
//! giving one `max(S)×max(S)` kernel per pixel, channel and feature, which is
//! applied at that pixel only.
//!
//! The forward pass is organised basis-first: the input is convolved once
//! with every fixed basis and the responses are mixed per pixel. By
//! linearity this equals applying each synthesized kernel directly
//! ([`direct_adaptive_conv`] is the reference).
//!
//! Coefficient channel layout within one input channel is `b·m + i` for bank
//! entry `b` and feature `i`. Output channel layout is `c·m + i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fb_basis::BasisBank;
use crate::nn::{conv_params, Conv2dLayer};
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How the generator sees the input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorMode {
    /// Shared generator applied to every input channel independently.
    #[default]
    Depthwise,
    /// One generator sees all channels and emits coefficients for each of them.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    /// Basis sizes `S`.
    pub sizes: Vec<usize>,
    /// Bases per size, `|F|`.
    pub bases: usize,
    /// Intermediate features per input channel.
    pub m: usize,
    /// Stacked 3×3 generator convolutions.
    pub depth: usize,
    pub hidden: usize,
    #[serde(default)]
    pub mode: GeneratorMode,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            sizes: vec![3, 5, 7, 9],
            bases: 6,
            m: 6,
            depth: 4,
            hidden: 32,
            mode: GeneratorMode::Depthwise,
        }
    }
}

impl AdaptiveConfig {
    /// Width reproducing the ≈0.363M generator parameter budget.
    pub fn paper_preset() -> Self {
        Self {
            hidden: 110,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 4 {
            return Err(Error::Config(format!("generator depth {} < 4", self.depth)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("generator hidden width must be positive".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        if self.bases == 0 || self.sizes.is_empty() {
            return Err(Error::Config("basis bank must be non-empty".into()));
        }
        let max = self.sizes.iter().copied().max().unwrap_or(0);
        if 2 * self.depth + 1 < max {
            return Err(Error::Config(format!(
                "generator receptive field {} smaller than largest basis {max}",
                2 * self.depth + 1
            )));
        }
        Ok(())
    }

    pub fn bank_len(&self) -> usize {
        self.sizes.len() * self.bases
    }

    /// Closed-form generator parameter count for `in_channels` inputs.
    pub fn param_count(&self, in_channels: usize) -> usize {
        let (gen_in, gen_out) = self.generator_io(in_channels);
        conv_params(gen_in, self.hidden, 3)
            + (self.depth - 2) * conv_params(self.hidden, self.hidden, 3)
            + conv_params(self.hidden, gen_out, 3)
    }

    /// The closed form of [`param_count`](Self::param_count) as text.
    pub fn param_formula(&self, in_channels: usize) -> String {
        let (i, o) = self.generator_io(in_channels);
        let h = self.hidden;
        format!(
            "(9*{i}*{h} + {h}) + {d}*(9*{h}*{h} + {h}) + (9*{h}*{o} + {o}) = {}",
            self.param_count(in_channels),
            d = self.depth - 2
        )
    }

    fn generator_io(&self, in_channels: usize) -> (usize, usize) {
        let per_channel = self.bank_len() * self.m;
        match self.mode {
            GeneratorMode::Depthwise => (1, per_channel),
            GeneratorMode::Joint => (in_channels, in_channels * per_channel),
        }
    }
}

/// Per-pixel basis weights for every input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    /// `(N·C) × (B·m) × H × W`
    pub values: Tensor,
    pub batch: usize,
    pub channels: usize,
    pub bases: usize,
    pub m: usize,
}

impl CoefficientField {
    pub fn from_tensor(values: Tensor, batch: usize, channels: usize, bases: usize, m: usize) -> Result<Self> {
        let (nc, bm, _, _) = values.dims4()?;
        if nc != batch * channels || bm != bases * m {
            return Err(Error::shape(
                "coefficient_field",
                format!("{:?} for N={batch} C={channels} B={bases} m={m}", values.shape()),
            ));
        }
        Ok(Self {
            values,
            batch,
            channels,
            bases,
            m,
        })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }

    /// All `B·m` coefficients at one pixel, in `b·m + i` order.
    pub fn pixel(&self, n: usize, c: usize, y: usize, x: usize) -> Vec<f64> {
        let plane = n * self.channels + c;
        (0..self.bases * self.m)
            .map(|j| self.values.at4(plane, j, y, x))
            .collect()
    }

    /// The `B` basis weights of feature `i` at one pixel.
    pub fn feature(&self, n: usize, c: usize, i: usize, y: usize, x: usize) -> Vec<f64> {
        let plane = n * self.channels + c;
        (0..self.bases)
            .map(|b| self.values.at4(plane, b * self.m + i, y, x))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveConvLayer {
    config: AdaptiveConfig,
    in_channels: usize,
    bank: BasisBank,
    generator: Vec<Conv2dLayer>,
}

impl AdaptiveConvLayer {
    /// Hidden generator layers are He-initialised. The final layer starts
    /// with zero weights and a bias of `1/m` on the first bank entry
    /// (smallest size, radial basis) for every feature, so the layer begins
    /// as a fixed small smoothing convolution.
    pub fn new(config: AdaptiveConfig, in_channels: usize, rng: &mut Rng) -> Result<Self> {
        let mut layer = Self::zeroed(config, in_channels)?;
        let (gen_in, _) = layer.config.generator_io(in_channels);
        let hidden = layer.config.hidden;
        let last = layer.generator.len() - 1;
        for (l, conv) in layer.generator.iter_mut().enumerate().take(last) {
            let fan_in = if l == 0 { gen_in } else { hidden };
            *conv = Conv2dLayer::he(&format!("adaptive.generator.layer{l}"), fan_in, hidden, 3, 1, rng);
        }
        let per_channel = layer.bank.len() * layer.config.m;
        let m = layer.config.m;
        let groups = match layer.config.mode {
            GeneratorMode::Depthwise => 1,
            GeneratorMode::Joint => in_channels,
        };
        let bias = layer.generator[last].bias.tensor.data_mut();
        for g in 0..groups {
            for i in 0..m {
                bias[g * per_channel + i] = 1.0 / m as f64;
            }
        }
        Ok(layer)
    }

    /// Every generator weight and bias zero.
    pub fn zeroed(config: AdaptiveConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        if in_channels == 0 {
            return Err(Error::Config("adaptive layer needs at least one input channel".into()));
        }
        let bank = BasisBank::new(&config.sizes, config.bases)?;
        let (gen_in, gen_out) = config.generator_io(in_channels);
        let mut generator = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let i = if l == 0 { gen_in } else { config.hidden };
            let o = if l + 1 == config.depth { gen_out } else { config.hidden };
            generator.push(Conv2dLayer::zeros(&format!("adaptive.generator.layer{l}"), i, o, 3, 1));
        }
        Ok(Self {
            config,
            in_channels,
            bank,
            generator,
        })
    }

    pub fn config(&self) -> &AdaptiveConfig {
        &self.config
    }

    pub fn bank(&self) -> &BasisBank {
        &self.bank
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels * self.config.m
    }

    pub fn padding(&self) -> usize {
        (self.bank.max_size() - 1) / 2
    }

    pub fn generator(&self) -> &[Conv2dLayer] {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut [Conv2dLayer] {
        &mut self.generator
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.generator.iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.generator.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Parameter::numel).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
        let &[n, c, h, w] = shape else {
            return Err(Error::shape("adaptive_conv", format!("expected NCHW, got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::shape(
                "adaptive_conv",
                format!("{c} input channels, layer built for {}", self.in_channels),
            ));
        }
        let max = self.bank.max_size();
        if h < max || w < max {
            return Err(Error::shape(
                "adaptive_conv",
                format!("spatial dims {h}x{w} smaller than the {max}x{max} support"),
            ));
        }
        Ok((n, c, h, w))
    }

    /// Records the generator and returns `(N·C) × (B·m) × H × W` coefficients.
    pub fn record_coefficients(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.check_input(tape.value(x).shape())?;
        let mut hcur = match self.config.mode {
            GeneratorMode::Depthwise => tape.reshape(x, &[n * c, 1, h, w])?,
            GeneratorMode::Joint => x,
        };
        let last = self.generator.len() - 1;
        for (l, conv) in self.generator.iter().enumerate() {
            hcur = conv.forward(tape, hcur)?;
            if l < last {
                hcur = tape.relu(hcur)?;
            }
        }
        if self.config.mode == GeneratorMode::Joint {
            hcur = tape.reshape(hcur, &[n * c, self.bank.len() * self.config.m, h, w])?;
        }
        Ok(hcur)
    }

    /// Records the full layer: `N×C×H×W → N×(C·m)×H×W`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let coeffs = self.record_coefficients(tape, x)?;
        self.record_mix(tape, x, coeffs)
    }

    fn record_mix(&self, tape: &mut Tape, x: Var, coeffs: Var) -> Result<Var> {
        let (n, c, h, w) = self.check_input(tape.value(x).shape())?;
        let planes = tape.reshape(x, &[n * c, 1, h, w])?;
        let bank = tape.constant(self.bank.conv_weight());
        let responses = tape.conv2d(planes, bank, None, 1, self.padding())?;
        let mixed = tape.pixel_mix(coeffs, responses, self.config.m)?;
        tape.reshape(mixed, &[n, c * self.config.m, h, w])
    }

    /// Evaluates the generator without recording gradients.
    pub fn generate_coefficients(&self, input: &Tensor) -> Result<CoefficientField> {
        let (n, c, _, _) = self.check_input(input.shape())?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let v = self.record_coefficients(&mut tape, x)?;
        CoefficientField::from_tensor(tape.value(v).clone(), n, c, self.bank.len(), self.config.m)
    }

    /// Applies a given coefficient field (generator bypassed), basis-first.
    pub fn apply_field(&self, input: &Tensor, field: &CoefficientField) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let coeffs = tape.constant(field.values.clone());
        let out = self.record_mix(&mut tape, x, coeffs)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_inference(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// `Σ_{f,i} W²` for each basis size at one pixel, ordered as [`BasisBank::sizes`].
    pub fn size_energy(&self, field: &CoefficientField, n: usize, c: usize, y: usize, x: usize) -> Vec<f64> {
        let mut energy = vec![0.0; self.bank.sizes().len()];
        let coeffs = field.pixel(n, c, y, x);
        for (j, v) in coeffs.iter().enumerate() {
            energy[self.bank.size_slot(j / field.m)] += v * v;
        }
        energy
    }
}

/// The kernel `FS × W` for one pixel, channel and feature.
pub fn synthesize_kernel(coeffs: &[f64], bank: &BasisBank) -> Result<Tensor> {
    bank.reconstruct_kernel(coeffs)
}

/// Per-pixel reference: synthesizes every kernel explicitly and applies it
/// at its pixel with zero padding.
pub fn direct_adaptive_conv(input: &Tensor, field: &CoefficientField, bank: &BasisBank) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if (field.batch, field.channels, field.height(), field.width()) != (n, c, h, w) {
        return Err(Error::shape("direct_adaptive_conv", "field does not match input"));
    }
    let m = field.m;
    let k = bank.max_size();
    let pad = (k - 1) as isize / 2;
    let mut out = Tensor::zeros(&[n, c * m, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..m {
                for y in 0..h {
                    for x in 0..w {
                        let kernel = synthesize_kernel(&field.feature(b, ch, i, y, x), bank)?;
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = x as isize + kx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += kernel.data()[ky * k + kx] * input.at4(b, ch, sy as usize, sx as usize);
                            }
                        }
                        let idx = ((b * c * m + ch * m + i) * h + y) * w + x;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}
