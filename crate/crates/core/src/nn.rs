//! Parameterised building blocks shared by the adaptive layer and the backbone.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Square convolution with bias, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub padding: usize,
}

impl Conv2dLayer {
    /// He-normal weights, zero bias.
    pub fn he(name: &str, in_ch: usize, out_ch: usize, kernel: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = Tensor::randn(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Self::from_tensors(name, w, Tensor::zeros(&[out_ch]), padding)
    }

    pub fn zeros(name: &str, in_ch: usize, out_ch: usize, kernel: usize, padding: usize) -> Self {
        Self::from_tensors(
            name,
            Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            Tensor::zeros(&[out_ch]),
            padding,
        )
    }

    pub fn from_tensors(name: &str, weight: Tensor, bias: Tensor, padding: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.tensor.shape()[2]
    }

    /// `out·in·k² + out`
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight.name.clone(), self.weight.tensor.clone());
        let b = tape.param(self.bias.name.clone(), self.bias.tensor.clone());
        tape.conv2d(x, w, Some(b), 1, self.padding)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn conv_params(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
    out_ch * in_ch * kernel * kernel + out_ch
}
