//! Mini U-Net backbone and model assembly.
//!
//! Encoder level `l` (width `base·2^l`) runs two 3×3 conv+ReLU and a 2×2 max
//! pool. The bottleneck (width `base·2^L`) runs two conv+ReLU. Decoder level
//! `l` upsamples by nearest neighbour, concatenates the encoder skip and runs
//! two conv+ReLU. A 1×1 head maps to class logits. No batch normalisation.
//!
//! A model optionally has a front layer: the adaptive convolution, or for
//! the fixed-kernel baseline a plain `max(S)×max(S)` stem convolution to the
//! same `C·m` channels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptive::{AdaptiveConfig, AdaptiveConvLayer};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{conv_params, Conv2dLayer};
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Baseline,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth_levels: usize,
    pub num_classes: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth_levels == 0 {
            return Err(Error::Config("U-Net widths and depth must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `(name, in, out, kernel)` for every backbone convolution in forward order.
    pub fn layer_table(&self) -> Vec<(String, usize, usize, usize)> {
        let l = self.depth_levels;
        let mut rows = Vec::new();
        let mut prev = self.in_channels;
        for lvl in 0..l {
            let w = self.width(lvl);
            rows.push((format!("backbone.enc{lvl}.conv0"), prev, w, 3));
            rows.push((format!("backbone.enc{lvl}.conv1"), w, w, 3));
            prev = w;
        }
        let wb = self.width(l);
        rows.push(("backbone.bottleneck.conv0".into(), prev, wb, 3));
        rows.push(("backbone.bottleneck.conv1".into(), wb, wb, 3));
        prev = wb;
        for lvl in (0..l).rev() {
            let w = self.width(lvl);
            rows.push((format!("backbone.dec{lvl}.conv0"), prev + w, w, 3));
            rows.push((format!("backbone.dec{lvl}.conv1"), w, w, 3));
            prev = w;
        }
        rows.push(("head".into(), prev, self.num_classes, 1));
        rows
    }

    /// Closed-form backbone parameter count, `Σ out·in·k² + out` over [`layer_table`](Self::layer_table).
    pub fn param_count(&self) -> usize {
        self.layer_table()
            .iter()
            .map(|&(_, i, o, k)| conv_params(i, o, k))
            .sum()
    }
}

/// Everything needed to build a [`SegModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Image channels.
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth_levels: usize,
    /// Baseline only: prepend a fixed-size stem convolution to `C·m` channels.
    #[serde(default = "default_true")]
    pub stem: bool,
    #[serde(default)]
    pub adaptive: AdaptiveConfig,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        if self.kind == ModelKind::Adaptive || self.stem {
            self.adaptive.validate()?;
        }
        Ok(())
    }

    /// Channels entering the backbone.
    pub fn backbone_in(&self) -> usize {
        match (self.kind, self.stem) {
            (ModelKind::Adaptive, _) | (ModelKind::Baseline, true) => self.in_channels * self.adaptive.m,
            (ModelKind::Baseline, false) => self.in_channels,
        }
    }

    pub fn backbone(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.backbone_in(),
            base_width: self.base_width,
            depth_levels: self.depth_levels,
            num_classes: self.num_classes,
        }
    }

    pub fn stem_kernel(&self) -> usize {
        self.adaptive.sizes.iter().copied().max().unwrap_or(9)
    }
}

#[derive(Debug, Clone)]
pub enum Front {
    None,
    Stem(Conv2dLayer),
    Adaptive(AdaptiveConvLayer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub adaptive: usize,
    pub stem: usize,
    pub backbone: usize,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    spec: ModelSpec,
    front: Front,
    encoder: Vec<[Conv2dLayer; 2]>,
    bottleneck: [Conv2dLayer; 2],
    decoder: Vec<[Conv2dLayer; 2]>,
    head: Conv2dLayer,
}

impl SegModel {
    /// He-initialised model (biases zero).
    pub fn new(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let front = match spec.kind {
            ModelKind::Adaptive => Front::Adaptive(AdaptiveConvLayer::new(spec.adaptive.clone(), spec.in_channels, rng)?),
            ModelKind::Baseline if spec.stem => {
                let k = spec.stem_kernel();
                Front::Stem(Conv2dLayer::he("stem", spec.in_channels, spec.backbone_in(), k, k / 2, rng))
            }
            ModelKind::Baseline => Front::None,
        };
        let table = spec.backbone().layer_table();
        let mut convs = table
            .iter()
            .map(|(name, i, o, k)| Conv2dLayer::he(name, *i, *o, *k, k / 2, rng));
        Ok(Self::assemble(spec, front, &mut convs))
    }

    /// Every parameter zero; the adaptive generator too.
    pub fn zeroed(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let front = match spec.kind {
            ModelKind::Adaptive => Front::Adaptive(AdaptiveConvLayer::zeroed(spec.adaptive.clone(), spec.in_channels)?),
            ModelKind::Baseline if spec.stem => {
                let k = spec.stem_kernel();
                Front::Stem(Conv2dLayer::zeros("stem", spec.in_channels, spec.backbone_in(), k, k / 2))
            }
            ModelKind::Baseline => Front::None,
        };
        let table = spec.backbone().layer_table();
        let mut convs = table
            .iter()
            .map(|(name, i, o, k)| Conv2dLayer::zeros(name, *i, *o, *k, k / 2));
        Ok(Self::assemble(spec, front, &mut convs))
    }

    fn assemble(spec: &ModelSpec, front: Front, convs: &mut impl Iterator<Item = Conv2dLayer>) -> Self {
        let mut pair = || [convs.next().expect("layer table"), convs.next().expect("layer table")];
        let levels = spec.depth_levels;
        let encoder = (0..levels).map(|_| pair()).collect();
        let bottleneck = pair();
        let decoder = (0..levels).map(|_| pair()).collect();
        let head = convs.next().expect("layer table has a head");
        Self {
            spec: spec.clone(),
            front,
            encoder,
            bottleneck,
            decoder,
            head,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn front(&self) -> &Front {
        &self.front
    }

    pub fn adaptive(&self) -> Option<&AdaptiveConvLayer> {
        match &self.front {
            Front::Adaptive(a) => Some(a),
            _ => None,
        }
    }

    pub fn adaptive_mut(&mut self) -> Option<&mut AdaptiveConvLayer> {
        match &mut self.front {
            Front::Adaptive(a) => Some(a),
            _ => None,
        }
    }

    fn backbone_layers(&self) -> impl Iterator<Item = &Conv2dLayer> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.bottleneck.iter())
            .chain(self.decoder.iter().flatten())
            .chain(std::iter::once(&self.head))
    }

    /// All parameters in a fixed order (front, encoder, bottleneck, decoder, head).
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = match &self.front {
            Front::None => Vec::new(),
            Front::Stem(s) => s.params().to_vec(),
            Front::Adaptive(a) => a.params().collect(),
        };
        out.extend(self.backbone_layers().flat_map(|l| l.params()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = match &mut self.front {
            Front::None => Vec::new(),
            Front::Stem(s) => s.params_mut().into_iter().collect(),
            Front::Adaptive(a) => a.params_mut().collect(),
        };
        let backbone = self
            .encoder
            .iter_mut()
            .flatten()
            .chain(self.bottleneck.iter_mut())
            .chain(self.decoder.iter_mut().flatten())
            .chain(std::iter::once(&mut self.head));
        out.extend(backbone.flat_map(|l| l.params_mut()));
        out
    }

    /// Exact enumeration of parameter elements.
    pub fn param_count(&self) -> ParamCount {
        let backbone: usize = self.backbone_layers().map(Conv2dLayer::param_count).sum();
        let (adaptive, stem) = match &self.front {
            Front::None => (0, 0),
            Front::Stem(s) => (0, s.param_count()),
            Front::Adaptive(a) => (a.param_count(), 0),
        };
        ParamCount {
            total: adaptive + stem + backbone,
            adaptive,
            stem,
            backbone,
        }
    }

    /// The count predicted by the closed-form per-layer formulas.
    pub fn closed_form_count(spec: &ModelSpec) -> ParamCount {
        let backbone = spec.backbone().param_count();
        let (adaptive, stem) = match (spec.kind, spec.stem) {
            (ModelKind::Adaptive, _) => (spec.adaptive.param_count(spec.in_channels), 0),
            (ModelKind::Baseline, true) => (0, conv_params(spec.in_channels, spec.backbone_in(), spec.stem_kernel())),
            (ModelKind::Baseline, false) => (0, 0),
        };
        ParamCount {
            total: adaptive + stem + backbone,
            adaptive,
            stem,
            backbone,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::shape("unet_forward", format!("expected NCHW, got {shape:?}")));
        };
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "unet_forward",
                format!("{c} channels, model expects {}", self.spec.in_channels),
            ));
        }
        let div = 1usize << self.spec.depth_levels;
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "unet_forward",
                format!("spatial dims {h}x{w} not divisible by {div}"),
            ));
        }
        Ok(())
    }

    /// Records the forward pass; returns `N × classes × H × W` logits.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let mut h = match &self.front {
            Front::None => x,
            Front::Stem(s) => s.forward(tape, x)?,
            Front::Adaptive(a) => a.forward(tape, x)?,
        };
        let mut skips = Vec::with_capacity(self.encoder.len());
        for [c0, c1] in &self.encoder {
            h = conv_relu(tape, c0, h)?;
            h = conv_relu(tape, c1, h)?;
            skips.push(h);
            h = tape.maxpool2(h)?;
        }
        h = conv_relu(tape, &self.bottleneck[0], h)?;
        h = conv_relu(tape, &self.bottleneck[1], h)?;
        for ([c0, c1], skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            h = tape.upsample_nearest2(h)?;
            h = tape.concat_channels(h, skip)?;
            h = conv_relu(tape, c0, h)?;
            h = conv_relu(tape, c1, h)?;
        }
        self.head.forward(tape, h)
    }

    /// Logits without keeping a tape around.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.params().into_iter().map(|p| (p.name.as_str(), &p.tensor)).collect()
    }

    /// Overwrites every parameter from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load_tensors(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
        for p in self.params_mut() {
            let t = map
                .remove(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            *p = Parameter::new(p.name.clone(), t);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Architecture summary with the per-layer parameter table.
    pub fn describe(&self) -> serde_json::Value {
        let mut layers = Vec::new();
        match &self.front {
            Front::None => {}
            Front::Stem(s) => layers.push(layer_row("stem", s.in_channels(), s.out_channels(), s.kernel())),
            Front::Adaptive(a) => {
                for (l, conv) in a.generator().iter().enumerate() {
                    layers.push(layer_row(
                        &format!("adaptive.generator.layer{l}"),
                        conv.in_channels(),
                        conv.out_channels(),
                        conv.kernel(),
                    ));
                }
            }
        }
        for (name, i, o, k) in self.spec.backbone().layer_table() {
            layers.push(layer_row(&name, i, o, k));
        }
        let mut json = serde_json::json!({
            "kind": self.spec.kind,
            "spec": self.spec,
            "backbone_in_channels": self.spec.backbone_in(),
            "layers": layers,
            "param_count": self.param_count(),
            "closed_form": Self::closed_form_count(&self.spec),
            "layer_formula": "params(conv in->out, k) = out*in*k*k + out",
        });
        if let Front::Adaptive(a) = &self.front {
            json["adaptive_formula"] = a.config().param_formula(self.spec.in_channels).into();
            json["basis_sizes"] = serde_json::json!(a.bank().sizes());
        }
        json
    }
}

fn layer_row(name: &str, i: usize, o: usize, k: usize) -> serde_json::Value {
    serde_json::json!({
        "name": name,
        "in_channels": i,
        "out_channels": o,
        "kernel": k,
        "params": conv_params(i, o, k),
    })
}

fn conv_relu(tape: &mut Tape, conv: &Conv2dLayer, x: Var) -> Result<Var> {
    let y = conv.forward(tape, x)?;
    tape.relu(y)
}
