//! Segmentation losses (differentiable) and overlap metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;

/// Mean per-pixel cross-entropy of `logits` (`N×K×H×W`) against labels.
pub fn ce_loss(tape: &mut Tape, logits: Var, target: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, target)
}

/// Soft Dice loss averaged over the foreground classes `1..K`.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &[usize]) -> Result<Var> {
    tape.soft_dice(logits, target, DICE_EPS)
}

/// `0.5·ce + 0.5·dice`.
pub fn combined_loss(tape: &mut Tape, logits: Var, target: &[usize]) -> Result<Var> {
    let ce = ce_loss(tape, logits, target)?;
    let dice = dice_loss(tape, logits, target)?;
    let sum = tape.add(ce, dice)?;
    tape.scale(sum, 0.5)
}

/// Evaluates [`combined_loss`] without keeping gradients.
pub fn combined_loss_value(logits: &Tensor, target: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = combined_loss(&mut tape, l, target)?;
    Ok(tape.value(v).data()[0])
}

/// Per-pixel argmax over channels; first maximum wins.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &[usize], truth: &[usize], class: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "metrics",
                format!("prediction has {} pixels, target {}", pred.len(), truth.len()),
            ));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == class, t == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Conventions for empty denominators: Dice and IoU are 1 when the class
    /// is absent from both masks; precision and recall are 0 and flagged.
    pub fn metrics(&self) -> ClassMetrics {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let ratio = |num: f64, den: f64, empty: f64| if den == 0.0 { empty } else { num / den };
        ClassMetrics {
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn, 1.0),
            precision: ratio(tp, tp + fp, 0.0),
            recall: ratio(tp, tp + fn_, 0.0),
            dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_, 1.0),
            iou: ratio(tp, tp + fp + fn_, 1.0),
            precision_undefined: self.tp + self.fp == 0,
            recall_undefined: self.tp + self.fn_ == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    pub iou: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl ClassMetrics {
    fn mean(items: &[ClassMetrics]) -> ClassMetrics {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&ClassMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        ClassMetrics {
            accuracy: avg(|m| m.accuracy),
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            dice: avg(|m| m.dice),
            iou: avg(|m| m.iou),
            precision_undefined: items.iter().any(|m| m.precision_undefined),
            recall_undefined: items.iter().any(|m| m.recall_undefined),
        }
    }
}

/// Metrics of one predicted mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub per_class: Vec<ClassMetrics>,
    /// Mean over classes `1..K`.
    pub foreground: ClassMetrics,
}

pub fn metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<MaskMetrics> {
    if num_classes < 2 {
        return Err(Error::Domain("metrics need at least two classes".into()));
    }
    let per_class = (0..num_classes)
        .map(|c| ConfusionCounts::from_masks(pred, truth, c).map(|cc| cc.metrics()))
        .collect::<Result<Vec<_>>>()?;
    let foreground = ClassMetrics::mean(&per_class[1..]);
    Ok(MaskMetrics {
        per_class,
        foreground,
    })
}

/// Per-image metrics averaged over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub images: usize,
    pub per_class: Vec<ClassMetrics>,
    pub foreground: ClassMetrics,
}

impl MetricSummary {
    /// `items` must be in a fixed order (e.g. sorted by sample id) for a
    /// bitwise-reproducible reduction.
    pub fn average(items: &[MaskMetrics]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Data("no images to summarise".into()))?;
        let k = first.per_class.len();
        let per_class = (0..k)
            .map(|c| ClassMetrics::mean(&items.iter().map(|m| m.per_class[c]).collect::<Vec<_>>()))
            .collect();
        let foreground = ClassMetrics::mean(&items.iter().map(|m| m.foreground).collect::<Vec<_>>());
        Ok(Self {
            images: items.len(),
            per_class,
            foreground,
        })
    }
}

/// Mean and sample standard deviation across repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    /// Percent with two decimals, e.g. `89.58±0.13`.
    pub fn display_percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}
