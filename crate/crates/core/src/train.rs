//! Training loop, early stopping, reports and multi-seed comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::config::{DataConfig, RunConfig, TrainConfig};
use crate::datasets::{self, Sample, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{self, round4, ClassMetrics, MeanStd, MetricSummary};
use crate::optim::Adam;
use crate::rng;
use crate::segnet::{ModelSpec, ParamCount, SegModel};

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5_0000;
const IMPROVEMENT: f64 = 1e-6;

pub const EPOCHS_HEADER: &str = "epoch,train_loss,val_loss,val_dice,val_iou,val_accuracy,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    pub val_accuracy: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.val_dice, self.val_iou, self.val_accuracy, self.wall_ms
        )
    }
}

pub fn epochs_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(EPOCHS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Loss and per-image metrics of a model on a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Combined loss, batch values weighted by batch size.
    pub loss: f64,
    pub metrics: MetricSummary,
}

fn class_json(m: &ClassMetrics) -> Value {
    json!({
        "accuracy": round4(m.accuracy),
        "precision": round4(m.precision),
        "recall": round4(m.recall),
        "dice": round4(m.dice),
        "iou": round4(m.iou),
        "precision_undefined": m.precision_undefined,
        "recall_undefined": m.recall_undefined,
    })
}

impl Evaluation {
    pub fn to_json(&self) -> Value {
        json!({
            "images": self.metrics.images,
            "loss": round4(self.loss),
            "foreground": class_json(&self.metrics.foreground),
            "per_class": self.metrics.per_class.iter().map(class_json).collect::<Vec<_>>(),
        })
    }
}

/// Evaluates `samples` in order, `batch_size` images at a time.
pub fn evaluate(model: &SegModel, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let k = model.spec().num_classes;
    let mut loss = 0.0;
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, target) = datasets::batch(&refs)?;
        let logits = model.predict(&x)?;
        loss += evaluation::combined_loss_value(&logits, &target)? * chunk.len() as f64;
        let pred = evaluation::argmax_masks(&logits)?;
        let hw = pred.len() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            per_image.push(evaluation::metrics(&pred[i * hw..(i + 1) * hw], &s.mask, k)?);
        }
    }
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        metrics: MetricSummary::average(&per_image)?,
    })
}

/// Builds the train/val/test partition for `seed`.
pub fn prepare_split(data: &DataConfig, seed: u64) -> Result<Split> {
    match data {
        DataConfig::Synthetic(s) => {
            let samples = datasets::synth_multiscale(&s.params())?;
            match s.explicit_counts()? {
                Some(counts) => datasets::split_counts(samples, counts, seed),
                None => datasets::split(samples, &SplitSpec::standard(seed)),
            }
        }
        DataConfig::Directory(d) => {
            let samples = datasets::load_directory(&d.root.join("images"), &d.root.join("masks"), &d.options())?;
            datasets::split(samples, &SplitSpec::standard(seed))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: SegModel,
    pub records: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test: Evaluation,
    pub seed: u64,
}

impl TrainOutcome {
    pub fn param_count(&self) -> ParamCount {
        self.model.param_count()
    }

    pub fn report(&self) -> Value {
        json!({
            "model": self.model.spec().kind,
            "seed": self.seed,
            "param_count": self.param_count(),
            "epochs_run": self.records.len(),
            "best_epoch": self.best_epoch,
            "best_val_loss": round4(self.best_val_loss),
            "test": self.test.to_json(),
        })
    }
}

/// Trains a fresh model for `seed` on a prepared split.
///
/// Each epoch visits the training set in a seeded random order, then
/// measures the validation loss. The parameters with the lowest validation
/// loss are kept; training stops once `patience` epochs pass without an
/// improvement larger than `1e-6` (never when `patience` is 0).
pub fn train_model(spec: &ModelSpec, cfg: &TrainConfig, split: &Split, seed: u64) -> Result<TrainOutcome> {
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Data("train, validation and test sets must be non-empty".into()));
    }
    let mut model = SegModel::new(spec, &mut rng::derived(seed, INIT_STREAM))?;
    let adam = Adam::new(cfg.lr);
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng::derived(seed, SHUFFLE_STREAM + epoch as u64));
        let mut train_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &split.train[i]).collect();
            let (x, target) = datasets::batch(&batch)?;
            let at = |e: Error| match e {
                Error::Numerical(msg) => {
                    Error::Numerical(format!("epoch {epoch}, batch {b} (first sample {}): {msg}", batch[0].id))
                }
                other => other,
            };
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = model.forward(&mut tape, xv).map_err(at)?;
            let loss = evaluation::combined_loss(&mut tape, logits, &target).map_err(at)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(at(Error::Numerical(format!("training loss is {value}"))));
            }
            train_loss += value * batch.len() as f64;
            let grads = tape.backward(loss).map_err(at)?;
            adam.step(&mut model.params_mut(), grads.by_name()).map_err(at)?;
        }
        train_loss /= split.train.len() as f64;
        let val = evaluate(&model, &split.val, cfg.batch_size)?;
        if !val.loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss {} at epoch {epoch}", val.loss)));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_dice: val.metrics.foreground.dice,
            val_iou: val.metrics.foreground.iou,
            val_accuracy: val.metrics.foreground.accuracy,
            wall_ms: if cfg.log_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} dice {:.4}",
            record.train_loss,
            record.val_loss,
            record.val_dice
        );
        records.push(record);
        if val.loss < best_val - IMPROVEMENT {
            best_val = val.loss;
            best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}, best epoch {best_epoch}");
                break;
            }
        }
    }
    if best_epoch == 0 {
        // No epoch improved on infinity, which the finiteness check rules out.
        return Err(Error::Numerical("no finite validation loss recorded".into()));
    }
    let test = evaluate(&best, &split.test, cfg.batch_size)?;
    Ok(TrainOutcome {
        model: best,
        records,
        best_epoch,
        best_val_loss: best_val,
        test,
        seed,
    })
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `epochs.csv`, `checkpoint.bin`, `report.json` and the resolved `config.toml`.
pub fn write_artifacts(outcome: &TrainOutcome, cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("epochs.csv"), epochs_csv(&outcome.records).as_bytes())?;
    checkpoint::save(&dir.join("checkpoint.bin"), outcome.model.named_tensors())?;
    let report = serde_json::to_string_pretty(&outcome.report()).expect("report serialises");
    write(&dir.join("report.json"), report.as_bytes())?;
    let resolved = cfg.clone().with_overrides(Some(outcome.seed), None);
    write(&dir.join("config.toml"), resolved.to_toml().as_bytes())
}

/// Full run for one seed: data, training, artifacts in `dir`.
pub fn train_run(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<TrainOutcome> {
    let split = prepare_split(&cfg.data, seed)?;
    log::info!(
        "seed {seed}: {} train / {} val / {} test samples",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let outcome = train_model(&cfg.model, &cfg.train, &split, seed)?;
    write_artifacts(&outcome, cfg, dir)?;
    Ok(outcome)
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub dice: f64,
    pub iou: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub model: crate::segnet::ModelKind,
    pub param_count: ParamCount,
    pub runs: Vec<SeedResult>,
    pub accuracy: MeanStd,
    pub dice: MeanStd,
    pub iou: MeanStd,
}

impl ArmSummary {
    fn new(runs: Vec<SeedResult>, spec: &ModelSpec) -> Self {
        let col = |f: fn(&SeedResult) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            model: spec.kind,
            param_count: SegModel::closed_form_count(spec),
            accuracy: col(|r| r.accuracy),
            dice: col(|r| r.dice),
            iou: col(|r| r.iou),
            runs,
        }
    }

    fn to_json(&self) -> Value {
        let stat = |m: &MeanStd| json!({"mean": round4(m.mean), "std": round4(m.std), "display": m.display_percent()});
        json!({
            "model": self.model,
            "param_count": self.param_count,
            "accuracy": stat(&self.accuracy),
            "dice": stat(&self.dice),
            "iou": stat(&self.iou),
            "runs": self.runs.iter().map(|r| json!({
                "seed": r.seed,
                "accuracy": round4(r.accuracy),
                "dice": round4(r.dice),
                "iou": round4(r.iou),
                "best_epoch": r.best_epoch,
            })).collect::<Vec<_>>(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: ArmSummary,
    pub adaptive: ArmSummary,
    /// Adaptive minus baseline test dice, per seed.
    pub dice_diffs: Vec<f64>,
    pub mean_dice_diff: f64,
}

impl Comparison {
    pub fn to_json(&self) -> Value {
        json!({
            "baseline": self.baseline.to_json(),
            "adaptive": self.adaptive.to_json(),
            "paired_dice_diff": self.dice_diffs.iter().map(|d| round4(*d)).collect::<Vec<_>>(),
            "mean_dice_diff": round4(self.mean_dice_diff),
        })
    }
}

fn seed_result(o: &TrainOutcome) -> SeedResult {
    let fg = &o.test.metrics.foreground;
    SeedResult {
        seed: o.seed,
        accuracy: fg.accuracy,
        dice: fg.dice,
        iou: fg.iou,
        best_epoch: o.best_epoch,
    }
}

/// Trains both configurations on every seed.
///
/// Runs land in `<out>/baseline/seed_<s>` and `<out>/adaptive/seed_<s>`;
/// the summary is written to `<out>/comparison.json`.
pub fn compare(baseline: &RunConfig, adaptive: &RunConfig, seeds: &[u64], out: &Path) -> Result<Comparison> {
    if baseline.data != adaptive.data {
        return Err(Error::Config("compared configs must use the same dataset".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("no seeds to compare".into()));
    }
    let mut arms = Vec::with_capacity(2);
    for (label, cfg) in [("baseline", baseline), ("adaptive", adaptive)] {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            log::info!("{label}: seed {seed}");
            let outcome = train_run(cfg, seed, &seed_dir(&out.join(label), seed))?;
            runs.push(seed_result(&outcome));
        }
        arms.push(ArmSummary::new(runs, &cfg.model));
    }
    let adaptive_arm = arms.pop().expect("two arms");
    let baseline_arm = arms.pop().expect("two arms");
    let dice_diffs: Vec<f64> = adaptive_arm
        .runs
        .iter()
        .zip(&baseline_arm.runs)
        .map(|(a, b)| a.dice - b.dice)
        .collect();
    let mean_dice_diff = dice_diffs.iter().sum::<f64>() / dice_diffs.len() as f64;
    let cmp = Comparison {
        baseline: baseline_arm,
        adaptive: adaptive_arm,
        dice_diffs,
        mean_dice_diff,
    };
    let text = serde_json::to_string_pretty(&cmp.to_json()).expect("comparison serialises");
    write(&out.join("comparison.json"), text.as_bytes())?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let r = EpochRecord {
            epoch: 3,
            train_loss: 0.5,
            val_loss: 0.25,
            val_dice: 0.75,
            val_iou: 0.6,
            val_accuracy: 0.9,
            wall_ms: 0,
        };
        assert_eq!(epochs_csv(&[r]), format!("{EPOCHS_HEADER}\n3,0.5,0.25,0.75,0.6,0.9,0\n"));
    }
}
