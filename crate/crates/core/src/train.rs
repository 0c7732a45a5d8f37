//! The two-phase procedure. Phase 1 trains the branched model under a
//! loss-weight schedule that shifts focus from coarse to fine levels;
//! phase 2 trains only the shared FC stack and the per-level heads at a low
//! learning rate while the bundled trunk and adapters stay frozen.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Variant};
use crate::nn::{Optimizer, OptimizerConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::LabelTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Piecewise-constant per-level loss weights over epochs. Each segment's
/// weights sum to one; segments cover epoch 0 and start strictly later than
/// their predecessor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeightSchedule {
    segments: Vec<ScheduleSegment>,
}

impl LossWeightSchedule {
    pub fn new(segments: Vec<ScheduleSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("schedule needs at least one segment".into()));
        }
        if segments[0].start != 0 {
            return Err(Error::Config(format!(
                "schedule must cover epoch 0, first segment starts at {}",
                segments[0].start
            )));
        }
        let levels = segments[0].weights.len();
        if levels == 0 {
            return Err(Error::Config("schedule weights are empty".into()));
        }
        let mut prev_start = None;
        for seg in &segments {
            if seg.weights.len() != levels {
                return Err(Error::Config(format!(
                    "schedule segment at epoch {} has {} weights, expected {levels}",
                    seg.start,
                    seg.weights.len()
                )));
            }
            if let Some(p) = prev_start {
                if seg.start <= p {
                    return Err(Error::Config(
                        "schedule segment starts must be strictly increasing".into(),
                    ));
                }
            }
            prev_start = Some(seg.start);
            if seg.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return Err(Error::Config(format!(
                    "schedule weights at epoch {} must be non-negative",
                    seg.start
                )));
            }
            let sum: f64 = seg.weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "schedule weights at epoch {} sum to {sum}, expected 1",
                    seg.start
                )));
            }
        }
        Ok(LossWeightSchedule { segments })
    }

    pub fn uniform(levels: usize) -> Self {
        LossWeightSchedule {
            segments: vec![ScheduleSegment {
                start: 0,
                weights: vec![1.0 / levels as f64; levels],
            }],
        }
    }

    /// Shipped default: focus shifts from the coarsest level to the finest
    /// over the epoch budget. These weights are conventions, not ground
    /// truth; override them in the config.
    pub fn coarse_to_fine(levels: usize, epochs: usize) -> Self {
        if levels == 1 {
            return LossWeightSchedule::uniform(1);
        }
        let boundary = |k: usize| (epochs * k / levels).max(k);
        if levels == 3 {
            let segments = vec![
                ScheduleSegment {
                    start: 0,
                    weights: vec![0.98, 0.01, 0.01],
                },
                ScheduleSegment {
                    start: boundary(1),
                    weights: vec![0.10, 0.80, 0.10],
                },
                ScheduleSegment {
                    start: boundary(2),
                    weights: vec![0.10, 0.20, 0.70],
                },
            ];
            return LossWeightSchedule::new(segments).expect("valid default");
        }
        let rest = 0.20 / (levels - 1) as f64;
        let segments = (0..levels)
            .map(|k| {
                let mut weights = vec![rest; levels];
                weights[k] = 0.80;
                ScheduleSegment {
                    start: if k == 0 { 0 } else { boundary(k) },
                    weights,
                }
            })
            .collect();
        LossWeightSchedule::new(segments).expect("valid default")
    }

    pub fn levels(&self) -> usize {
        self.segments[0].weights.len()
    }

    pub fn segments(&self) -> &[ScheduleSegment] {
        &self.segments
    }

    /// Weights of the last segment starting at or before `epoch`.
    pub fn weights_at(&self, epoch: usize) -> &[f64] {
        let mut current = &self.segments[0];
        for seg in &self.segments {
            if seg.start <= epoch {
                current = seg;
            } else {
                break;
            }
        }
        &current.weights
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: LossWeightSchedule,
    pub seed: u64,
    pub phase: Phase,
    #[serde(default)]
    pub hflip: bool,
}

/// One line of the history output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seed: u64,
    pub per_level_loss: Vec<f64>,
    pub per_level_top1: Vec<f64>,
    pub loss_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_per_level_top1: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(History { records })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        History::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn final_top1(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.per_level_top1.as_slice())
    }
}

/// Weighted sum of per-level cross-entropies as a standalone value.
pub fn total_loss<T: Scalar>(
    per_level_logits: &[Tensor<T>],
    per_level_labels: &[Vec<usize>],
    weights: &[f64],
) -> Result<T> {
    if per_level_logits.len() != per_level_labels.len()
        || per_level_logits.len() != weights.len()
    {
        return Err(Error::ShapeMismatch(format!(
            "total_loss got {} logits, {} label sets, {} weights",
            per_level_logits.len(),
            per_level_labels.len(),
            weights.len()
        )));
    }
    let mut acc = T::zero();
    for ((logits, labels), &w) in per_level_logits
        .iter()
        .zip(per_level_labels)
        .zip(weights)
    {
        acc += T::from_f64(w) * crate::nn::softmax_cross_entropy(logits, labels)?;
    }
    Ok(acc)
}

/// Phase 1: branch-weighted multi-loss training of the branched model.
pub fn train_phase1<T: Scalar>(
    model: &mut ModelGraph<T>,
    data: &Dataset<T>,
    val: Option<&Dataset<T>>,
    tree: &LabelTree,
    cfg: &TrainConfig,
) -> Result<History> {
    if model.variant() != Variant::Bcnn {
        return Err(Error::Train(
            "phase 1 trains the branched variant; got the distilled model".into(),
        ));
    }
    run_training(model, data, val, tree, cfg)
}

/// Phase 2: train the shared stack and heads of the distilled model; the
/// bundled tensors must be frozen.
pub fn train_phase2<T: Scalar>(
    model: &mut ModelGraph<T>,
    data: &Dataset<T>,
    val: Option<&Dataset<T>>,
    tree: &LabelTree,
    cfg: &TrainConfig,
) -> Result<History> {
    if model.variant() != Variant::Sha {
        return Err(Error::Train(
            "phase 2 trains the distilled variant; got the branched model".into(),
        ));
    }
    if !model.has_frozen_params() {
        return Err(Error::Train(
            "phase-2 model has no frozen parameters; it was not built from a weight bundle".into(),
        ));
    }
    run_training(model, data, val, tree, cfg)
}

struct LabelTable {
    /// per_level[l][i] = level-(l+1) class of sample i.
    per_level: Vec<Vec<usize>>,
}

fn label_table<T: Scalar>(data: &Dataset<T>, tree: &LabelTree) -> Result<LabelTable> {
    let levels = tree.levels();
    let mut per_level = vec![Vec::with_capacity(data.len()); levels];
    for &fine in &data.fine_labels {
        let labels = tree.labels_for_leaf(fine)?;
        for (l, &cls) in labels.per_level.iter().enumerate() {
            per_level[l].push(cls);
        }
    }
    Ok(LabelTable { per_level })
}

fn run_training<T: Scalar>(
    model: &mut ModelGraph<T>,
    data: &Dataset<T>,
    val: Option<&Dataset<T>>,
    tree: &LabelTree,
    cfg: &TrainConfig,
) -> Result<History> {
    let levels = model.levels();
    if cfg.schedule.levels() != levels {
        return Err(Error::Train(format!(
            "schedule covers {} levels, model has {levels}",
            cfg.schedule.levels()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    data.validate_against(tree)?;
    if let Some(val) = val {
        val.validate_against(tree)?;
    }
    let table = label_table(data, tree)?;
    let n = data.len();
    if n == 0 && cfg.epochs > 0 {
        return Err(Error::EmptyDataset);
    }

    let [c, h, w] = if n > 0 {
        data.sample_shape()
    } else {
        model.arch().input_shape
    };
    let sample_len = c * h * w;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer: Optimizer<T> = Optimizer::new(cfg.optimizer);
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let weights = cfg.schedule.weights_at(epoch).to_vec();
        model.set_loss_weights(&weights)?;
        model.graph.set_training(true);

        let mut epoch_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = epoch_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_acc = vec![0.0f64; levels];
        let mut correct = vec![0usize; levels];
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut batch = Vec::with_capacity(b * sample_len);
            for &i in chunk {
                let sample = data.sample(i);
                if cfg.hflip && epoch_rng.gen::<bool>() {
                    for ci in 0..c {
                        for hi in 0..h {
                            let row = &sample[(ci * h + hi) * w..(ci * h + hi + 1) * w];
                            batch.extend(row.iter().rev());
                        }
                    }
                } else {
                    batch.extend_from_slice(sample);
                }
            }
            let images = Tensor::from_vec(&[b, c, h, w], batch)?;
            let batch_labels: Vec<Vec<usize>> = (0..levels)
                .map(|l| chunk.iter().map(|&i| table.per_level[l][i]).collect())
                .collect();
            model.bind_batch(images, Some(&batch_labels))?;
            model.forward_train()?;

            for (l, loss) in model.loss_values().iter().enumerate() {
                loss_acc[l] += loss.as_f64() * b as f64;
            }
            for l in 0..levels {
                let probs = model.level_probs(l);
                let cols = probs.shape()[1];
                for (row, &target) in batch_labels[l].iter().enumerate() {
                    let slice = &probs.data()[row * cols..(row + 1) * cols];
                    let mut best = 0usize;
                    for (i, &p) in slice.iter().enumerate() {
                        if p > slice[best] {
                            best = i;
                        }
                    }
                    if best == target {
                        correct[l] += 1;
                    }
                }
            }

            model.graph.backward(model.total_loss_id())?;
            optimizer.step(&mut model.graph)?;
        }

        let per_level_loss: Vec<f64> = loss_acc.iter().map(|&s| s / n.max(1) as f64).collect();
        let per_level_top1: Vec<f64> = correct
            .iter()
            .map(|&k| k as f64 / n.max(1) as f64)
            .collect();

        let val_per_level_top1 = match val {
            Some(val) if !val.is_empty() => Some(validation_top1(model, val, tree)?),
            _ => None,
        };
        model.graph.set_training(true);

        eprintln!(
            "epoch {epoch}: loss {:?} top1 {:?} weights {:?}",
            per_level_loss
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>(),
            per_level_top1
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>(),
            weights
        );
        history.records.push(EpochRecord {
            epoch,
            seed: cfg.seed,
            per_level_loss,
            per_level_top1,
            loss_weights: weights,
            val_per_level_top1,
        });
    }
    Ok(history)
}

fn validation_top1<T: Scalar>(
    model: &mut ModelGraph<T>,
    val: &Dataset<T>,
    tree: &LabelTree,
) -> Result<Vec<f64>> {
    let levels = model.levels();
    let table = label_table(val, tree)?;
    let [c, h, w] = val.sample_shape();
    let sample_len = c * h * w;
    model.graph.set_training(false);
    let mut correct = vec![0usize; levels];
    let n = val.len();
    let batch_size = 256;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let b = end - start;
        let mut batch = Vec::with_capacity(b * sample_len);
        for i in start..end {
            batch.extend_from_slice(val.sample(i));
        }
        let images = Tensor::from_vec(&[b, c, h, w], batch)?;
        model.bind_batch(images, None)?;
        model.forward_eval()?;
        for l in 0..levels {
            let probs = model.level_probs(l);
            let cols = probs.shape()[1];
            for row in 0..b {
                let slice = &probs.data()[row * cols..(row + 1) * cols];
                let mut best = 0usize;
                for (i, &p) in slice.iter().enumerate() {
                    if p > slice[best] {
                        best = i;
                    }
                }
                if best == table.per_level[l][start + row] {
                    correct[l] += 1;
                }
            }
        }
        start = end;
    }
    Ok(correct.iter().map(|&k| k as f64 / n as f64).collect())
}
