//! Evaluation (per-level top-1, average catastrophic distance) and static
//! cost accounting (exact parameter and MAC counts, total and per-level).
//!
//! MAC convention: one multiply-accumulate per weight multiply. Conv costs
//! B*H'*W'*Cout*kh*kw*Cin, dense costs B*n*m; pooling, activations, softmax
//! and bias additions cost zero. The convention applies uniformly to every
//! variant, so relative comparisons do not depend on it.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Role, Variant};
use crate::nn::{NodeId, NodeKind, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::LabelTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    AllSamples,
    ErrorsOnly,
}

impl std::fmt::Display for Averaging {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Averaging::AllSamples => write!(f, "all_samples"),
            Averaging::ErrorsOnly => write!(f, "errors_only"),
        }
    }
}

impl std::str::FromStr for Averaging {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_samples" | "all" => Ok(Averaging::AllSamples),
            "errors_only" | "errors" => Ok(Averaging::ErrorsOnly),
            other => Err(Error::Config(format!(
                "unknown averaging '{other}' (use all_samples or errors_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_level_top1: Vec<f64>,
    pub catastrophic_distance: f64,
    pub n_samples: usize,
    pub averaging: Averaging,
}

impl EvalReport {
    /// Aligned table, one row per level plus the distance line.
    pub fn render_table(&self, tree: &LabelTree) -> String {
        let counts = tree.level_class_counts();
        let mut out = String::new();
        out.push_str("level  classes  top-1 accuracy (%)\n");
        for (l, &acc) in self.per_level_top1.iter().enumerate() {
            out.push_str(&format!(
                "{:<5}  {:<7}  {:.2}\n",
                l + 1,
                counts.get(l).copied().unwrap_or(0),
                acc * 100.0
            ));
        }
        out.push_str(&format!(
            "catastrophic distance ({}): {:.4}\n",
            self.averaging, self.catastrophic_distance
        ));
        out.push_str(&format!("samples: {}\n", self.n_samples));
        out
    }

    /// Line-delimited records: metric, variant/averaging tag, value.
    pub fn render_records(&self, name: &str) -> String {
        let mut out = String::new();
        for (l, &acc) in self.per_level_top1.iter().enumerate() {
            out.push_str(&format!("{name}\ttop1.level{}\t{acc:.6}\n", l + 1));
        }
        out.push_str(&format!(
            "{name}\tcatastrophic_distance.{}\t{:.6}\n",
            self.averaging, self.catastrophic_distance
        ));
        out.push_str(&format!("{name}\tsamples\t{}\n", self.n_samples));
        out
    }
}

/// One evaluated sample: the true fine class and the per-level predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub true_fine: usize,
    pub predicted: Vec<usize>,
}

pub fn evaluate<T: Scalar>(
    model: &mut ModelGraph<T>,
    data: &Dataset<T>,
    tree: &LabelTree,
    averaging: Averaging,
    batch_size: usize,
) -> Result<EvalReport> {
    evaluate_with_predictions(model, data, tree, averaging, batch_size).map(|(r, _)| r)
}

/// Evaluate and also return every per-sample prediction, so reports can be
/// recomputed from a dump.
pub fn evaluate_with_predictions<T: Scalar>(
    model: &mut ModelGraph<T>,
    data: &Dataset<T>,
    tree: &LabelTree,
    averaging: Averaging,
    batch_size: usize,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.validate_against(tree)?;
    let levels = model.levels();
    let was_training = model.graph.training();
    model.graph.set_training(false);

    let [c, h, w] = data.sample_shape();
    let sample_len = c * h * w;
    let n = data.len();
    let mut predictions: Vec<PredictionRecord> = Vec::with_capacity(n);
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let b = end - start;
        let mut batch = Vec::with_capacity(b * sample_len);
        for i in start..end {
            batch.extend_from_slice(data.sample(i));
        }
        let images = Tensor::from_vec(&[b, c, h, w], batch)?;
        model.bind_batch(images, None)?;
        model.forward_eval()?;
        for row in 0..b {
            let mut predicted = Vec::with_capacity(levels);
            for l in 0..levels {
                let probs = model.level_probs(l);
                let cols = probs.shape()[1];
                let slice = &probs.data()[row * cols..(row + 1) * cols];
                let mut best = 0usize;
                for (i, &p) in slice.iter().enumerate() {
                    if p > slice[best] {
                        best = i;
                    }
                }
                predicted.push(best);
            }
            predictions.push(PredictionRecord {
                index: start + row,
                true_fine: data.fine_labels[start + row],
                predicted,
            });
        }
        start = end;
    }
    model.graph.set_training(was_training);

    let report = report_from_predictions(&predictions, tree, averaging)?;
    Ok((report, predictions))
}

/// Recompute an evaluation report from a prediction dump.
pub fn report_from_predictions(
    predictions: &[PredictionRecord],
    tree: &LabelTree,
    averaging: Averaging,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let levels = tree.levels();
    let n = predictions.len();
    let mut correct = vec![0usize; levels];
    let mut distance_sum = 0u64;
    let mut errors = 0usize;
    for rec in predictions {
        let truth = tree.labels_for_leaf(rec.true_fine)?;
        for l in 0..levels {
            if rec.predicted[l] == truth.per_level[l] {
                correct[l] += 1;
            }
        }
        let predicted_fine = rec.predicted[levels - 1];
        if predicted_fine >= tree.leaf_count() {
            return Err(Error::LeafRange {
                index: predicted_fine,
                limit: tree.leaf_count(),
            });
        }
        let d = tree.leaf_distance(rec.true_fine, predicted_fine)?;
        distance_sum += d as u64;
        if predicted_fine != rec.true_fine {
            errors += 1;
        }
    }
    let denominator = match averaging {
        Averaging::AllSamples => n,
        Averaging::ErrorsOnly => errors,
    };
    let catastrophic_distance = if denominator == 0 {
        0.0
    } else {
        distance_sum as f64 / denominator as f64
    };
    Ok(EvalReport {
        per_level_top1: correct.iter().map(|&k| k as f64 / n as f64).collect(),
        catastrophic_distance,
        n_samples: n,
        averaging,
    })
}

/// Exact (total, trainable) parameter counts. Normalization running
/// statistics are buffers, not parameters.
pub fn count_params<T: Scalar>(model: &ModelGraph<T>) -> (u64, u64) {
    let mut total = 0u64;
    let mut trainable = 0u64;
    for (i, node) in model.graph.nodes().iter().enumerate() {
        if let NodeKind::Param { frozen } = node.kind {
            let len = model.graph.value(NodeId(i)).len() as u64;
            total += len;
            if !frozen {
                trainable += len;
            }
        }
    }
    (total, trainable)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostVariant {
    Flat,
    Bcnn,
    Sha,
}

impl std::fmt::Display for CostVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CostVariant::Flat => write!(f, "flat"),
            CostVariant::Bcnn => write!(f, "bcnn"),
            CostVariant::Sha => write!(f, "sha"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: CostVariant,
    pub input_shape: [usize; 3],
    pub batch: usize,
    pub total_params: u64,
    pub trainable_params: u64,
    pub total_macs: u64,
    pub trunk_macs: u64,
    /// Branch-exclusive MACs per level: adapter + FC path share + head.
    pub per_level_macs: Vec<u64>,
    /// Cumulative view: trunk MACs up to each level's tap, plus the
    /// branch-exclusive MACs.
    pub per_level_macs_cumulative: Vec<u64>,
}

/// Static multiply-accumulate counts at the given input shape (batch 1 by
/// default at the CLI). Exact integers; equals an instrumented naive
/// forward by construction of the same shape arithmetic.
pub fn count_macs<T: Scalar>(
    model: &ModelGraph<T>,
    input_shape: [usize; 3],
    batch: usize,
) -> Result<CostReport> {
    let [c, h, w] = input_shape;
    let shapes = model
        .graph
        .infer_shapes(&[(model.input_id(), vec![batch, c, h, w])])?;

    let levels = model.levels();
    let mut trunk_macs = 0u64;
    let mut per_block: Vec<u64> = vec![0; model.arch().trunk.len()];
    let mut per_level = vec![0u64; levels];
    for (i, node) in model.graph.nodes().iter().enumerate() {
        if node.kind != NodeKind::Computed {
            continue;
        }
        let macs: u64 = match &node.op {
            Op::Conv2d { .. } => {
                let out = &shapes[i];
                let kernel = &shapes[node.inputs[1].0];
                (out[0] * out[2] * out[3] * kernel[0] * kernel[1] * kernel[2] * kernel[3]) as u64
            }
            Op::Dense => {
                let x = &shapes[node.inputs[0].0];
                let wgt = &shapes[node.inputs[1].0];
                (x[0] * wgt[0] * wgt[1]) as u64
            }
            _ => 0,
        };
        if macs == 0 {
            continue;
        }
        match model.role(NodeId(i)) {
            Role::Trunk { block } => {
                trunk_macs += macs;
                per_block[block] += macs;
            }
            role => match role.cost_level() {
                Some(level) => per_level[level] += macs,
                None => {
                    return Err(Error::Config(format!(
                        "node {i} carries MACs but no cost attribution"
                    )))
                }
            },
        }
    }

    let prefix: Vec<u64> = per_block
        .iter()
        .scan(0u64, |acc, &b| {
            *acc += b;
            Some(*acc)
        })
        .collect();
    let per_level_macs_cumulative: Vec<u64> = (0..levels)
        .map(|l| per_level[l] + prefix[model.arch().taps[l] - 1])
        .collect();

    let total_macs = trunk_macs + per_level.iter().sum::<u64>();
    let (total_params, trainable_params) = count_params(model);
    let variant = if levels == 1 {
        CostVariant::Flat
    } else {
        match model.variant() {
            Variant::Bcnn => CostVariant::Bcnn,
            Variant::Sha => CostVariant::Sha,
        }
    };
    Ok(CostReport {
        variant,
        input_shape,
        batch,
        total_params,
        trainable_params,
        total_macs,
        trunk_macs,
        per_level_macs: per_level,
        per_level_macs_cumulative,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostComparison {
    pub entries: Vec<(String, CostReport)>,
}

/// Tabulate cost reports side by side with reductions relative to the first
/// entry. All entries must share an input shape.
pub fn compare_costs(entries: Vec<(String, CostReport)>) -> Result<CostComparison> {
    if entries.is_empty() {
        return Err(Error::Config("nothing to compare".into()));
    }
    let shape = entries[0].1.input_shape;
    let batch = entries[0].1.batch;
    for (name, report) in &entries {
        if report.input_shape != shape || report.batch != batch {
            return Err(Error::ShapeMismatch(format!(
                "'{name}' was counted at {:?} (batch {}), expected {:?} (batch {})",
                report.input_shape, report.batch, shape, batch
            )));
        }
    }
    Ok(CostComparison { entries })
}

fn reduction(base: u64, x: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        (base as f64 - x as f64) / base as f64 * 100.0
    }
}

impl CostComparison {
    pub fn render_table(&self) -> String {
        let base = &self.entries[0].1;
        let name_w = self
            .entries
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let mut out = String::new();
        let [c, h, w] = base.input_shape;
        out.push_str(&format!(
            "input {c}x{h}x{w}, batch {}  (reductions relative to '{}')\n\n",
            base.batch, self.entries[0].0
        ));
        out.push_str(&format!(
            "{:<name_w$}  {:<7}  {:>12}  {:>12}  {:>12}  {:>8}  {:>12}  {:>8}\n",
            "model", "variant", "params", "trainable", "macs", "macs Δ%", "trunk macs", "params Δ%"
        ));
        for (name, r) in &self.entries {
            out.push_str(&format!(
                "{:<name_w$}  {:<7}  {:>12}  {:>12}  {:>12}  {:>8.2}  {:>12}  {:>8.2}\n",
                name,
                r.variant.to_string(),
                r.total_params,
                r.trainable_params,
                r.total_macs,
                reduction(base.total_macs, r.total_macs),
                r.trunk_macs,
                reduction(base.total_params, r.total_params),
            ));
        }
        out.push_str("\nper-level MACs (branch-exclusive)\n");
        for (name, r) in &self.entries {
            out.push_str(&format!(
                "{:<name_w$}  {}\n",
                name,
                r.per_level_macs
                    .iter()
                    .enumerate()
                    .map(|(l, m)| format!("L{}={m}", l + 1))
                    .collect::<Vec<_>>()
                    .join("  ")
            ));
        }
        out.push_str("\nper-level MACs (cumulative: trunk up to tap + branch)\n");
        for (name, r) in &self.entries {
            out.push_str(&format!(
                "{:<name_w$}  {}\n",
                name,
                r.per_level_macs_cumulative
                    .iter()
                    .enumerate()
                    .map(|(l, m)| format!("L{}={m}", l + 1))
                    .collect::<Vec<_>>()
                    .join("  ")
            ));
        }
        out
    }

    /// Line-delimited records: model, variant, metric, value.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        for (name, r) in &self.entries {
            let mut push = |metric: &str, value: u64| {
                out.push_str(&format!("{name}\t{}\t{metric}\t{value}\n", r.variant));
            };
            push("total_params", r.total_params);
            push("trainable_params", r.trainable_params);
            push("total_macs", r.total_macs);
            push("trunk_macs", r.trunk_macs);
            for (l, &m) in r.per_level_macs.iter().enumerate() {
                push(&format!("level{}_macs", l + 1), m);
            }
            for (l, &m) in r.per_level_macs_cumulative.iter().enumerate() {
                push(&format!("level{}_macs_cumulative", l + 1), m);
            }
        }
        out
    }
}
